"""Training drivers: end-to-end and two-stage, Nesterov SGD, early stopping."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np

from .adapter import AdapterConfig, adapt_backward, adapt_forward, posterior_context
from .errors import InvalidArgumentError, TrainingFailureError
from .exact_gp import TimeSeries, log_marginal_likelihood, log_marginal_likelihood_grad
from .kernel import GpParams
from .models import (
    Classifier,
    MegFeatureBank,
    build_classifier,
    classifier_from_dict,
    classifier_to_dict,
    forward,
    loss_and_grads,
    make_meg_bank,
    meg_features,
    meg_features_grad,
)
from .ski import ski_posterior_mean

__all__ = [
    "Dataset",
    "ClassifierSpec",
    "TrainConfig",
    "Artifacts",
    "NesterovSGD",
    "default_gp_params",
    "train",
    "predict",
    "evaluate",
    "split_indices",
]

log = logging.getLogger(__name__)

REGIMES = ("end_to_end", "two_stage")
HISTORY_FIELDS = ("epoch", "phase", "train_loss", "val_acc", "alpha", "beta", "gamma", "lr")


@dataclass
class Dataset:
    series: list
    T: float
    n_classes: int

    def __post_init__(self):
        if self.n_classes < 1:
            raise InvalidArgumentError("need at least one class")
        for s in self.series:
            if s.label is None or not 0 <= s.label < self.n_classes:
                raise InvalidArgumentError(f"label {s.label} outside 0..{self.n_classes - 1}")

    def __len__(self):
        return len(self.series)

    def subset(self, idx) -> "Dataset":
        return Dataset([self.series[i] for i in idx], self.T, self.n_classes)


@dataclass(frozen=True)
class ClassifierSpec:
    """``kind`` is one of logreg, mlp, convnet or meg (logistic regression on
    ``meg_features`` expected random features)."""

    kind: str = "logreg"
    hidden: int = 256
    meg_features: int = 1000


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-2
    momentum: float = 0.9
    epochs: int = 50
    early_stop_patience: int = 10
    train_fraction: float = 0.7
    val_fraction: float = 0.3
    regime: str = "end_to_end"
    framework: str = "uac"
    seed: int = 0
    clip_norm: float = 10.0
    lr_decay: float = 0.5
    ml_epochs: int = 10
    ml_learning_rate: float = 1e-2
    init_params: Optional[tuple] = None

    def __post_init__(self):
        if abs(self.train_fraction + self.val_fraction - 1.0) > 1e-9:
            raise InvalidArgumentError("train and validation fractions must sum to 1")
        if self.early_stop_patience < 1:
            raise InvalidArgumentError("patience must be at least 1")
        if self.regime not in REGIMES:
            raise InvalidArgumentError(f"regime must be one of {REGIMES}")
        if self.framework not in ("uac", "imp"):
            raise InvalidArgumentError("framework must be uac or imp")


class NesterovSGD:
    """SGD with Nesterov momentum: ``v <- mu v + g``, ``p <- p - lr (g + mu v)``.

    With ``mu = 0`` this is plain SGD. Parameters are updated in place.
    """

    def __init__(self, params: Sequence[np.ndarray], lr: float, momentum: float = 0.9, clip_norm: Optional[float] = None):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.clip_norm = clip_norm
        self.velocity = [np.zeros_like(p) for p in self.params]

    def step(self, grads: Sequence[np.ndarray]):
        grads = list(grads)
        if self.clip_norm is not None:
            total = math.sqrt(sum(float(np.vdot(g, g)) for g in grads))
            if total > self.clip_norm:
                grads = [g * (self.clip_norm / total) for g in grads]
        mu = self.momentum
        for p, v, g in zip(self.params, self.velocity, grads):
            v *= mu
            v += g
            p -= self.lr * (g + mu * v)


@dataclass
class Artifacts:
    """Everything needed to predict: classifier, GP parameters, adapter config."""

    classifier: Classifier
    gp_params: GpParams
    adapter_cfg: AdapterConfig
    bank: Optional[MegFeatureBank] = None

    def to_dict(self) -> dict:
        return {
            "format": "gpadapter-artifacts",
            "version": 1,
            "classifier": classifier_to_dict(self.classifier),
            "gp_params": {"alpha": self.gp_params.alpha, "beta": self.gp_params.beta, "gamma": self.gp_params.gamma},
            "adapter": asdict(self.adapter_cfg),
            "meg_bank": None if self.bank is None else self.bank.to_dict(),
        }

    @classmethod
    def from_dict(cls, data) -> "Artifacts":
        if data.get("format") != "gpadapter-artifacts" or data.get("version") != 1:
            raise InvalidArgumentError("not a version-1 gpadapter artifacts file")
        bank = None if data.get("meg_bank") is None else MegFeatureBank.from_dict(data["meg_bank"])
        return cls(
            classifier_from_dict(data["classifier"]),
            GpParams(**data["gp_params"]),
            AdapterConfig(**data["adapter"]),
            bank,
        )

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path) -> "Artifacts":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def default_gp_params(dataset: Dataset) -> GpParams:
    """Data-driven start: amplitude = value variance, length scale = T/10,
    noise = 10% of the variance."""
    values = np.concatenate([s.values for s in dataset.series]) if dataset.series else np.ones(1)
    var = float(np.var(values)) if values.size > 1 else 1.0
    var = var if var > 0 else 1.0
    length = dataset.T / 10.0
    return GpParams.from_natural(var, 1.0 / (2.0 * length * length), 0.1 * var)


def split_indices(n: int, train_fraction: float, seed: int):
    """Shuffled train/validation split; validation gets at least one item when n > 1."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5911]))
    order = rng.permutation(n)
    n_train = int(round(train_fraction * n))
    if n > 1:
        n_train = min(max(n_train, 1), n - 1)
    return np.sort(order[:n_train]), np.sort(order[n_train:])


def _imp_input(series: TimeSeries, params: GpParams, cfg: AdapterConfig, bank):
    ctx = posterior_context(series, params, cfg)
    if bank is not None:
        return meg_features(bank, ctx)
    if cfg.mode == "exact":
        return ctx.mean
    return ski_posterior_mean(ctx)


def predict(series: TimeSeries, params: GpParams, clf: Classifier, adapter_cfg: AdapterConfig, bank=None) -> int:
    """Arg-max class at the posterior mean; ties go to the lowest class index."""
    logits = forward(clf, _imp_input(series, params, adapter_cfg, bank))
    return int(np.argmax(logits))


def evaluate(dataset: Dataset, artifacts: Artifacts) -> dict:
    if len(dataset) == 0:
        raise InvalidArgumentError("cannot evaluate an empty dataset")
    clf, params, cfg, bank = artifacts.classifier, artifacts.gp_params, artifacts.adapter_cfg, artifacts.bank
    correct = np.zeros(dataset.n_classes)
    counts = np.zeros(dataset.n_classes)
    losses = []
    for s in dataset.series:
        z = _imp_input(s, params, cfg, bank)
        logits = forward(clf, z)
        shifted = logits - logits.max()
        losses.append(float(np.log(np.exp(shifted).sum()) - shifted[s.label]))
        counts[s.label] += 1
        correct[s.label] += int(np.argmax(logits)) == s.label
    with np.errstate(invalid="ignore", divide="ignore"):
        per_class = np.where(counts > 0, correct / counts, np.nan)
    return {
        "accuracy": float(correct.sum() / counts.sum()),
        "per_class_accuracy": per_class.tolist(),
        "mean_loss": float(np.mean(losses)),
        "n": int(counts.sum()),
    }


def _accuracy(series_list, params, clf, cfg, bank) -> float:
    if not series_list:
        return float("nan")
    hits = sum(predict(s, params, clf, cfg, bank) == s.label for s in series_list)
    return hits / len(series_list)


def _check_finite(loss, grads, epoch, step):
    if not math.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads):
        raise TrainingFailureError("non-finite loss or gradient", epoch=epoch, step=step, loss=loss)


# exp() of a log-parameter beyond this overflows double precision
_MAX_LOG_PARAM = 700.0


def _check_theta(theta, epoch, step):
    if not np.all(np.isfinite(theta)) or np.abs(theta).max() > _MAX_LOG_PARAM:
        raise TrainingFailureError("GP parameters diverged", epoch=epoch, step=step, theta=theta.tolist())


def _fit_marginal_likelihood(series_list, theta, cfg: TrainConfig, rng, history):
    """Per-series SGD on the negative log marginal likelihood (per observation)."""
    opt = NesterovSGD([theta], cfg.ml_learning_rate, cfg.momentum, cfg.clip_norm)
    for epoch in range(cfg.ml_epochs):
        total = 0.0
        for step, i in enumerate(rng.permutation(len(series_list))):
            s = series_list[i]
            params = GpParams.from_array(theta)
            n = len(s)
            loss = -log_marginal_likelihood(s, params) / n
            grad = -log_marginal_likelihood_grad(s, params) / n
            _check_finite(loss, [grad], epoch, step)
            opt.step([grad])
            _check_theta(theta, epoch, step)
            total += loss
        history.append(_row(epoch, "marginal_likelihood", total / max(len(series_list), 1), float("nan"), theta, opt.lr))


def _row(epoch, phase, loss, val_acc, theta, lr):
    return {
        "epoch": epoch,
        "phase": phase,
        "train_loss": loss,
        "val_acc": val_acc,
        "alpha": float(theta[0]),
        "beta": float(theta[1]),
        "gamma": float(theta[2]),
        "lr": lr,
    }


def train(dataset: Dataset, adapter_cfg: AdapterConfig, clf_spec: ClassifierSpec, train_cfg: TrainConfig):
    """Fit classifier weights and GP parameters one series at a time.

    Returns ``(artifacts, history)``; the artifacts are the snapshot with the
    best validation accuracy. ``history`` is a list of per-epoch dicts with
    keys :data:`HISTORY_FIELDS`.
    """
    if len(dataset) == 0:
        raise InvalidArgumentError("cannot train on an empty dataset")
    cfg = train_cfg
    adapter_cfg = adapter_cfg.replace(framework=cfg.framework)
    root = np.random.SeedSequence(int(cfg.seed))
    init_seq, order_seq, noise_seq = root.spawn(3)
    init_rng = np.random.default_rng(init_seq)
    order_rng = np.random.default_rng(order_seq)
    noise_rng = np.random.default_rng(noise_seq)

    train_idx, val_idx = split_indices(len(dataset), cfg.train_fraction, cfg.seed)
    train_series = [dataset.series[i] for i in train_idx]
    val_series = [dataset.series[i] for i in val_idx]

    init = GpParams(*cfg.init_params) if cfg.init_params is not None else default_gp_params(dataset)
    theta = init.to_array()
    bank = None
    if clf_spec.kind == "meg":
        scale = float(np.std(np.concatenate([s.values for s in dataset.series]))) or 1.0
        bank = make_meg_bank(adapter_cfg.d, clf_spec.meg_features, init_rng, scale=scale)
        clf = build_classifier("logreg", bank.M, dataset.n_classes, init_rng)
        clf.kind = "meg"
    else:
        clf = build_classifier(clf_spec.kind, adapter_cfg.d, dataset.n_classes, init_rng, clf_spec.hidden)

    history = []
    learn_gp = cfg.regime == "end_to_end"
    if cfg.regime == "two_stage":
        _fit_marginal_likelihood(train_series, theta, cfg, order_rng, history)

    params_list = clf.params + ([theta] if learn_gp else [])
    opt = NesterovSGD(params_list, cfg.learning_rate, cfg.momentum, cfg.clip_norm)
    plateau = max(1, cfg.early_stop_patience // 2)

    def snapshot():
        return clf.copy(), GpParams.from_array(theta)

    best_acc = -1.0
    best = snapshot()
    since_best = 0
    for epoch in range(cfg.epochs):
        total = 0.0
        for step, i in enumerate(order_rng.permutation(len(train_series))):
            s = train_series[i]
            params = GpParams.from_array(theta)
            if bank is not None:
                ctx = posterior_context(s, params, adapter_cfg)
                feats = meg_features(bank, ctx)
                loss, grads, feat_bar = loss_and_grads(clf, feats, s.label)
                if learn_gp:
                    grads = grads + [meg_features_grad(bank, ctx, feat_bar)]
            else:
                noise = None
                if adapter_cfg.framework == "uac":
                    noise = noise_rng.standard_normal((adapter_cfg.d, adapter_cfg.S))
                out = adapt_forward(s, params, adapter_cfg, noise)
                loss, grads, z_bar = loss_and_grads(clf, out.values, s.label)
                if learn_gp:
                    grads = grads + [adapt_backward(out, z_bar)]
            _check_finite(loss, grads, epoch, step)
            opt.step(grads)
            _check_theta(theta, epoch, step)
            total += loss
        val_acc = _accuracy(val_series, GpParams.from_array(theta), clf, adapter_cfg, bank)
        history.append(_row(epoch, "classifier", total / len(train_series), val_acc, theta, opt.lr))
        log.info("epoch %d loss %.4f val_acc %.4f", epoch, total / len(train_series), val_acc)
        if math.isnan(val_acc) or val_acc > best_acc:
            best_acc = val_acc
            best = snapshot()
            since_best = 0
        else:
            since_best += 1
            if since_best >= cfg.early_stop_patience:
                break
            if since_best % plateau == 0:
                opt.lr *= cfg.lr_decay

    best_clf, best_params = best
    return Artifacts(best_clf, best_params, adapter_cfg, bank), history

"""Approximation-error sweeps, timing runs and the classification grid."""

from __future__ import annotations

import statistics
import time
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from .adapter import AdapterConfig
from .exact_gp import ExactPosterior, TimeSeries
from .kernel import GpParams
from .krylov import block_lanczos_sqrt, lanczos_backprop
from .ski import SkiOperator, ski_cov_matvec, ski_cov_matvec_grad, ski_mean_grad, ski_posterior_mean
from .training import ClassifierSpec, Dataset, TrainConfig, evaluate, train
from .data import sample_prior

__all__ = [
    "ApproxErrorConfig",
    "approx_error_rows",
    "TimingConfig",
    "timing_rows",
    "GRID",
    "grid_rows",
    "random_instance",
]


@dataclass(frozen=True)
class ApproxErrorConfig:
    """Sample-error sweeps at fixed noise.

    Each length n gets its own series of n random times on ``[0, n / density]``
    (so the observation density is fixed and longer series span a longer
    window), randomly drawn hyperparameters, d = n evenly spaced reference
    times and one fixed standard-normal vector xi shared by every (m, k).
    """

    lengths: tuple = (1000, 2000, 3000)
    m_values: tuple = (64, 128, 256, 512, 1024)
    k_values: tuple = tuple(range(1, 21))
    m_fixed: int = 256
    k_fixed: int = 10
    density: float = 100.0
    seed: int = 0


def random_instance(n: int, T: float, rng, d: Optional[int] = None):
    """Prior draw at n uniform times on [0, T] with random hyperparameters.

    Length scale is log-uniform in [0.5, 2] time units, amplitude in
    [0.5, 2] and the noise variance in [0.01, 0.1] times the amplitude.
    """
    amplitude = float(np.exp(rng.uniform(np.log(0.5), np.log(2.0))))
    length = float(np.exp(rng.uniform(np.log(0.5), np.log(2.0))))
    noise = amplitude * float(np.exp(rng.uniform(np.log(0.01), np.log(0.1))))
    params = GpParams.from_natural(amplitude, 1.0 / (2 * length * length), noise)
    times = np.sort(rng.uniform(0.0, T, n))
    values = sample_prior(times, params, rng) + np.sqrt(noise) * rng.standard_normal(n)
    series = TimeSeries.from_unsorted(times, values)
    ref = np.linspace(0.0, T, n if d is None else d)
    return series, ref, params


def _ski_sample(series, ref, params, m, k, xi):
    op = SkiOperator(series, ref, m, params)
    mean = ski_posterior_mean(op)
    root_xi, _ = block_lanczos_sqrt(lambda q: ski_cov_matvec(op, None, q), xi[:, None], k, retain=False)
    return mean + root_xi[:, 0]


def approx_error_rows(cfg: ApproxErrorConfig, progress: Optional[Callable[[str], None]] = None):
    """Rows ``(sweep, n, m, k, error)`` with error ``||z_ski - z_exact||_2``."""
    rows = []
    for n in cfg.lengths:
        rng = np.random.default_rng(np.random.SeedSequence([int(cfg.seed), int(n)]))
        series, ref, params = random_instance(n, n / cfg.density, rng)
        xi = rng.standard_normal(ref.size)
        exact = ExactPosterior(series, ref, params).sample(xi)
        for m in cfg.m_values:
            err = float(np.linalg.norm(_ski_sample(series, ref, params, m, cfg.k_fixed, xi) - exact))
            rows.append(("m", n, m, cfg.k_fixed, err))
            if progress:
                progress(f"n={n} m={m} error={err:.4g}")
        for k in cfg.k_values:
            err = float(np.linalg.norm(_ski_sample(series, ref, params, cfg.m_fixed, k, xi) - exact))
            rows.append(("k", n, cfg.m_fixed, k, err))
            if progress:
                progress(f"n={n} k={k} error={err:.4g}")
    return rows


@dataclass(frozen=True)
class TimingConfig:
    """Wall-clock medians of one posterior sample and its gradient."""

    lengths: tuple = (500, 1000, 2000, 3000)
    m: int = 256
    k: int = 10
    reps: int = 5
    density: float = 100.0
    methods: tuple = ("exact", "lanczos", "exact-bp", "lanczos-bp")
    seed: int = 0


def _time_exact(series, ref, params, xi, backward):
    post = ExactPosterior(series, ref, params)
    z = post.sample(xi)
    if backward:
        up = np.ones_like(z)
        post.vjp(up, post.sqrt.sylvester_outer(up[:, None], xi[:, None]))


def _time_lanczos(series, ref, params, xi, m, k, backward):
    op = SkiOperator(series, ref, m, params)
    mean = ski_posterior_mean(op)
    root_xi, record = block_lanczos_sqrt(lambda q: ski_cov_matvec(op, None, q), xi[:, None], k, retain=backward)
    z = mean + root_xi[:, 0]
    if backward:
        up = np.ones_like(z)
        ski_mean_grad(op, None, up)
        lanczos_backprop(record, lambda q, q_bar: ski_cov_matvec_grad(op, None, q, q_bar), up[:, None])


def timing_rows(cfg: TimingConfig, progress: Optional[Callable[[str], None]] = None):
    """Rows ``(method, n, median_seconds)``, single-threaded BLAS/FFT."""
    rows = []
    with threadpool_limits(limits=1):
        for n in cfg.lengths:
            rng = np.random.default_rng(np.random.SeedSequence([int(cfg.seed), int(n)]))
            series, ref, params = random_instance(n, n / cfg.density, rng)
            xi = rng.standard_normal(ref.size)
            for method in cfg.methods:
                backward = method.endswith("-bp")
                if method.startswith("exact"):
                    run = lambda: _time_exact(series, ref, params, xi, backward)  # noqa: E731
                else:
                    run = lambda: _time_lanczos(series, ref, params, xi, cfg.m, cfg.k, backward)  # noqa: E731
                samples = []
                for _ in range(cfg.reps):
                    t0 = time.perf_counter()
                    run()
                    samples.append(time.perf_counter() - t0)
                med = statistics.median(samples)
                rows.append((method, n, med))
                if progress:
                    progress(f"{method} n={n} {med:.4g}s")
    return rows


# (classifier, framework, regime); MEG features ignore the framework
GRID = tuple(
    [(c, f, r) for c in ("logreg", "mlp", "convnet") for f in ("imp", "uac") for r in ("two_stage", "end_to_end")]
    + [("meg", "imp", "two_stage"), ("meg", "imp", "end_to_end")]
)


def grid_rows(
    train_set: Dataset,
    test_set: Dataset,
    adapter_cfg: AdapterConfig,
    train_cfg: TrainConfig,
    cells: Sequence = GRID,
    hidden: int = 256,
    meg_features: int = 1000,
    progress: Optional[Callable[[str], None]] = None,
):
    """Train and evaluate every (classifier, framework, regime) cell.

    Rows ``(classifier, framework, regime, test_accuracy, best_val_accuracy)``.
    """
    rows = []
    for kind, framework, regime in cells:
        cfg = TrainConfig(**{**train_cfg.__dict__, "framework": framework, "regime": regime})
        spec = ClassifierSpec(kind, hidden=hidden, meg_features=meg_features)
        artifacts, history = train(train_set, adapter_cfg, spec, cfg)
        vals = [h["val_acc"] for h in history if h["phase"] == "classifier"]
        best_val = max((v for v in vals if v == v), default=float("nan"))
        acc = evaluate(test_set, artifacts)["accuracy"]
        rows.append((kind, framework, regime, acc, best_val))
        if progress:
            progress(f"{kind} {framework} {regime}: test accuracy {acc:.4f}")
    return rows

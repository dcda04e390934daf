import numpy as np
import pytest

from gpadapter.adapter import AdapterConfig
from gpadapter.errors import InvalidArgumentError, TrainingFailureError
from gpadapter.exact_gp import TimeSeries
from gpadapter.kernel import GpParams
from gpadapter.models import build_classifier, classifier_to_dict
from gpadapter.training import (
    HISTORY_FIELDS,
    Artifacts,
    ClassifierSpec,
    Dataset,
    NesterovSGD,
    TrainConfig,
    default_gp_params,
    evaluate,
    predict,
    split_indices,
    train,
)

ADAPTER = AdapterConfig(T=1.0, d=16, m=32, k=4, S=3, mode="exact")


def separable(n, seed, points=15):
    """Two classes: +sin and -sin at irregular times."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        t = np.sort(rng.uniform(0, 1, points))
        sign = 1.0 if i % 2 == 0 else -1.0
        out.append(TimeSeries(t, sign * np.sin(2 * np.pi * t) + 0.1 * rng.standard_normal(points), i % 2))
    return Dataset(out, 1.0, 2)


def _flat(clf):
    return np.concatenate([p.ravel() for p in clf.params])


# ---------------------------------------------------------------- optimizer


def test_zero_momentum_is_plain_sgd(rng):
    p = rng.standard_normal(5)
    ref = p.copy()
    opt = NesterovSGD([p], lr=0.1, momentum=0.0)
    for _ in range(4):
        g = rng.standard_normal(5)
        opt.step([g])
        ref -= 0.1 * g
    np.testing.assert_allclose(p, ref, rtol=0, atol=1e-12)


def test_nesterov_update_by_hand():
    p = np.array([1.0])
    opt = NesterovSGD([p], lr=0.5, momentum=0.9)
    opt.step([np.array([2.0])])  # v = 2, p = 1 - 0.5 (2 + 1.8)
    assert p[0] == pytest.approx(1 - 0.5 * 3.8)
    opt.step([np.array([1.0])])  # v = 2.8, p -= 0.5 (1 + 2.52)
    assert p[0] == pytest.approx(1 - 0.5 * 3.8 - 0.5 * 3.52)


def test_gradient_clipping_scales_globally():
    a, b = np.zeros(1), np.zeros(1)
    opt = NesterovSGD([a, b], lr=1.0, momentum=0.0, clip_norm=1.0)
    opt.step([np.array([3.0]), np.array([4.0])])
    np.testing.assert_allclose([a[0], b[0]], [-0.6, -0.8])


# ---------------------------------------------------------------- helpers


def test_split_is_a_seeded_partition():
    tr, va = split_indices(10, 0.7, 3)
    assert len(tr) == 7 and len(va) == 3
    assert sorted(np.concatenate([tr, va]).tolist()) == list(range(10))
    np.testing.assert_array_equal(tr, split_indices(10, 0.7, 3)[0])


def test_dataset_validates_labels():
    with pytest.raises(InvalidArgumentError):
        Dataset([TimeSeries([0.0], [1.0], 2)], 1.0, 2)
    with pytest.raises(InvalidArgumentError):
        TrainConfig(train_fraction=0.5, val_fraction=0.3)


def test_default_params_track_data_scale():
    ds = separable(4, 0)
    p = default_gp_params(ds)
    var = np.var(np.concatenate([s.values for s in ds.series]))
    assert p.amplitude == pytest.approx(var) and p.noise == pytest.approx(0.1 * var)
    assert p.inv_length == pytest.approx(1 / (2 * 0.1**2))


# ---------------------------------------------------------------- training


def test_learns_separable_classes():
    tr, te = separable(60, 1), separable(40, 2)
    cfg = TrainConfig(epochs=10, framework="imp", seed=0, learning_rate=0.05)
    art, history = train(tr, ADAPTER, ClassifierSpec("logreg"), cfg)
    assert evaluate(tr, art)["accuracy"] >= 0.95
    assert evaluate(te, art)["accuracy"] >= 0.9
    assert set(history[0]) == set(HISTORY_FIELDS)


def test_zero_learning_rate_changes_nothing():
    ds = separable(10, 3)
    one, _ = train(ds, ADAPTER, ClassifierSpec("logreg"), TrainConfig(epochs=1, learning_rate=0.0))
    three, hist = train(ds, ADAPTER, ClassifierSpec("logreg"), TrainConfig(epochs=3, learning_rate=0.0))
    np.testing.assert_array_equal(_flat(one.classifier), _flat(three.classifier))
    np.testing.assert_array_equal(three.gp_params.to_array(), default_gp_params(ds).to_array())
    assert len({row["alpha"] for row in hist}) == 1


@pytest.mark.parametrize("framework", ["uac", "imp"])
def test_training_is_deterministic(framework):
    ds = separable(10, 4)
    cfg = TrainConfig(epochs=2, framework=framework, seed=7)
    a, ha = train(ds, ADAPTER.replace(mode="ski"), ClassifierSpec("mlp", hidden=8), cfg)
    b, hb = train(ds, ADAPTER.replace(mode="ski"), ClassifierSpec("mlp", hidden=8), cfg)
    assert classifier_to_dict(a.classifier) == classifier_to_dict(b.classifier)
    assert a.gp_params == b.gp_params and ha == hb


def test_two_stage_freezes_gp_in_classifier_phase():
    ds = separable(10, 5)
    cfg = TrainConfig(epochs=3, regime="two_stage", ml_epochs=2, seed=1)
    art, hist = train(ds, ADAPTER, ClassifierSpec("logreg"), cfg)
    phases = [row["phase"] for row in hist]
    assert phases == ["marginal_likelihood"] * 2 + ["classifier"] * 3
    clf_rows = [row for row in hist if row["phase"] == "classifier"]
    assert len({(r["alpha"], r["beta"], r["gamma"]) for r in clf_rows}) == 1
    assert art.gp_params.to_array().tolist() == [clf_rows[0][k] for k in ("alpha", "beta", "gamma")]
    assert (hist[0]["alpha"], hist[0]["beta"]) != (hist[1]["alpha"], hist[1]["beta"])


def test_end_to_end_moves_gp_parameters():
    ds = separable(10, 6)
    art, _ = train(ds, ADAPTER, ClassifierSpec("logreg"), TrainConfig(epochs=2, seed=2))
    assert not np.array_equal(art.gp_params.to_array(), default_gp_params(ds).to_array())


def test_returned_snapshot_has_best_validation_accuracy():
    ds = separable(20, 7)
    cfg = TrainConfig(epochs=6, seed=3, learning_rate=0.02, early_stop_patience=2)
    art, hist = train(ds, ADAPTER, ClassifierSpec("mlp", hidden=8), cfg)
    _, val_idx = split_indices(len(ds), cfg.train_fraction, cfg.seed)
    val = ds.subset(val_idx)
    assert evaluate(val, art)["accuracy"] == pytest.approx(max(r["val_acc"] for r in hist))
    # early stopping: at most patience epochs after the best one
    best_epoch = int(np.argmax([r["val_acc"] for r in hist]))
    assert len(hist) - 1 - best_epoch <= cfg.early_stop_patience


def test_meg_classifier_trains(rng):
    ds = separable(10, 8)
    art, hist = train(ds, ADAPTER, ClassifierSpec("meg", meg_features=40), TrainConfig(epochs=2, framework="imp"))
    assert art.bank is not None and art.bank.M == 40
    assert 0.0 <= evaluate(ds, art)["accuracy"] <= 1.0


def test_divergence_raises():
    ds = separable(6, 9)
    cfg = TrainConfig(epochs=3, learning_rate=1e300, clip_norm=None, framework="imp")
    with pytest.raises(TrainingFailureError):
        train(ds, ADAPTER, ClassifierSpec("logreg"), cfg)


def test_empty_dataset_rejected():
    with pytest.raises(InvalidArgumentError):
        train(Dataset([], 1.0, 2), ADAPTER, ClassifierSpec(), TrainConfig())


# ---------------------------------------------------------------- prediction and evaluation


def _zero_artifacts(n_classes=3, d=16):
    clf = build_classifier("logreg", d, n_classes, 0)
    clf.set_params([np.zeros_like(p) for p in clf.params])
    return Artifacts(clf, GpParams(0.0, 4.0, -2.0), ADAPTER.replace(d=d, framework="imp"))


def test_ties_go_to_lowest_class():
    art = _zero_artifacts()
    s = TimeSeries([0.1, 0.5], [1.0, -1.0])
    assert predict(s, art.gp_params, art.classifier, art.adapter_cfg) == 0


def test_prediction_ignores_samples_and_seed(rng):
    art, _ = train(separable(10, 10), ADAPTER, ClassifierSpec("logreg"), TrainConfig(epochs=1))
    s = separable(1, 11).series[0]
    base = predict(s, art.gp_params, art.classifier, art.adapter_cfg)
    for S, seed in ((1, 0), (20, 5), (7, 99)):
        cfg = art.adapter_cfg.replace(S=S, seed=seed, framework="uac")
        assert predict(s, art.gp_params, art.classifier, cfg) == base


def test_evaluate_counts_by_hand():
    art = _zero_artifacts()
    # every prediction is class 0 under zero weights
    labels = [0, 1, 2, 0, 0, 1, 2, 2, 0, 1]
    ds = Dataset([TimeSeries([0.2, 0.7], [0.5, -0.3], y) for y in labels], 1.0, 3)
    res = evaluate(ds, art)
    assert res["accuracy"] == pytest.approx(0.4)
    assert res["per_class_accuracy"] == [1.0, 0.0, 0.0]
    assert res["mean_loss"] == pytest.approx(np.log(3))
    assert res["n"] == 10


def test_evaluate_is_permutation_invariant():
    art, _ = train(separable(10, 12), ADAPTER, ClassifierSpec("logreg"), TrainConfig(epochs=1))
    ds = separable(12, 13)
    rev = Dataset(ds.series[::-1], ds.T, ds.n_classes)
    assert evaluate(ds, art) == evaluate(rev, art)
    with pytest.raises(InvalidArgumentError):
        evaluate(Dataset([], 1.0, 2), art)


def test_artifacts_round_trip(tmp_path):
    ds = separable(8, 14)
    art, _ = train(ds, ADAPTER, ClassifierSpec("meg", meg_features=10), TrainConfig(epochs=1, framework="imp"))
    art.save(tmp_path / "a.json")
    back = Artifacts.load(tmp_path / "a.json")
    assert back.gp_params == art.gp_params and back.adapter_cfg == art.adapter_cfg
    assert evaluate(ds, back) == evaluate(ds, art)
    (tmp_path / "bad.json").write_text('{"format": "other"}')
    with pytest.raises(InvalidArgumentError):
        Artifacts.load(tmp_path / "bad.json")

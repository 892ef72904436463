import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trispace.dpm import BoostedModel, HGBConfig, apply_bins, fit_bin_edges, fit_hgb, fuse


def test_fuse_identities(rng):
    A, S = rng.normal(size=(5, 24)), rng.normal(size=(5, 24))
    assert np.array_equal(fuse(A, S, 0.0), A)
    assert np.array_equal(fuse(A, np.zeros_like(A)), A)
    assert np.array_equal(fuse(A, A, 1.0), 2 * A)
    assert np.allclose(fuse(A, S), A + 0.1 * S)


def test_fuse_shape_mismatch():
    with pytest.raises(ValueError):
        fuse(np.zeros((3, 24)), np.zeros((3, 23)))


def test_constant_target_is_reproduced(rng):
    m = fit_hgb(rng.normal(size=(30, 3)), np.full(30, 4.25))
    assert np.all(m.predict(rng.normal(size=(7, 3))) == 4.25)
    assert m.trees == []


def step_data(n=100):
    x = np.linspace(-1, 1, n)
    return x[:, None], (x >= 0).astype(float)


def test_step_function_is_learned_quickly():
    X, y = step_data()
    m = fit_hgb(X, y, HGBConfig(n_rounds=50))
    assert np.mean((m.predict(X) - y) ** 2) < 1e-3


def test_training_predictions_match_history():
    X, y = step_data()
    m = fit_hgb(X, y, HGBConfig(n_rounds=30))
    assert np.mean((m.predict(X) - y) ** 2) == pytest.approx(m.history["train_mse"][len(m.trees)], rel=1e-12)


@settings(max_examples=15)
@given(st.integers(0, 10**6))
def test_training_error_never_increases(seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(80, 4))
    y = np.sin(X[:, 0]) + 0.3 * X[:, 1] ** 2 + rng.normal(0, 0.1, 80)
    m = fit_hgb(X, y, HGBConfig(n_rounds=40, max_depth=3))
    h = np.array(m.history["train_mse"])
    assert np.all(np.diff(h) <= 1e-12)
    assert all(t.depth() <= 3 for t in m.trees)
    assert all(np.isfinite(t.value).all() for t in m.trees)


def test_empty_ensemble_predicts_base(rng):
    m = fit_hgb(rng.normal(size=(10, 2)), rng.normal(size=10), HGBConfig(n_rounds=0))
    assert np.all(m.predict(rng.normal(size=(4, 2))) == m.base_score)


def test_first_stump_stays_within_label_range(rng):
    X = rng.normal(size=(50, 3))
    y = rng.uniform(2, 5, 50)
    m = fit_hgb(X, y, HGBConfig(n_rounds=1, max_depth=1, shrinkage=1.0, min_samples_leaf=1))
    p = m.predict(X)
    assert p.min() >= y.min() and p.max() <= y.max()


def test_width_mismatch_rejected(rng):
    m = fit_hgb(rng.normal(size=(10, 2)), rng.normal(size=10))
    with pytest.raises(ValueError):
        m.predict(rng.normal(size=(3, 3)))


@pytest.mark.parametrize("bad", [dict(max_bins=256), dict(max_bins=1), dict(shrinkage=0), dict(max_depth=0)])
def test_config_limits(bad):
    with pytest.raises(ValueError):
        HGBConfig(**bad)


def test_input_checks(rng):
    with pytest.raises(ValueError):
        fit_hgb(np.zeros((1, 2)), np.zeros(1))
    with pytest.raises(ValueError):
        fit_hgb(np.zeros((3, 2)), np.array([0.0, np.nan, 1.0]))


def test_constant_features_give_base_model(rng):
    m = fit_hgb(np.ones((20, 3)), rng.normal(size=20))
    assert all(t.feature[0] < 0 for t in m.trees)
    assert np.allclose(m.predict(np.ones((2, 3))), m.predict(np.ones((1, 3)))[0])


def test_bin_edges_are_increasing_and_capped(rng):
    X = np.column_stack([rng.normal(size=1000), rng.integers(0, 3, 1000)])
    edges = fit_bin_edges(X, max_bins=16)
    for e in edges:
        assert np.all(np.diff(e) > 0) and len(e) + 1 <= 16
    B = apply_bins(X, edges)
    assert B.min() >= 0 and B[:, 0].max() <= 15 and set(B[:, 1]) == {0, 1, 2}


def test_unseen_values_clamp_to_end_bins(rng):
    edges = fit_bin_edges(rng.uniform(0, 1, (50, 1)))
    B = apply_bins(np.array([[-100.0], [100.0]]), edges)
    assert B[0, 0] == 0 and B[1, 0] == len(edges[0])


def test_monotone_rebinning_keeps_predictions(rng):
    X = rng.normal(size=(60, 2))
    y = X[:, 0] - X[:, 1] ** 2
    m = fit_hgb(X, y, HGBConfig(n_rounds=20))
    # a strictly increasing map applied to inputs and edges alike keeps every bin membership
    f = lambda v: np.sinh(v) * 3 + 1  # noqa: E731
    moved = BoostedModel(m.base_score, m.shrinkage, [f(e) for e in m.bin_edges], m.trees, m.config)
    Xq = rng.normal(size=(40, 2))
    assert np.array_equal(moved.predict(f(Xq)), m.predict(Xq))


def test_validation_early_stopping_truncates(rng):
    X = rng.normal(size=(60, 2))
    y = rng.normal(size=60)
    Xv, yv = rng.normal(size=(30, 2)), rng.normal(size=30)
    m = fit_hgb(X, y, HGBConfig(n_rounds=200, patience=5), Xv, yv)
    best = m.history["best_round"]
    assert len(m.trees) == best
    assert m.history["val_mse"][best] == min(m.history["val_mse"])
    assert len(m.history["val_mse"]) <= best + 6


def test_determinism_and_round_trip(tmp_path, rng):
    X, y = rng.normal(size=(50, 4)), rng.normal(size=50)
    a = fit_hgb(X, y, HGBConfig(n_rounds=15))
    b = fit_hgb(X, y, HGBConfig(n_rounds=15))
    assert np.array_equal(a.predict(X), b.predict(X))
    a.label_norm = {"label_min": 100.0, "label_max": 300.0}
    a.save(tmp_path / "m.json")
    back = BoostedModel.load(tmp_path / "m.json")
    assert np.array_equal(back.predict(X), a.predict(X))
    norm, sec = back.predict_seconds(X)
    assert np.allclose(sec, norm * 200 + 100)


def test_unknown_model_format(tmp_path):
    with pytest.raises(ValueError):
        BoostedModel.from_dict({"format_version": 99})

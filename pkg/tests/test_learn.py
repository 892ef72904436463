import io

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from trispace.aem import AttributeScaler, attribute_embedding
from trispace.learn import (OptimState, TrainConfig, adam_step, backward, loss_embedding, loss_structure,
                            loss_structure_smooth, loss_total, row_cosines, shift_pairing, structure_weights,
                            train_tlm)
from trispace.tlm import TemporalEncoder, TLMConfig
from trispace.trajio import fit_normalizer, pad_and_mask


def test_identity_embedding_has_zero_loss(rng):
    X = rng.normal(size=(5, 4, 6))
    assert float(loss_embedding(X, X, shift_pairing(5, rng))) == pytest.approx(0.0, abs=1e-28)


def test_two_row_hand_value():
    X = np.array([[1.0, 0.0], [1.0, 0.0]])
    E = np.array([[2.0, 0.0], [0.0, 3.0]])  # cosines 1 and 0
    assert float(loss_embedding(E, X, [1, 0])) == pytest.approx(1.0)


@given(st.integers(1, 12), st.integers(0, 1000))
def test_embedding_loss_nonnegative_and_scale_free(n, seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, 3, 2))
    E = rng.normal(size=(n, 3, 2))
    assert float(loss_embedding(E, X, shift_pairing(n, rng))) >= 0
    scaled = X * rng.uniform(0.1, 5, (n, 1, 1))
    assert float(loss_embedding(scaled, X, shift_pairing(n, rng))) == pytest.approx(0.0, abs=1e-25)


def test_zero_norm_rows_have_zero_cosine():
    assert row_cosines(np.zeros((1, 3)), np.ones((1, 3))).tolist() == [0.0]


def test_shift_pairing_has_no_fixed_points(rng):
    for n in (2, 3, 17):
        p = shift_pairing(n, rng)
        assert sorted(p) == list(range(n)) and np.all(p != np.arange(n))


def test_embedding_loss_errors(rng):
    with pytest.raises(ValueError):
        loss_embedding(np.zeros((0, 2)), np.zeros((0, 2)), [])
    with pytest.raises(ValueError):
        loss_embedding(np.zeros((2, 2)), np.zeros((2, 3)), [1, 0])
    with pytest.raises(ValueError):
        loss_embedding(np.ones((2, 2)), np.ones((2, 2)), [0, 0])


def test_structure_loss_examples():
    assert float(loss_structure(np.ones((3, 4)), np.ones((3, 24)))) == 0.0
    E_S = np.array([[0.0, 0.0], [3.0, 4.0]])
    E_T = np.array([[1.0, 1.0], [2.0, 0.0]])
    assert float(loss_structure(E_T, E_S)) == pytest.approx((5 * 2 + 5 * 4) / 2)


def test_structure_loss_is_quadratic_and_permutation_invariant(rng):
    E_T, E_S = rng.normal(size=(6, 3, 2)), rng.normal(size=(6, 24))
    base = float(loss_structure(E_T, E_S))
    assert float(loss_structure(2.5 * E_T, E_S)) == pytest.approx(base * 6.25)
    p = rng.permutation(6)
    assert float(loss_structure(E_T[p], E_S[p])) == pytest.approx(base, rel=1e-12)


def test_structure_loss_mismatch():
    with pytest.raises(ValueError):
        loss_structure(np.ones((3, 2)), np.ones((4, 24)))


def test_structure_weights_are_row_distance_sums():
    w = structure_weights([[0.0, 0.0], [3.0, 4.0], [0.0, 0.0]])
    assert w.tolist() == pytest.approx([5.0, 10.0, 5.0])


def test_smooth_variant_vanishes_on_equal_rows(rng):
    assert float(loss_structure_smooth(np.ones((4, 3)), rng.normal(size=(4, 24)))) == pytest.approx(0, abs=1e-12)
    assert float(loss_structure_smooth(rng.normal(size=(4, 3)), rng.normal(size=(4, 24)))) > 0


def test_total_loss():
    assert loss_total(1.0, 2.0, 0.01) == pytest.approx(1.02)
    assert loss_total(0.7, 123.0, 0.0) == 0.7
    with pytest.raises(ValueError):
        loss_total(1.0, 1.0, -0.1)


def test_backward_scalar_square():
    x = torch.tensor(3.0, dtype=torch.float64, requires_grad=True)
    dead = torch.tensor([1.0, 2.0], dtype=torch.float64, requires_grad=True)
    g = backward(x**2, {"x": x, "dead": dead})
    assert float(g["x"]) == 6.0
    assert torch.equal(g["dead"], torch.zeros(2, dtype=torch.float64))


def test_backward_rejects_unrecorded_loss():
    with pytest.raises(ValueError):
        backward(torch.tensor(1.0), {})


def test_adam_zero_gradient_is_identity():
    p = {"w": torch.tensor([1.0, -2.0], dtype=torch.float64)}
    adam_step(p, {"w": torch.zeros(2, dtype=torch.float64)}, OptimState())
    assert p["w"].tolist() == [1.0, -2.0]


def test_adam_first_step_moves_by_lr():
    p = {"w": torch.zeros(1, dtype=torch.float64)}
    state = OptimState()
    adam_step(p, {"w": torch.ones(1, dtype=torch.float64)}, state)
    assert float(p["w"]) == pytest.approx(-1e-4 / (1 + 1e-8), rel=1e-12)
    assert state.step == 1


def test_adam_constant_gradient_steps_match_reference():
    p = {"w": torch.zeros(1, dtype=torch.float64)}
    state = OptimState(lr=0.1)
    m = v = 0.0
    want = 0.0
    for t in range(1, 6):
        g = 0.5
        m, v = 0.9 * m + 0.1 * g, 0.999 * v + 0.001 * g * g
        want -= 0.1 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
        adam_step(p, {"w": torch.full((1,), g, dtype=torch.float64)}, state)
        assert float(p["w"]) == pytest.approx(want, rel=1e-12)


def test_adam_rejects_bad_gradients():
    p = {"w": torch.zeros(2, dtype=torch.float64)}
    with pytest.raises(ValueError):
        adam_step(p, {"w": torch.tensor([1.0, float("nan")], dtype=torch.float64)}, OptimState())
    with pytest.raises(ValueError):
        adam_step(p, {"w": torch.zeros(3, dtype=torch.float64)}, OptimState())


# ---------------------------------------------------------------- training


@pytest.fixture(scope="module")
def tiny():
    from trispace.synthgen import SynthConfig, generate

    trajs = generate(SynthConfig(n_trajectories=24, length_mean=20, length_std=8, cap=40, seed=4))
    norm = fit_normalizer(trajs)
    tt = pad_and_mask(trajs, norm, cap=40)
    attr = attribute_embedding(trajs, cap=40).values
    attr = AttributeScaler.fit(attr).transform(attr)
    return tt.subset(np.arange(16)), attr[:16], tt.subset(np.arange(16, 24)), attr[16:]


def _train(tiny, **kw):
    tr, a_tr, va, a_va = tiny
    enc = TemporalEncoder(TLMConfig(n_state=4, d_inner=4, n_blocks=1, seed=0))
    cfg = TrainConfig(epochs=kw.pop("epochs", 5), k=5, batch_size=8, **kw)
    return enc, train_tlm(enc, tr, a_tr, va, a_va, cfg)


def test_zero_learning_rate_keeps_loss_constant(tiny):
    _, res = _train(tiny, lr=0.0)
    train = [h[1] for h in res.history]
    assert len(res.history) == 6 and all(x == train[0] for x in train)


def test_training_descends(tiny):
    _, res = _train(tiny, lr=1e-2, epochs=8)
    assert res.history[-1][1] <= res.history[0][1]


def test_training_is_deterministic(tiny):
    _, a = _train(tiny, lr=1e-3)
    _, b = _train(tiny, lr=1e-3)
    assert a.history == b.history


@pytest.mark.parametrize("kw", [dict(structure="smooth"), dict(graph_refresh="step"), dict(eta=0.0)])
def test_training_variants_run(tiny, kw):
    _, res = _train(tiny, lr=1e-3, epochs=2, **kw)
    assert all(np.isfinite(h[1]) for h in res.history)


def test_history_csv(tiny):
    _, res = _train(tiny, lr=1e-3, epochs=2)
    buf = io.StringIO()
    res.to_csv(buf)
    lines = buf.getvalue().splitlines()
    assert lines[0] == "epoch,train_lse,val_lse" and len(lines) == 4


def test_early_stopping(tiny):
    _, res = _train(tiny, lr=0.0, epochs=50, patience=3)
    assert res.stopped_early and len(res.history) == 4 and res.best_epoch == 0


def test_empty_training_split(tiny):
    tr = tiny[0].subset(np.arange(0))
    with pytest.raises(ValueError):
        train_tlm(TemporalEncoder(TLMConfig()), tr, np.zeros((0, 24)))

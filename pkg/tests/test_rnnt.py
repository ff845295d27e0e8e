"""Lattice loss: closed-form oracles, brute-force equivalence, invariants."""

import math

import numpy as np
import pytest

from gradmask import gradcheck, kernel
from gradmask.rnnt import (
    LogitLattice,
    consistency_gap,
    lattice_from_model,
    rnnt_loss,
    rnnt_loss_bruteforce,
)
from gradmask.seeds import substream
from gradmask.tensor import Graph, ShapeError, log_softmax


def uniform_lattice(T, U, K):
    return LogitLattice.from_values(np.full((T, U + 1, K + 1), -math.log(K + 1)))


def random_lattice(rng, T, U, K, scale=1.5):
    raw = rng.normal(size=(T, U + 1, K + 1)) * scale
    m = raw.max(axis=-1, keepdims=True)
    vals = raw - (m + np.log(np.exp(raw - m).sum(axis=-1, keepdims=True)))
    return LogitLattice.from_values(vals)


def test_single_frame_empty_target_is_ln3():
    res = rnnt_loss(uniform_lattice(1, 0, 2), [])
    assert res.loss == pytest.approx(math.log(3.0), rel=0, abs=1e-14)
    # the one and only path takes the terminal blank with certainty
    assert res.occupancy[0, 0, 2] == pytest.approx(1.0, abs=1e-14)
    assert res.grad_values[0, 0, 2] == pytest.approx(-1.0, abs=1e-14)


def test_two_frame_one_token_uniform_is_ln_27_over_2():
    lat = uniform_lattice(2, 1, 2)
    res = rnnt_loss(lat, [0])
    expect = math.log(27.0 / 2.0)
    assert res.loss == pytest.approx(expect, rel=0, abs=1e-13)
    assert rnnt_loss_bruteforce(lat, [0]) == pytest.approx(expect, rel=0, abs=1e-13)


def test_brute_force_equivalence_random_instances():
    rng = substream(0, "eval", 1)
    worst = 0.0
    for _ in range(60):
        T = int(rng.integers(1, 6))
        U = int(rng.integers(0, min(5, 12 - T) + 1))
        K = int(rng.integers(1, 5))
        lat = random_lattice(rng, T, U, K, scale=2.0)
        tgt = rng.integers(0, K, size=U)
        a = rnnt_loss(lat, tgt).loss
        b = rnnt_loss_bruteforce(lat, tgt)
        worst = max(worst, abs(a - b) / max(1.0, abs(b)))
    assert worst < 1e-10


def test_path_count_explicit():
    # T=3, U=2: C(4, 2)=6 alignments, each visiting T+U lattice entries
    lat = uniform_lattice(3, 2, 3)
    loss = rnnt_loss_bruteforce(lat, [0, 1])
    # 6 paths, each with probability (1/4)^5
    assert loss == pytest.approx(-math.log(6.0 * 0.25**5), abs=1e-12)


def test_gradients_match_finite_differences():
    failures = [r.line() for r in gradcheck.check_lattice_gradients(seed=3) if not r.passed]
    assert not failures, "\n".join(failures)


def test_occupancy_mass_and_antidiagonal_consistency():
    rng = substream(0, "eval", 2)
    for _ in range(20):
        T = int(rng.integers(1, 7))
        U = int(rng.integers(0, 5))
        K = int(rng.integers(1, 5))
        lat = random_lattice(rng, T, U, K)
        tgt = rng.integers(0, K, size=U)
        res = rnnt_loss(lat, tgt)
        # every alignment uses exactly T+U lattice entries
        assert res.occupancy.sum() == pytest.approx(T + U, rel=1e-11)
        # each antidiagonal is visited exactly once
        assert consistency_gap(res) < 1e-10
        # the terminal blank is always taken
        assert res.occupancy[T - 1, U, lat.blank] == pytest.approx(1.0, rel=1e-11)


def test_shift_invariance_of_unnormalized_lattice():
    rng = substream(0, "eval", 3)
    lat = random_lattice(rng, 4, 3, 3)
    tgt = np.array([0, 2, 1])
    base = rnnt_loss(lat, tgt).loss
    shifted = LogitLattice(np.ascontiguousarray(lat.values + 0.7))
    # each path gains (T+U) * 0.7 of log mass
    assert rnnt_loss(shifted, tgt).loss == pytest.approx(base - 7 * 0.7, rel=1e-12)


def test_extreme_logits_stay_finite():
    vals = np.full((3, 3, 4), -50.0)
    vals[:, :, 1] = 0.0  # one dominant symbol
    m = vals.max(axis=-1, keepdims=True)
    vals = vals - (m + np.log(np.exp(vals - m).sum(axis=-1, keepdims=True)))
    res = rnnt_loss(LogitLattice.from_values(vals), [1, 1])
    assert np.isfinite(res.loss)
    assert np.all(np.isfinite(res.grad_values))
    assert np.all(np.isfinite(res.grad_logits))


def test_backend_equivalence_bitwise():
    pure = pytest.importorskip("gradmask.kernel.pure")
    compiled = pytest.importorskip("gradmask.kernel._rnnt")
    rng = substream(0, "eval", 4)
    for _ in range(25):
        T = int(rng.integers(1, 8))
        U = int(rng.integers(0, 6))
        K = int(rng.integers(1, 6))
        lat = random_lattice(rng, T, U, K)
        tgt = rng.integers(0, K, size=U).astype(np.int64)
        l1, a1, b1 = pure.forward_backward(lat.values, tgt, lat.blank)
        l2, a2, b2 = compiled.forward_backward(lat.values, tgt, lat.blank)
        assert l1 == l2  # identical operation order -> identical bits
        assert np.asarray(a1).tobytes() == np.asarray(a2).tobytes()
        assert np.asarray(b1).tobytes() == np.asarray(b2).tobytes()


def test_active_backend_reported():
    assert kernel.BACKEND in ("cython", "pure")


def test_validation_rejects_unnormalized():
    with pytest.raises(ValueError, match="normalized"):
        LogitLattice.from_values(np.zeros((2, 2, 3)))


def test_validation_rejects_bad_targets():
    lat = uniform_lattice(2, 1, 2)
    with pytest.raises(ValueError, match="out of range"):
        rnnt_loss(lat, [5])
    with pytest.raises(ShapeError):
        rnnt_loss(lat, [0, 1])  # wrong length
    with pytest.raises(ShapeError):
        rnnt_loss(lat, [[0]])  # wrong rank


def test_validation_rejects_empty_lattice():
    with pytest.raises(ShapeError):
        LogitLattice.from_values(np.zeros((0, 1, 3)))


def test_brute_force_size_guard():
    lat = uniform_lattice(10, 4, 2)
    with pytest.raises(ValueError, match="enumerate"):
        rnnt_loss_bruteforce(lat, [0, 1, 0, 1])


def test_tape_integration_through_log_softmax():
    # raw logits -> tape log_softmax -> lattice; backward must reproduce
    # the analytic pre-softmax gradient
    rng = substream(0, "eval", 5)
    raw = rng.normal(size=(3, 3, 4))
    tgt = np.array([0, 2])
    g = Graph()
    logits = g.leaf(raw, requires_grad=True)
    values = log_softmax(logits, axis=-1)
    lat = LogitLattice.from_values(values.data, validate=True)
    lat.node = values
    res = rnnt_loss(lat, tgt)
    assert res.loss_node is not None
    g.backward(res.loss_node)
    assert np.allclose(logits.grad, res.grad_logits, rtol=0, atol=1e-13)


def test_lattice_from_model_matches_manual_joint():
    rng = substream(0, "eval", 6)
    T, U, D, Dp, H, K = 4, 2, 3, 3, 5, 3

    class Joint:
        pass

    g = Graph()
    j = Joint()
    h_enc = g.leaf(rng.normal(size=(T, D)), requires_grad=True)
    h_pred = g.leaf(rng.normal(size=(U + 1, Dp)), requires_grad=True)
    j.enc_proj = g.leaf(rng.normal(size=(D, H)), requires_grad=True)
    j.pred_proj = g.leaf(rng.normal(size=(Dp, H)), requires_grad=True)
    j.bias = g.leaf(rng.normal(size=H), requires_grad=True)
    j.out_w = g.leaf(rng.normal(size=(H, K + 1)), requires_grad=True)
    j.out_b = g.leaf(rng.normal(size=K + 1), requires_grad=True)
    lat = lattice_from_model(h_enc, h_pred, j)

    pre = h_enc.data @ j.enc_proj.data
    prd = h_pred.data @ j.pred_proj.data
    act = np.tanh(pre[:, None, :] + prd[None, :, :] + j.bias.data)
    logits = act @ j.out_w.data + j.out_b.data
    m = logits.max(axis=-1, keepdims=True)
    expect = logits - (m + np.log(np.exp(logits - m).sum(axis=-1, keepdims=True)))
    assert np.allclose(lat.values, expect, rtol=0, atol=1e-12)

    # slices are normalized by construction
    LogitLattice.from_values(lat.values, validate=True)

    # and gradients flow to every joint input
    tgt = np.array([1, 0])
    res = rnnt_loss(lat, tgt)
    g.backward(res.loss_node)
    for t in (h_enc, h_pred, j.enc_proj, j.pred_proj, j.bias, j.out_w, j.out_b):
        assert t.grad is not None and np.all(np.isfinite(t.grad))

"""Finite-difference verification of every analytic gradient.

Three suites, each returning `CheckResult` rows the CLI and the test suite
both consume:

* `check_tensor_ops` - every differentiable tape operator against central
  differences on small dense operands.
* `check_lattice_gradients` - the transducer loss gradient (both the
  log-probability view and the pre-softmax view) on random lattices.
* `check_model_gradients` - end-to-end through a small model in both
  forward modes, perturbing every parameter entry.

Operators that deliberately reshape gradient flow (stop-gradient, the
gradient gate) are not finite-differenceable and are covered by exact
semantic tests instead.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .masking import sample_mask
from .model import ModelDims, PseudoMasked, Supervised, build_model
from .rnnt import LogitLattice, lattice_from_model, rnnt_loss
from .seeds import substream
from . import tensor as tz

DEFAULT_STEP = 1e-6


@dataclass(frozen=True)
class CheckResult:
    """Outcome of one named gradient check."""

    name: str
    max_rel_err: float
    tol: float
    n_checks: int
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol

    def line(self) -> str:
        status = "ok " if self.passed else "FAIL"
        return (
            f"[{status}] {self.name}: max rel err {self.max_rel_err:.3e}"
            f" (tol {self.tol:g}, {self.n_checks} checks, {self.seconds:.2f}s)"
        )


def fd_gradient(f, x: np.ndarray, step: float = DEFAULT_STEP) -> np.ndarray:
    """Central-difference gradient of scalar `f` at `x`, entry by entry."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = grad.reshape(-1)
    xf = x.reshape(-1)
    for i in range(xf.size):
        orig = xf[i]
        xf[i] = orig + step
        hi = f(x)
        xf[i] = orig - step
        lo = f(x)
        xf[i] = orig
        flat[i] = (hi - lo) / (2.0 * step)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """Max abs difference over the max magnitude; absolute when both ~ 0."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    diff = float(np.abs(a - b).max()) if a.size else 0.0
    denom = max(float(np.abs(a).max()) if a.size else 0.0, float(np.abs(b).max()) if b.size else 0.0)
    if denom < 1e-10:
        return diff
    return diff / denom


# ---------------------------------------------------------------------------
# suite 1: tape operators


def _loss_through(build, weights: np.ndarray):
    """Scalar readout: sum(out * weights), making the pullback non-uniform."""

    def f(*arrays: np.ndarray) -> float:
        g = tz.Graph()
        leaves = [g.leaf(a, requires_grad=True) for a in arrays]
        out = build(g, *leaves)
        w = g.leaf(weights)
        return tz.sum_all(tz.mul_elementwise(out, w)).item()

    def analytic(*arrays: np.ndarray) -> list[np.ndarray]:
        g = tz.Graph()
        leaves = [g.leaf(a, requires_grad=True) for a in arrays]
        out = build(g, *leaves)
        w = g.leaf(weights)
        loss = tz.sum_all(tz.mul_elementwise(out, w))
        g.backward(loss)
        return [leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data) for leaf in leaves]

    return f, analytic


def check_tensor_ops(seed: int = 0, tol: float = 1e-6) -> list[CheckResult]:
    rng = substream(seed, "eval", 101)
    results = []

    def run(name, build, *arrays, out_shape):
        t0 = time.perf_counter()
        weights = rng.normal(size=out_shape)
        f, analytic = _loss_through(build, weights)
        grads = analytic(*arrays)
        worst = 0.0
        n = 0
        for i, a in enumerate(arrays):

            def fi(x, i=i):
                args = list(arrays)
                args[i] = x
                return f(*args)

            worst = max(worst, relative_error(grads[i], fd_gradient(fi, a.copy())))
            n += a.size
        results.append(CheckResult(name, worst, tol, n, time.perf_counter() - t0))

    n2 = lambda *s: rng.normal(size=s)

    run("matmul", lambda g, a, b: tz.matmul(a, b), n2(4, 5), n2(5, 3), out_shape=(4, 3))
    run("add", lambda g, a, b: tz.add(a, b), n2(3, 4), n2(3, 4), out_shape=(3, 4))
    run("add_bias", lambda g, a, b: tz.add_bias(a, b), n2(3, 2, 4), n2(4), out_shape=(3, 2, 4))
    run("mul_elementwise", lambda g, a, b: tz.mul_elementwise(a, b), n2(4, 4), n2(4, 4), out_shape=(4, 4))
    run("scale", lambda g, a: tz.scale(a, -1.7), n2(3, 3), out_shape=(3, 3))
    run("tanh", lambda g, a: tz.tanh(a), n2(4, 4), out_shape=(4, 4))
    run("relu", lambda g, a: tz.relu(a), n2(5, 5) + 0.05, out_shape=(5, 5))
    run("log_softmax", lambda g, a: tz.log_softmax(a, axis=-1), n2(4, 6), out_shape=(4, 6))
    run(
        "embed_lookup",
        lambda g, t: tz.embed_lookup(t, [0, 2, 2, 1]),
        n2(4, 3),
        out_shape=(4, 3),
    )
    run("concat_axis0", lambda g, a, b: tz.concat(a, b, axis=0), n2(2, 3), n2(4, 3), out_shape=(6, 3))
    run("concat_axis1", lambda g, a, b: tz.concat(a, b, axis=1), n2(3, 2), n2(3, 4), out_shape=(3, 6))
    run(
        "concat_rows",
        lambda g, a, b, c: tz.concat_rows([a, b, c]),
        n2(1, 4),
        n2(1, 4),
        n2(1, 4),
        out_shape=(3, 4),
    )
    run("slice_time", lambda g, a: tz.slice_time(a, 1, 4), n2(6, 3), out_shape=(3, 3))
    run("reshape", lambda g, a: tz.reshape(a, (2, 6)), n2(3, 4), out_shape=(2, 6))
    run("pairwise_sum", lambda g, a, b: tz.pairwise_sum(a, b), n2(3, 4), n2(2, 4), out_shape=(3, 2, 4))
    run("sum_all", lambda g, a: tz.reshape(tz.sum_all(a), (1,)), n2(4, 4), out_shape=(1,))
    run(
        "conv1d_same",
        lambda g, x, w, b: tz.conv1d_same(x, w, b),
        n2(6, 3),
        n2(5, 3, 4),
        n2(4),
        out_shape=(6, 4),
    )
    run(
        "replace_rows",
        lambda g, x, r: tz.replace_rows(x, np.array([True, False, True, False]), r),
        n2(4, 3),
        n2(3),
        out_shape=(4, 3),
    )
    return results


# ---------------------------------------------------------------------------
# suite 2: lattice loss


def check_lattice_gradients(n_instances: int = 20, seed: int = 0, tol: float = 1e-6) -> list[CheckResult]:
    rng = substream(seed, "eval", 102)
    t0 = time.perf_counter()
    worst_values = 0.0
    worst_logits = 0.0
    n = 0
    for _ in range(n_instances):
        T = int(rng.integers(1, 5))
        U = int(rng.integers(0, 4))
        K = int(rng.integers(1, 4))
        raw = rng.normal(size=(T, U + 1, K + 1)) * 1.5
        tgt = rng.integers(0, K, size=U)

        def norm(logits):
            m = logits.max(axis=-1, keepdims=True)
            return logits - (m + np.log(np.exp(logits - m).sum(axis=-1, keepdims=True)))

        values = norm(raw)
        res = rnnt_loss(LogitLattice.from_values(values), tgt)

        fd_v = fd_gradient(
            lambda v: rnnt_loss(LogitLattice(np.ascontiguousarray(v)), tgt).loss, values.copy()
        )
        worst_values = max(worst_values, relative_error(res.grad_values, fd_v))

        fd_l = fd_gradient(
            lambda l: rnnt_loss(LogitLattice(np.ascontiguousarray(norm(l))), tgt).loss, raw.copy()
        )
        worst_logits = max(worst_logits, relative_error(res.grad_logits, fd_l))
        n += raw.size
    dt = time.perf_counter() - t0
    return [
        CheckResult("lattice.grad_values", worst_values, tol, n, dt / 2),
        CheckResult("lattice.grad_logits", worst_logits, tol, n, dt / 2),
    ]


# ---------------------------------------------------------------------------
# suite 3: whole model


def _small_dims() -> ModelDims:
    return ModelDims(
        n_features=3,
        n_vocab=3,
        enc_dim=5,
        enc_layers=2,
        enc_kernel=3,
        emb_dim=4,
        pred_dim=5,
        joint_dim=4,
    )


def _frozen_rows_loss(model, feats, tgt, plan, keep, h_frozen) -> float:
    """Masked-mode loss with gate-blocked encoder rows pinned to `h_frozen`.

    The gradient gate computes the exact gradient of this function: blocked
    rows act as constants, kept rows stay live. Finite differences of the
    plain forward would instead measure the ungated gradient, which the
    gate intentionally discards.
    """
    g = tz.Graph()
    leaves = model._bind(g)
    x = g.leaf(feats)
    enc_in = tz.replace_rows(x, plan.mask, leaves["mask_emb"])
    h_raw = model._encode(g, leaves, enc_in)
    keep_mat = g.leaf(np.broadcast_to(keep[:, None], h_raw.data.shape).astype(np.float64).copy())
    block_mat = g.leaf(np.broadcast_to(~keep[:, None], h_raw.data.shape).astype(np.float64).copy())
    combined = tz.add(
        tz.mul_elementwise(h_raw, keep_mat),
        tz.mul_elementwise(g.leaf(h_frozen), block_mat),
    )
    h_pred = tz.stop_gradient(model._predict(g, leaves, tgt))
    lattice = lattice_from_model(combined, h_pred, model._joint_tensors(leaves))
    return rnnt_loss(lattice, tgt).loss


def check_model_gradients(
    n_instances: int = 20,
    seed: int = 0,
    tol: float = 1e-5,
    dims: ModelDims | None = None,
) -> list[CheckResult]:
    """Perturb every parameter entry of a small model in both modes.

    Supervised mode is compared against finite differences of the forward
    loss directly. Masked mode is compared against the function the gate
    and stop-gradient actually define: blocked encoder rows and the whole
    predictor are held constant while the checked parameter moves.
    """
    dims = dims or _small_dims()
    rng = substream(seed, "eval", 103)
    results = []
    stopped_worst = 0.0
    stopped_n = 0
    for mode_name in ("supervised", "pseudo_masked"):
        t0 = time.perf_counter()
        worst = 0.0
        n = 0
        for inst in range(n_instances):
            model = build_model(dims, seed, stream_extra=(200 + inst,))
            T = int(rng.integers(3, 7))
            U = int(rng.integers(1, 4))
            feats = rng.normal(size=(T, dims.n_features))
            tgt = rng.integers(0, dims.n_vocab, size=U)
            if mode_name == "supervised":
                mode = Supervised()
                keep = plan = h_frozen = None
            else:
                plan = sample_mask(T, 0.3, 2, rng)
                mode = PseudoMasked(plan=plan)
                keep = plan.mask.copy()

            res = model.forward(feats, tgt, mode)
            res.backward()
            grads = res.gradients()
            if mode_name == "pseudo_masked":
                h_frozen = res.h_enc.data.copy()

            for name in model.params:
                if mode_name == "pseudo_masked" and (name.startswith("pred.") or name == "tok_emb"):
                    stopped_worst = max(stopped_worst, float(np.abs(grads[name]).max()))
                    stopped_n += grads[name].size
                    continue

                def f(x, name=name):
                    saved = model.params[name]
                    model.params[name] = x
                    try:
                        if mode_name == "supervised":
                            return model.forward(feats, tgt, mode).loss
                        return _frozen_rows_loss(model, feats, tgt, plan, keep, h_frozen)
                    finally:
                        model.params[name] = saved

                fd = fd_gradient(f, model.params[name].copy())
                worst = max(worst, relative_error(grads[name], fd))
                n += fd.size
        results.append(
            CheckResult(f"model.{mode_name}", worst, tol, n, time.perf_counter() - t0)
        )
    # only an exact 0.0 may pass: the smallest positive float as tolerance
    results.append(
        CheckResult(
            "model.stop_gradient_zero",
            stopped_worst,
            float(np.nextafter(0.0, 1.0)),
            stopped_n,
            0.0,
        )
    )
    return results


def run_all(seed: int = 0, n_lattice: int = 20, n_model: int = 20) -> list[CheckResult]:
    out = []
    out += check_tensor_ops(seed=seed)
    out += check_lattice_gradients(n_instances=n_lattice, seed=seed)
    out += check_model_gradients(n_instances=n_model, seed=seed)
    return out

"""Transducer lattice loss -ln P(Y|X) with analytic gradients.

The lattice is a (T, U+1, K+1) grid of normalized log-probabilities; index
K (the last one) is the blank. An alignment takes exactly T blank moves
and U emit moves and terminates with the blank at (T-1, U). The dynamic
program runs in the log domain via `gradmask.kernel`; gradients come from
alpha/beta occupancies rather than from taping the recursion, which keeps
memory at O(T*U*K) and makes the formula itself testable. A brute-force
path enumeration is included as the test oracle.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from . import kernel
from .tensor import ShapeError, Tensor, attach_scalar

NORMALIZATION_TOL = 1e-9


@dataclass
class LogitLattice:
    """Normalized log-probabilities, shape (T, U+1, K+1); blank is index K.

    `node` is set when the lattice was built on a tape and carries the
    tensor whose backward edge the loss will feed.
    """

    values: np.ndarray
    node: Tensor | None = None

    @property
    def n_frames(self) -> int:
        return self.values.shape[0]

    @property
    def n_steps(self) -> int:
        return self.values.shape[1] - 1

    @property
    def n_vocab(self) -> int:
        return self.values.shape[2] - 1

    @property
    def blank(self) -> int:
        return self.values.shape[2] - 1

    @classmethod
    def from_values(cls, values, validate: bool = True) -> "LogitLattice":
        arr = np.ascontiguousarray(values, dtype=np.float64)
        if arr.ndim != 3:
            raise ShapeError(f"lattice must be (T, U+1, K+1), got {arr.shape}")
        if arr.shape[0] < 1:
            raise ShapeError("lattice needs at least one frame")
        if validate:
            m = arr.max(axis=2, keepdims=True)
            total = m[..., 0] + np.log(np.exp(arr - m).sum(axis=2))
            worst = float(np.abs(total).max())
            if not worst < NORMALIZATION_TOL:
                raise ValueError(
                    f"lattice slices are not normalized log-distributions (|logsumexp| up to {worst:.3g})"
                )
        return cls(arr)


@dataclass
class LatticeResult:
    """Loss with forward/backward variables and both gradient views.

    grad_values is d(loss)/d(log-prob entry) = -occupancy; grad_logits is
    d(loss)/d(pre-softmax logit). node_posterior[t, u] is the probability
    that an alignment drawn from the posterior visits grid state (t, u).
    """

    loss: float
    alpha: np.ndarray
    beta: np.ndarray
    occupancy: np.ndarray
    node_posterior: np.ndarray
    grad_values: np.ndarray
    grad_logits: np.ndarray
    loss_node: Tensor | None = None


def _check_targets(lattice: LogitLattice, targets: np.ndarray) -> None:
    if lattice.n_frames < 1:
        raise ShapeError("lattice needs at least one frame")
    if targets.ndim != 1:
        raise ShapeError(f"targets must be 1-D, got {targets.shape}")
    if len(targets) != lattice.n_steps:
        raise ShapeError(
            f"targets length {len(targets)} vs lattice steps {lattice.n_steps}"
        )
    if len(targets) and (targets.min() < 0 or targets.max() >= lattice.n_vocab):
        raise ValueError(
            f"target token out of range [0, {lattice.n_vocab}): {targets.tolist()}"
        )


def rnnt_loss(lattice: LogitLattice, targets) -> LatticeResult:
    """Exact -ln P(targets | lattice) with occupancy-based gradients.

    When the lattice carries a tape node, a scalar loss node is recorded so
    a later `Graph.backward` propagates -occupancy into the lattice values
    and onward through the network that produced them.
    """
    tgt = np.asarray(targets, dtype=np.int64)
    _check_targets(lattice, tgt)
    values = lattice.values
    T, U1, _ = values.shape
    U = U1 - 1
    blank = lattice.blank

    loss, alpha, beta = kernel.forward_backward(values, tgt, blank)
    log_lik = -loss

    bl = values[:, :, blank]
    occ_blank = np.zeros((T, U1))
    if T > 1:
        occ_blank[:-1, :] = np.exp(alpha[:-1, :] + bl[:-1, :] + beta[1:, :] - log_lik)
    occ_blank[T - 1, U] = np.exp(alpha[T - 1, U] + bl[T - 1, U] - log_lik)

    occupancy = np.zeros((T, U1, values.shape[2]))
    occupancy[:, :, blank] = occ_blank
    node_posterior = occ_blank.copy()
    if U:
        em = values[:, np.arange(U), tgt]
        occ_emit = np.exp(alpha[:, :U] + em + beta[:, 1:] - log_lik)
        occupancy[:, np.arange(U), tgt] += occ_emit
        node_posterior[:, :U] += occ_emit

    grad_values = -occupancy
    grad_logits = np.exp(values) * node_posterior[:, :, None] - occupancy

    loss_node = None
    if lattice.node is not None:
        loss_node = attach_scalar(lattice.node, loss, grad_values)

    return LatticeResult(
        loss=loss,
        alpha=alpha,
        beta=beta,
        occupancy=occupancy,
        node_posterior=node_posterior,
        grad_values=grad_values,
        grad_logits=grad_logits,
        loss_node=loss_node,
    )


BRUTE_FORCE_LIMIT = 12


def rnnt_loss_bruteforce(lattice: LogitLattice, targets) -> float:
    """Oracle: enumerate all C(T+U-1, U) alignments explicitly.

    Path probabilities are summed in the linear domain with compensated
    summation (math.fsum). Guarded to T+U <= 12.
    """
    tgt = np.asarray(targets, dtype=np.int64)
    _check_targets(lattice, tgt)
    values = lattice.values
    T = lattice.n_frames
    U = lattice.n_steps
    blank = lattice.blank
    if T + U > BRUTE_FORCE_LIMIT:
        raise ValueError(f"instance too large to enumerate: T+U = {T + U} > {BRUTE_FORCE_LIMIT}")

    probs = []
    for emit_slots in itertools.combinations(range(T - 1 + U), U):
        slots = set(emit_slots)
        t = u = 0
        lp = 0.0
        for i in range(T - 1 + U):
            if i in slots:
                lp += values[t, u, tgt[u]]
                u += 1
            else:
                lp += values[t, u, blank]
                t += 1
        lp += values[T - 1, U, blank]
        probs.append(math.exp(lp))
    return -math.log(math.fsum(probs))


def consistency_gap(result: LatticeResult) -> float:
    """Max deviation of per-antidiagonal alpha+beta marginals from ln P.

    Every alignment visits exactly one grid state per antidiagonal
    t + u = c, so logsumexp of alpha+beta over each antidiagonal must
    reproduce the total log-likelihood.
    """
    T, U1 = result.alpha.shape
    total = result.alpha + result.beta
    log_lik = -result.loss
    worst = 0.0
    for c in range(T + U1 - 1):
        t0 = max(0, c - U1 + 1)
        t1 = min(T - 1, c)
        cells = np.array([total[t, c - t] for t in range(t0, t1 + 1)])
        m = cells.max()
        lse = m + math.log(np.exp(cells - m).sum())
        worst = max(worst, abs(lse - log_lik))
    return worst


def lattice_from_model(h_enc: Tensor, h_pred: Tensor, joint) -> LogitLattice:
    """Joint-network lattice: log_softmax(W_out tanh(P_e h_enc + P_p h_pred + b)).

    `joint` carries the five bound parameter tensors (enc_proj, pred_proj,
    bias, out_w, out_b). Differentiable end-to-end through the tape.
    """
    from .tensor import add_bias, log_softmax, matmul, pairwise_sum, reshape
    from .tensor import tanh as tanh_op

    if h_enc.data.ndim != 2 or h_pred.data.ndim != 2:
        raise ShapeError(
            f"lattice_from_model expects (T,D) and (U+1,D'), got {h_enc.data.shape} and {h_pred.data.shape}"
        )
    T = h_enc.data.shape[0]
    U1 = h_pred.data.shape[0]
    H = joint.enc_proj.data.shape[1]
    K1 = joint.out_w.data.shape[1]

    enc_part = matmul(h_enc, joint.enc_proj)
    pred_part = matmul(h_pred, joint.pred_proj)
    pre = add_bias(pairwise_sum(enc_part, pred_part), joint.bias)
    act = tanh_op(pre)
    logits = add_bias(matmul(reshape(act, (T * U1, H)), joint.out_w), joint.out_b)
    values = log_softmax(reshape(logits, (T, U1, K1)), axis=-1)

    lattice = LogitLattice.from_values(values.data, validate=False)
    lattice.node = values
    return lattice

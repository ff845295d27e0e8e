"""Miniature transducer: conv encoder, RNN predictor, additive joint.

The model owns a flat dict of named float64 parameter arrays. Each forward
pass records a fresh tape (`tensor.Graph`) binding those arrays as leaves,
so one parameter set can serve many per-utterance graphs whose gradients
are then accumulated in a fixed order by the trainer.

Two forward modes:

* `Supervised` - the ordinary path: features -> encoder -> joint with the
  predictor run over the (possibly noisy) reference labels.
* `PseudoMasked` - the pseudo-label path: masked input frames are replaced
  by a learnt embedding, the encoder output gradient is gated so only
  masked frames train, and the predictor (with its token embedding) sits
  behind a stop-gradient. The loss itself is still the full-lattice
  transducer loss over the pseudo labels.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np

from .masking import MaskPlan
from .rnnt import LatticeResult, LogitLattice, lattice_from_model, rnnt_loss
from .seeds import substream
from .tensor import (
    Graph,
    ShapeError,
    Tensor,
    add,
    add_bias,
    concat_rows,
    conv1d_same,
    embed_lookup,
    gradient_gate,
    matmul,
    relu,
    replace_rows,
    slice_time,
    stop_gradient,
    tanh,
)

CHECKPOINT_MAGIC = b"GMTCKPT1"


@dataclass(frozen=True)
class ModelDims:
    """Architecture hyperparameters. The blank id is the last vocab index."""

    n_features: int = 8
    n_vocab: int = 16
    enc_dim: int = 48
    enc_layers: int = 3
    enc_kernel: int = 5
    emb_dim: int = 32
    pred_dim: int = 48
    joint_dim: int = 64

    def __post_init__(self):
        if self.enc_kernel % 2 != 1:
            raise ValueError(f"enc_kernel must be odd, got {self.enc_kernel}")
        for name in ("n_features", "n_vocab", "enc_dim", "enc_layers", "emb_dim", "pred_dim", "joint_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    @property
    def blank(self) -> int:
        return self.n_vocab

    @property
    def sos(self) -> int:
        """Start-of-sequence token for the predictor (shares the blank id)."""
        return self.n_vocab

    @property
    def receptive_halfwidth(self) -> int:
        """Frames of one-sided context the encoder sees at each output frame."""
        return self.enc_layers * (self.enc_kernel // 2)


@dataclass(frozen=True)
class Supervised:
    """Ordinary training mode: all gradients flow."""


@dataclass(frozen=True)
class PseudoMasked:
    """Pseudo-label training mode with input masking and gradient gating.

    `gate_polarity` selects which encoder frames keep their gradient:
    "masked" (the default) trains exactly the frames whose input was
    hidden; "visible" flips the gate to the complementary frames.
    """

    plan: MaskPlan
    gate_polarity: str = "masked"

    def __post_init__(self):
        if self.gate_polarity not in ("masked", "visible"):
            raise ValueError(f"gate_polarity must be 'masked' or 'visible', got {self.gate_polarity!r}")


ForwardMode = Supervised | PseudoMasked


class JointTensors(NamedTuple):
    enc_proj: Tensor
    pred_proj: Tensor
    bias: Tensor
    out_w: Tensor
    out_b: Tensor


@dataclass
class ForwardResult:
    """One recorded forward pass, ready for a single backward sweep."""

    graph: Graph
    mode: ForwardMode
    loss: float
    loss_node: Tensor
    leaves: dict[str, Tensor]
    lattice: LogitLattice
    lattice_result: LatticeResult
    enc_input: Tensor
    h_enc: Tensor
    h_pred: Tensor

    def backward(self, grad_scale: float = 1.0) -> None:
        self.graph.backward(self.loss_node, grad_scale)

    def gradients(self) -> dict[str, np.ndarray]:
        """Per-parameter gradients; parameters off the active path get zeros."""
        out = {}
        for name, leaf in self.leaves.items():
            out[name] = np.zeros_like(leaf.data) if leaf.grad is None else leaf.grad
        return out


def param_shapes(dims: ModelDims) -> dict[str, tuple[int, ...]]:
    """Deterministically ordered name -> shape census of all parameters."""
    shapes: dict[str, tuple[int, ...]] = {}
    cin = dims.n_features
    for i in range(dims.enc_layers):
        shapes[f"enc.{i}.w"] = (dims.enc_kernel, cin, dims.enc_dim)
        shapes[f"enc.{i}.b"] = (dims.enc_dim,)
        cin = dims.enc_dim
    shapes["tok_emb"] = (dims.n_vocab + 1, dims.emb_dim)
    shapes["pred.wx"] = (dims.emb_dim, dims.pred_dim)
    shapes["pred.wh"] = (dims.pred_dim, dims.pred_dim)
    shapes["pred.b"] = (dims.pred_dim,)
    shapes["joint.enc_w"] = (dims.enc_dim, dims.joint_dim)
    shapes["joint.pred_w"] = (dims.pred_dim, dims.joint_dim)
    shapes["joint.b"] = (dims.joint_dim,)
    shapes["joint.out_w"] = (dims.joint_dim, dims.n_vocab + 1)
    shapes["joint.out_b"] = (dims.n_vocab + 1,)
    shapes["mask_emb"] = (dims.n_features,)
    return shapes


MASK_EMB_INIT_STD = 0.1


def init_params(dims: ModelDims, seed: int, stream_extra: tuple[int, ...] = ()) -> dict[str, np.ndarray]:
    """Fan-in uniform weights, zero biases, small-normal mask embedding.

    Draws come from the named "init" substream in the fixed order of
    `param_shapes`, so initialization is reproducible and independent of
    every other random consumer.
    """
    rng = substream(seed, "init", *stream_extra)
    params: dict[str, np.ndarray] = {}
    for name, shape in param_shapes(dims).items():
        if name == "mask_emb":
            params[name] = rng.normal(0.0, MASK_EMB_INIT_STD, size=shape)
        elif name.endswith(".b") or name == "joint.out_b":
            params[name] = np.zeros(shape)
        else:
            if name.endswith(".w") and len(shape) == 3:
                fan_in = shape[0] * shape[1]
            else:
                fan_in = shape[0]
            bound = 1.0 / np.sqrt(fan_in)
            params[name] = rng.uniform(-bound, bound, size=shape)
    return params


class TransducerModel:
    """Parameter container plus the tape-recorded forward passes."""

    def __init__(self, dims: ModelDims, params: dict[str, np.ndarray]):
        expected = param_shapes(dims)
        if set(params) != set(expected):
            missing = sorted(set(expected) - set(params))
            extra = sorted(set(params) - set(expected))
            raise ValueError(f"parameter census mismatch: missing {missing}, unexpected {extra}")
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise ShapeError(f"parameter {name} has shape {params[name].shape}, expected {shape}")
        self.dims = dims
        self.params = {name: np.ascontiguousarray(params[name], dtype=np.float64) for name in expected}

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def copy(self) -> "TransducerModel":
        return TransducerModel(self.dims, {k: v.copy() for k, v in self.params.items()})

    # -- tape forward ------------------------------------------------------

    def _check_inputs(self, features: np.ndarray, targets: np.ndarray) -> None:
        if features.ndim != 2 or features.shape[1] != self.dims.n_features:
            raise ShapeError(
                f"features must be (T, {self.dims.n_features}), got {features.shape}"
            )
        if features.shape[0] < 1:
            raise ShapeError("features need at least one frame")
        if targets.ndim != 1:
            raise ShapeError(f"targets must be 1-D, got {targets.shape}")
        if len(targets) and (targets.min() < 0 or targets.max() >= self.dims.n_vocab):
            raise ValueError(f"target token out of range [0, {self.dims.n_vocab})")

    def _bind(self, g: Graph) -> dict[str, Tensor]:
        return {name: g.leaf(arr, requires_grad=True) for name, arr in self.params.items()}

    def _encode(self, g: Graph, leaves: dict[str, Tensor], x: Tensor) -> Tensor:
        h = x
        for i in range(self.dims.enc_layers):
            y = conv1d_same(h, leaves[f"enc.{i}.w"], leaves[f"enc.{i}.b"])
            if h.data.shape == y.data.shape:
                y = add(y, h)
            h = relu(y)
        return h

    def _predict(self, g: Graph, leaves: dict[str, Tensor], targets: np.ndarray) -> Tensor:
        tokens = np.concatenate([[self.dims.sos], targets]).astype(np.int64)
        emb = embed_lookup(leaves["tok_emb"], tokens)
        wx, wh, b = leaves["pred.wx"], leaves["pred.wh"], leaves["pred.b"]
        h_prev = g.leaf(np.zeros((1, self.dims.pred_dim)))
        rows = []
        for u in range(len(tokens)):
            e_u = slice_time(emb, u, u + 1)
            pre = add(matmul(e_u, wx), matmul(h_prev, wh))
            h_prev = tanh(add_bias(pre, b))
            rows.append(h_prev)
        return concat_rows(rows)

    def _joint_tensors(self, leaves: dict[str, Tensor]) -> JointTensors:
        return JointTensors(
            enc_proj=leaves["joint.enc_w"],
            pred_proj=leaves["joint.pred_w"],
            bias=leaves["joint.b"],
            out_w=leaves["joint.out_w"],
            out_b=leaves["joint.out_b"],
        )

    def forward(self, features, targets, mode: ForwardMode = Supervised()) -> ForwardResult:
        feats = np.ascontiguousarray(features, dtype=np.float64)
        tgt = np.asarray(targets, dtype=np.int64)
        self._check_inputs(feats, tgt)

        g = Graph()
        leaves = self._bind(g)
        x = g.leaf(feats)

        if isinstance(mode, Supervised):
            enc_input = x
            h_enc = self._encode(g, leaves, enc_input)
            h_joint_in = h_enc
            h_pred = self._predict(g, leaves, tgt)
        elif isinstance(mode, PseudoMasked):
            plan = mode.plan
            if plan.length != feats.shape[0]:
                raise ShapeError(
                    f"mask plan length {plan.length} vs {feats.shape[0]} frames"
                )
            enc_input = replace_rows(x, plan.mask, leaves["mask_emb"])
            # h_enc stays the encoder's own output so its .grad after
            # backward shows the gated gradient the encoder trains on;
            # the joint consumes the gate node.
            h_enc = self._encode(g, leaves, enc_input)
            keep = plan.mask if mode.gate_polarity == "masked" else ~plan.mask
            h_joint_in = gradient_gate(h_enc, keep)
            h_pred = stop_gradient(self._predict(g, leaves, tgt))
        else:
            raise TypeError(f"unknown forward mode: {mode!r}")

        lattice = lattice_from_model(h_joint_in, h_pred, self._joint_tensors(leaves))
        result = rnnt_loss(lattice, tgt)
        return ForwardResult(
            graph=g,
            mode=mode,
            loss=result.loss,
            loss_node=result.loss_node,
            leaves=leaves,
            lattice=lattice,
            lattice_result=result,
            enc_input=enc_input,
            h_enc=h_enc,
            h_pred=h_pred,
        )

    # -- plain-numpy inference path ---------------------------------------

    def infer_encode(self, features) -> np.ndarray:
        feats = np.ascontiguousarray(features, dtype=np.float64)
        if feats.ndim != 2 or feats.shape[1] != self.dims.n_features:
            raise ShapeError(f"features must be (T, {self.dims.n_features}), got {feats.shape}")
        h = feats
        k = self.dims.enc_kernel
        pad = k // 2
        for i in range(self.dims.enc_layers):
            w = self.params[f"enc.{i}.w"]
            b = self.params[f"enc.{i}.b"]
            T = h.shape[0]
            hp = np.zeros((T + 2 * pad, h.shape[1]))
            hp[pad : pad + T] = h
            y = np.tile(b, (T, 1))
            for j in range(k):
                y += hp[j : j + T] @ w[j]
            if y.shape == h.shape:
                y = y + h
            h = np.maximum(y, 0.0)
        return h

    def pred_start(self) -> np.ndarray:
        """Predictor state after consuming the start symbol."""
        return self.pred_step(np.zeros(self.dims.pred_dim), self.dims.sos)

    def pred_step(self, h_prev: np.ndarray, token: int) -> np.ndarray:
        e = self.params["tok_emb"][token]
        return np.tanh(e @ self.params["pred.wx"] + h_prev @ self.params["pred.wh"] + self.params["pred.b"])

    def joint_log_probs(self, h_enc_t: np.ndarray, h_pred_u: np.ndarray) -> np.ndarray:
        """Normalized log-probabilities over K+1 symbols for one grid state."""
        a = np.tanh(
            h_enc_t @ self.params["joint.enc_w"]
            + h_pred_u @ self.params["joint.pred_w"]
            + self.params["joint.b"]
        )
        logits = a @ self.params["joint.out_w"] + self.params["joint.out_b"]
        m = logits.max()
        return logits - (m + np.log(np.exp(logits - m).sum()))


def build_model(dims: ModelDims, seed: int, stream_extra: tuple[int, ...] = ()) -> TransducerModel:
    return TransducerModel(dims, init_params(dims, seed, stream_extra))


# ---------------------------------------------------------------------------
# checkpoint I/O: a bit-stable binary container
#
# layout: MAGIC | uint64-LE header length | canonical-JSON header |
#         concatenated little-endian float64 parameter buffers in header
#         name order. No timestamps anywhere, so identical models produce
#         identical files.


def _canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def save_checkpoint(path: str | os.PathLike, model: TransducerModel, extra: dict | None = None) -> None:
    """Atomically write the model (and a JSON-safe `extra` dict) to `path`."""
    names = list(model.params)
    header = {
        "dims": asdict(model.dims),
        "names": names,
        "shapes": {n: list(model.params[n].shape) for n in names},
        "extra": extra or {},
    }
    blob = _canonical_json(header)
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(len(blob).to_bytes(8, "little"))
        f.write(blob)
        for n in names:
            f.write(np.ascontiguousarray(model.params[n], dtype="<f8").tobytes())
    os.replace(tmp, path)


def load_checkpoint(path: str | os.PathLike) -> tuple[TransducerModel, dict]:
    """Read a checkpoint back; returns the model and its `extra` dict."""
    with open(path, "rb") as f:
        magic = f.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"not a checkpoint file: {os.fspath(path)}")
        (n_header,) = (int.from_bytes(f.read(8), "little"),)
        header = json.loads(f.read(n_header).decode("utf-8"))
        dims = ModelDims(**header["dims"])
        params = {}
        for name in header["names"]:
            shape = tuple(header["shapes"][name])
            count = int(np.prod(shape)) if shape else 1
            buf = f.read(8 * count)
            if len(buf) != 8 * count:
                raise ValueError(f"checkpoint truncated while reading {name}")
            params[name] = np.frombuffer(buf, dtype="<f8").reshape(shape).copy()
        trailing = f.read(1)
        if trailing:
            raise ValueError("checkpoint has trailing bytes")
    return TransducerModel(dims, params), header["extra"]

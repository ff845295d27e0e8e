"""Transducer model: mode semantics, exact gradient routing, checkpoints."""

import numpy as np
import pytest

from gradmask import gradcheck
from gradmask.masking import MaskPlan, sample_mask
from gradmask.model import (
    ModelDims,
    PseudoMasked,
    Supervised,
    build_model,
    init_params,
    load_checkpoint,
    param_shapes,
    save_checkpoint,
)
from gradmask.seeds import substream
from gradmask.tensor import ShapeError

SMALL = ModelDims(
    n_features=4, n_vocab=5, enc_dim=6, enc_layers=2, enc_kernel=3,
    emb_dim=4, pred_dim=6, joint_dim=5,
)


def small_model(seed=0):
    return build_model(SMALL, seed)


def plan_all(length, value: bool, span=2):
    mask = np.full(length, value, dtype=bool)
    starts = np.flatnonzero(mask) if value else np.array([], dtype=np.int64)
    return MaskPlan(length=length, span=span, starts=starts, mask=mask)


def test_default_dims_census():
    dims = ModelDims()
    assert dims.blank == 16
    assert dims.receptive_halfwidth == 6
    total = sum(int(np.prod(s)) for s in param_shapes(dims).values())
    assert total == 36857
    assert build_model(dims, 0).n_params == 36857


def test_init_is_deterministic_and_stream_isolated():
    p1 = init_params(SMALL, 42)
    p2 = init_params(SMALL, 42)
    for k in p1:
        assert p1[k].tobytes() == p2[k].tobytes()
    p3 = init_params(SMALL, 43)
    assert any(p1[k].tobytes() != p3[k].tobytes() for k in p1)
    # biases start at zero, mask embedding does not
    assert np.all(p1["pred.b"] == 0.0)
    assert np.any(p1["mask_emb"] != 0.0)


def test_supervised_forward_and_backward():
    model = small_model()
    rng = substream(0, "data")
    feats = rng.normal(size=(7, SMALL.n_features))
    tgt = np.array([0, 3, 1])
    res = model.forward(feats, tgt, Supervised())
    assert np.isfinite(res.loss) and res.loss > 0
    assert res.lattice.values.shape == (7, 4, SMALL.n_vocab + 1)
    res.backward()
    grads = res.gradients()
    assert set(grads) == set(model.params)
    for name in ("enc.0.w", "tok_emb", "pred.wx", "joint.out_w"):
        assert np.any(grads[name] != 0.0), name
    # the mask embedding is unused on the supervised path
    assert np.all(grads["mask_emb"] == 0.0)


def test_pseudo_masked_stops_predictor_exactly():
    model = small_model()
    rng = substream(1, "data")
    feats = rng.normal(size=(9, SMALL.n_features))
    tgt = np.array([2, 2, 4])
    plan = sample_mask(9, 0.3, 2, substream(1, "mask"))
    res = model.forward(feats, tgt, PseudoMasked(plan=plan))
    res.backward()
    grads = res.gradients()
    # predictor stack contributes exactly zero
    for name in ("tok_emb", "pred.wx", "pred.wh", "pred.b"):
        assert np.all(grads[name] == 0.0), name
        assert res.leaves[name].grad is None, name
    # encoder and joint still learn; so does the mask embedding
    for name in ("enc.0.w", "enc.1.w", "joint.out_w", "mask_emb"):
        assert np.any(grads[name] != 0.0), name


def test_masked_rows_carry_the_learnt_embedding():
    model = small_model()
    feats = substream(2, "data").normal(size=(6, SMALL.n_features))
    plan = sample_mask(6, 0.4, 2, substream(2, "mask"))
    res = model.forward(feats, [1], PseudoMasked(plan=plan))
    inp = res.enc_input.data
    assert np.array_equal(inp[plan.mask], np.tile(model.params["mask_emb"], (plan.n_masked, 1)))
    assert np.array_equal(inp[~plan.mask], feats[~plan.mask])


def test_empty_mask_gates_all_encoder_gradients_to_zero():
    # a plan that masks nothing: with gate polarity "masked" no encoder
    # frame may train, so conv and mask-embedding gradients are exactly zero
    model = small_model()
    feats = substream(3, "data").normal(size=(5, SMALL.n_features))
    res = model.forward(feats, [0, 1], PseudoMasked(plan=plan_all(5, False)))
    res.backward()
    grads = res.gradients()
    for name in ("enc.0.w", "enc.0.b", "enc.1.w", "enc.1.b", "mask_emb"):
        assert np.all(grads[name] == 0.0), name
    # the joint sits above the gate and still receives gradient
    assert np.any(grads["joint.out_w"] != 0.0)


def test_gate_polarity_visible_flips_the_gate():
    model = small_model()
    feats = substream(4, "data").normal(size=(5, SMALL.n_features))
    # nothing masked + visible polarity = every frame trains; the input is
    # untouched, so encoder gradients match the supervised path exactly
    res_vis = model.forward(feats, [2], PseudoMasked(plan=plan_all(5, False), gate_polarity="visible"))
    res_vis.backward()
    res_sup = model.forward(feats, [2], Supervised())
    res_sup.backward()
    g_vis, g_sup = res_vis.gradients(), res_sup.gradients()
    for name in ("enc.0.w", "enc.0.b", "enc.1.w", "enc.1.b"):
        assert np.array_equal(g_vis[name], g_sup[name]), name
    # predictor is still stopped in masked mode, unlike supervised
    assert np.all(g_vis["pred.wx"] == 0.0)
    assert np.any(g_sup["pred.wx"] != 0.0)


def test_full_mask_equals_ungated_masked_input():
    # everything masked + "masked" polarity = gate passes every frame
    model = small_model()
    feats = substream(5, "data").normal(size=(4, SMALL.n_features))
    plan = plan_all(4, True, span=1)
    res = model.forward(feats, [3], PseudoMasked(plan=plan))
    res.backward()
    grads = res.gradients()
    assert np.any(grads["mask_emb"] != 0.0)
    assert np.any(grads["enc.0.w"] != 0.0)


def test_infer_encode_matches_tape_forward():
    model = small_model()
    feats = substream(6, "data").normal(size=(8, SMALL.n_features))
    res = model.forward(feats, [0], Supervised())
    assert np.array_equal(model.infer_encode(feats), res.h_enc.data)


def test_infer_predictor_matches_tape_forward():
    model = small_model()
    tgt = np.array([1, 4, 0])
    res = model.forward(substream(7, "data").normal(size=(5, SMALL.n_features)), tgt, Supervised())
    h = model.pred_start()
    rows = [h]
    for tok in tgt:
        h = model.pred_step(h, int(tok))
        rows.append(h)
    assert np.allclose(np.stack(rows), res.h_pred.data, rtol=0, atol=1e-12)


def test_infer_joint_matches_lattice_values():
    model = small_model()
    feats = substream(8, "data").normal(size=(4, SMALL.n_features))
    tgt = np.array([2, 3])
    res = model.forward(feats, tgt, Supervised())
    h_enc = model.infer_encode(feats)
    h = model.pred_start()
    preds = [h]
    for tok in tgt:
        h = model.pred_step(h, int(tok))
        preds.append(h)
    for t in range(4):
        for u in range(3):
            lp = model.joint_log_probs(h_enc[t], preds[u])
            assert np.allclose(lp, res.lattice.values[t, u], rtol=0, atol=1e-10)


def test_model_gradients_match_finite_differences():
    failures = [
        r.line()
        for r in gradcheck.check_model_gradients(n_instances=4, seed=1)
        if not r.passed
    ]
    assert not failures, "\n".join(failures)


def test_checkpoint_round_trip_is_bitwise(tmp_path):
    model = small_model(3)
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, model, {"step": 17, "tag": "seed"})
    loaded, extra = load_checkpoint(path)
    assert extra == {"step": 17, "tag": "seed"}
    assert loaded.dims == model.dims
    for name in model.params:
        assert loaded.params[name].tobytes() == model.params[name].tobytes()


def test_checkpoint_files_are_byte_identical(tmp_path):
    model = small_model(4)
    p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(p1, model, {"step": 1})
    save_checkpoint(p2, model, {"step": 1})
    assert p1.read_bytes() == p2.read_bytes()


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"not a checkpoint at all")
    with pytest.raises(ValueError, match="not a checkpoint"):
        load_checkpoint(path)
    good = tmp_path / "good.ckpt"
    save_checkpoint(good, small_model(), {})
    truncated = tmp_path / "trunc.ckpt"
    truncated.write_bytes(good.read_bytes()[:-16])
    with pytest.raises(ValueError, match="truncated"):
        load_checkpoint(truncated)


def test_input_validation():
    model = small_model()
    with pytest.raises(ShapeError):
        model.forward(np.zeros((3, 2)), [0])  # wrong feature width
    with pytest.raises(ShapeError):
        model.forward(np.zeros((0, SMALL.n_features)), [0])
    with pytest.raises(ValueError, match="out of range"):
        model.forward(np.zeros((3, SMALL.n_features)), [99])
    plan = sample_mask(4, 0.2, 2, substream(0, "mask"))
    with pytest.raises(ShapeError, match="mask plan length"):
        model.forward(np.zeros((7, SMALL.n_features)), [0], PseudoMasked(plan=plan))
    with pytest.raises(ValueError, match="gate_polarity"):
        PseudoMasked(plan=plan, gate_polarity="sideways")
    with pytest.raises(ValueError):
        ModelDims(enc_kernel=4)
    with pytest.raises(ValueError):
        TransducerModelMissing = dict(init_params(SMALL, 0))
        TransducerModelMissing.pop("mask_emb")
        from gradmask.model import TransducerModel

        TransducerModel(SMALL, TransducerModelMissing)

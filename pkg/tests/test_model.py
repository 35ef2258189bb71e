"""Network-stage tests: pinned attention algebra, composition, checkpoints."""

from dataclasses import replace

import numpy as np
import pytest

from atfuse.autograd import Tensor
from atfuse.checkpoint import CheckpointError, load_checkpoint, save_checkpoint, stored_array_names
from atfuse.images import GrayImage, ImagePair
from atfuse.model import (AtfuseModel, AttentionBlockParams, FusionBlockParams,
                          ModelConfig, TokenGrid, aciim_forward, diim_forward,
                          feature_fusion, fuse_images, model_config_from_text,
                          model_config_to_text, patch_embed, shallow_extract)


def _t(arr, grad=True):
    return Tensor(np.asarray(arr, dtype=np.float32), requires_grad=grad)


def _grid(rng, s, d, h=None, w=None):
    h = h if h is not None else 1
    w = w if w is not None else s // h
    return TokenGrid(_t(rng.uniform(-1.0, 1.0, (s, d))), h, w)


def _attn(rng, d, hidden):
    u = lambda shape: _t(rng.uniform(-0.8, 0.8, shape))
    return AttentionBlockParams(
        wq=u((d, d)), bq=u((d,)), wk=u((d, d)), bk=u((d,)),
        wv=u((d, d)), bv=u((d,)), wo=u((d, d)), bo=u((d,)),
        ln_gain=_t(np.ones(d)), ln_shift=_t(np.zeros(d)),
        mlp_w1=u((d, hidden)), mlp_b1=u((hidden,)),
        mlp_w2=u((hidden, d)), mlp_b2=u((d,)),
    )


def _zero_attn(d, hidden):
    z = lambda shape: _t(np.zeros(shape))
    return AttentionBlockParams(
        wq=z((d, d)), bq=z((d,)), wk=z((d, d)), bk=z((d,)),
        wv=z((d, d)), bv=z((d,)), wo=z((d, d)), bo=z((d,)),
        ln_gain=_t(np.ones(d)), ln_shift=z((d,)),
        mlp_w1=z((d, hidden)), mlp_b1=z((hidden,)),
        mlp_w2=z((hidden, d)), mlp_b2=z((d,)),
    )


TINY = ModelConfig(shallow_channels=2, patch_size=4, embed_dim=4, mlp_hidden=8,
                   n_fusion_blocks=1, refine_blocks=1, seed=0)


# -- config text ---------------------------------------------------------------


def test_model_config_text_roundtrip():
    cfg = ModelConfig(shallow_channels=8, patch_size=2, embed_dim=16, mlp_hidden=32,
                      n_fusion_blocks=2, refine_blocks=1, seed=7, use_diim=False)
    assert model_config_from_text(model_config_to_text(cfg)) == cfg


def test_model_config_text_rejects_unknown_and_missing_keys():
    with pytest.raises(ValueError):
        model_config_from_text("bogus = 3\n")
    with pytest.raises(ValueError):
        model_config_from_text("embed_dim = 4\n")


def test_model_config_validates_positive_dims():
    with pytest.raises(ValueError):
        ModelConfig(embed_dim=0)


# -- stem and embedding -----------------------------------------------------------


def test_shallow_extract_output_shape():
    model = AtfuseModel(ModelConfig(shallow_channels=16, seed=1))
    out = shallow_extract(Tensor(np.zeros((1, 32, 32), np.float32)), model.extract_ir)
    assert out.shape == (16, 32, 32)


def test_shallow_extract_zero_weights_give_zero():
    model = AtfuseModel(TINY)
    stem = model.extract_ir
    stem.weight.data[...] = 0.0
    stem.bias.data[...] = 0.0
    rng = np.random.default_rng(2)
    out = shallow_extract(Tensor(rng.random((1, 8, 8)).astype(np.float32)), stem)
    assert np.allclose(out.data, 0.0)


def test_patch_embed_shapes():
    model = AtfuseModel(ModelConfig(shallow_channels=16, patch_size=4, embed_dim=32, seed=3))
    feat = Tensor(np.zeros((16, 32, 32), np.float32))
    grid = patch_embed(feat, model.embed_ir, 4)
    assert grid.tokens.shape == (64, 32)
    assert (grid.grid_h, grid.grid_w) == (8, 8)


def test_patch_embed_identity_at_patch_one():
    from atfuse.model import LinearParams

    rng = np.random.default_rng(4)
    feat = rng.random((3, 2, 2)).astype(np.float32)
    proj = LinearParams(_t(np.eye(3)), _t(np.zeros(3)))
    grid = patch_embed(Tensor(feat), proj, 1)
    # token (i, j) is the per-pixel feature vector at (i, j)
    assert np.allclose(grid.tokens.data.reshape(2, 2, 3), feat.transpose(1, 2, 0))


def test_patch_embed_indivisible_names_dims():
    from atfuse.model import LinearParams

    proj = LinearParams(_t(np.eye(3)), _t(np.zeros(3)))
    with pytest.raises(ValueError) as err:
        patch_embed(Tensor(np.zeros((3, 6, 8), np.float32)), proj, 4)
    msg = str(err.value)
    assert "6" in msg and "8" in msg and "4" in msg


# -- attention stages ----------------------------------------------------------------


def test_diim_single_token_discrepancy_collapses():
    rng = np.random.default_rng(5)
    params = _attn(rng, 4, 8)
    parts = {}
    diim_forward(_grid(rng, 1, 4), _grid(rng, 1, 4), params, parts=parts, tag="d")
    # softmax over one key makes CM == V, so V - CM vanishes identically
    assert np.allclose(parts["d.discrepancy"].data, 0.0, atol=1e-7)


def test_diim_single_token_zero_out_bias_residual_is_q():
    rng = np.random.default_rng(6)
    params = replace(_attn(rng, 4, 8), bo=_t(np.zeros(4)))
    q_src, kv_src = _grid(rng, 1, 4), _grid(rng, 1, 4)
    parts = {}
    diim_forward(q_src, kv_src, params, parts=parts, tag="d")
    q = q_src.tokens.data @ params.wq.data + params.bq.data
    assert np.allclose(parts["d.f_add"].data, q, atol=1e-6)


def test_diim_zero_projections_give_zero_output():
    rng = np.random.default_rng(7)
    out = diim_forward(_grid(rng, 4, 4), _grid(rng, 4, 4), _zero_attn(4, 8))
    assert np.allclose(out.tokens.data, 0.0)


def test_diim_differs_from_vanilla_cross_attention():
    rng = np.random.default_rng(8)
    params = _attn(rng, 8, 16)
    q_src, kv_src = _grid(rng, 4, 8), _grid(rng, 4, 8)
    modified = diim_forward(q_src, kv_src, params).tokens.data
    vanilla = aciim_forward(kv_src, q_src, params).tokens.data
    assert np.max(np.abs(modified - vanilla)) > 1e-3


def test_aciim_single_token_identity_out_projection():
    rng = np.random.default_rng(9)
    params = replace(_attn(rng, 4, 8), wo=_t(np.eye(4)), bo=_t(np.zeros(4)))
    q_src, kv_src = _grid(rng, 1, 4), _grid(rng, 1, 4)
    parts = {}
    aciim_forward(kv_src, q_src, params, parts=parts, tag="a")
    q = q_src.tokens.data @ params.wq.data + params.bq.data
    v = kv_src.tokens.data @ params.wv.data + params.bv.data
    assert np.allclose(parts["a.f_add"].data, v + q, atol=1e-6)


def test_aciim_zero_kv_is_pure_residual():
    rng = np.random.default_rng(10)
    params = _attn(rng, 4, 8)
    params = replace(params, wk=_t(np.zeros((4, 4))), bk=_t(np.zeros(4)),
                     wv=_t(np.zeros((4, 4))), bv=_t(np.zeros(4)), bo=_t(np.zeros(4)))
    q_src, kv_src = _grid(rng, 3, 4, 1, 3), _grid(rng, 3, 4, 1, 3)
    parts = {}
    aciim_forward(kv_src, q_src, params, parts=parts, tag="a")
    q = q_src.tokens.data @ params.wq.data + params.bq.data
    assert np.allclose(parts["a.f_add"].data, q, atol=1e-6)


def test_attention_rows_sum_to_one():
    rng = np.random.default_rng(11)
    params = _attn(rng, 8, 16)
    parts = {}
    diim_forward(_grid(rng, 6, 8, 2, 3), _grid(rng, 6, 8, 2, 3), params, parts=parts, tag="d")
    aciim_forward(_grid(rng, 6, 8, 2, 3), _grid(rng, 6, 8, 2, 3), params, parts=parts, tag="a")
    for key in ("d.attn", "a.attn"):
        rows = parts[key].data.sum(axis=1)
        assert np.max(np.abs(rows - 1.0)) < 1e-6


@pytest.mark.parametrize("stage", ["diim", "aciim"])
def test_permutation_consistency(stage):
    rng = np.random.default_rng(12)
    params = _attn(rng, 8, 16)
    a, b = _grid(rng, 6, 8, 2, 3), _grid(rng, 6, 8, 2, 3)
    perm = rng.permutation(6)
    a_p = TokenGrid(_t(a.tokens.data[perm]), 2, 3)
    b_p = TokenGrid(_t(b.tokens.data[perm]), 2, 3)
    if stage == "diim":
        base = diim_forward(a, b, params).tokens.data
        permuted = diim_forward(a_p, b_p, params).tokens.data
    else:
        base = aciim_forward(b, a, params).tokens.data
        permuted = aciim_forward(b_p, a_p, params).tokens.data
    assert np.max(np.abs(permuted - base[perm])) < 1e-5


# -- fusion block composition -----------------------------------------------------


def test_feature_fusion_zero_params_give_zero():
    rng = np.random.default_rng(13)
    block = FusionBlockParams(diim=_zero_attn(4, 8), aciim_vi=_zero_attn(4, 8),
                              aciim_ir=_zero_attn(4, 8))
    out = feature_fusion(_grid(rng, 4, 4, 2, 2), _grid(rng, 4, 4, 2, 2), [block])
    assert np.allclose(out.tokens.data, 0.0)


@pytest.mark.parametrize("seed", range(10))
def test_block_output_is_z3_plus_z1_exactly(seed):
    rng = np.random.default_rng(200 + seed)
    block = FusionBlockParams(diim=_attn(rng, 4, 8), aciim_vi=_attn(rng, 4, 8),
                              aciim_ir=_attn(rng, 4, 8))
    parts = {}
    out = feature_fusion(_grid(rng, 4, 4, 2, 2), _grid(rng, 4, 4, 2, 2), [block], parts=parts)
    z1 = parts["block0.z1"].data
    z3 = parts["block0.aciim_ir.out"].data
    assert np.array_equal(out.tokens.data, z3 + z1)


def test_multi_block_chains_running_grid():
    cfg = replace(TINY, n_fusion_blocks=2)
    model = AtfuseModel(cfg)
    rng = np.random.default_rng(14)
    ir = rng.random((8, 8)).astype(np.float32)
    vi = rng.random((8, 8)).astype(np.float32)
    parts = {}
    model.forward(ir, vi, parts=parts)
    assert "block1.out" in parts
    # the second block's discrepancy stage queries with block 0's output
    two = parts["block1.out"].data
    one = parts["block0.out"].data
    assert two.shape == one.shape and not np.allclose(two, one)


def test_no_diim_variant_runs_and_differs():
    rng = np.random.default_rng(15)
    ir = rng.random((8, 8)).astype(np.float32)
    vi = rng.random((8, 8)).astype(np.float32)
    full = AtfuseModel(TINY)
    bare = AtfuseModel(replace(TINY, use_diim=False))
    parts = {}
    out = bare.forward(ir, vi, parts=parts)
    assert not any(".diim." in k for k in parts)
    assert not any("diim" in n for n, _ in bare.named_parameters())
    assert not np.allclose(out.data, full.forward(ir, vi).data)


def test_no_aciim_variant_returns_discrepancy_stage():
    rng = np.random.default_rng(16)
    ir = rng.random((8, 8)).astype(np.float32)
    vi = rng.random((8, 8)).astype(np.float32)
    model = AtfuseModel(replace(TINY, use_aciim=False))
    parts = {}
    model.forward(ir, vi, parts=parts)
    assert np.array_equal(parts["block0.out"].data, parts["block0.z1"].data)
    assert not any("aciim" in n for n, _ in model.named_parameters())


# -- reconstruction and end-to-end -----------------------------------------------


def test_reconstruct_zero_head_gives_half_gray():
    model = AtfuseModel(TINY)
    model.head.weight.data[...] = 0.0
    model.head.bias.data[...] = 0.0
    rng = np.random.default_rng(17)
    out = model.forward(rng.random((8, 8)).astype(np.float32),
                        rng.random((8, 8)).astype(np.float32))
    assert np.allclose(out.data, 0.5)


def test_fuse_images_contract():
    rng = np.random.default_rng(18)
    model = AtfuseModel(TINY)
    pair = ImagePair(GrayImage(rng.random((16, 12), dtype=np.float32)),
                     GrayImage(rng.random((16, 12), dtype=np.float32)), name="t")
    out = fuse_images(model, pair)
    assert out.pixels.shape == (16, 12)
    assert out.pixels.min() >= 0.0 and out.pixels.max() <= 1.0
    again = fuse_images(model, pair)
    assert np.array_equal(out.pixels, again.pixels)


def test_forward_rejects_indivisible_with_remedy():
    model = AtfuseModel(TINY)
    with pytest.raises(ValueError) as err:
        model.forward(np.zeros((6, 8), np.float32), np.zeros((6, 8), np.float32))
    assert "pad or crop" in str(err.value)


def test_forward_rejects_mismatched_shapes():
    model = AtfuseModel(TINY)
    with pytest.raises(ValueError):
        model.forward(np.zeros((8, 8), np.float32), np.zeros((8, 12), np.float32))


def test_same_config_same_seed_identical_parameters():
    a = AtfuseModel(TINY)
    b = AtfuseModel(TINY)
    for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert na == nb
        assert np.array_equal(pa.data, pb.data)


def test_train_mode_updates_buffers_eval_does_not():
    rng = np.random.default_rng(19)
    model = AtfuseModel(TINY)
    ir = rng.random((8, 8)).astype(np.float32)
    vi = rng.random((8, 8)).astype(np.float32)
    before = model.extract_ir.running_mean.copy()
    model.forward(ir, vi, train=False)
    assert np.array_equal(model.extract_ir.running_mean, before)
    model.forward(ir, vi, train=True)
    assert not np.array_equal(model.extract_ir.running_mean, before)


# -- checkpoints -------------------------------------------------------------------


def test_checkpoint_roundtrip_bitwise(tmp_path):
    model = AtfuseModel(replace(TINY, seed=23))
    path = tmp_path / "m.ckpt"
    save_checkpoint(model, path)
    again = load_checkpoint(path)
    assert again.config == model.config
    want = dict(model.named_arrays())
    got = dict(again.named_arrays())
    assert sorted(want) == sorted(got)
    for name in want:
        assert np.array_equal(want[name], got[name]), name
    assert (tmp_path / "m.ckpt.cfg").exists()


def test_checkpoint_load_save_load_is_identity(tmp_path):
    model = AtfuseModel(TINY)
    p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(model, p1)
    save_checkpoint(load_checkpoint(p1), p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(AtfuseModel(TINY), path)
    blob = bytearray(path.read_bytes())
    blob[:7] = b"NOTFUSE"
    path.write_bytes(bytes(blob))
    with pytest.raises(CheckpointError) as err:
        load_checkpoint(path)
    assert "bad checkpoint magic" in str(err.value)


def test_checkpoint_truncation(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(AtfuseModel(TINY), path)
    blob = path.read_bytes()
    path.write_bytes(blob[: len(blob) - 9])
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_checkpoint_shape_vs_config_mismatch(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(AtfuseModel(replace(TINY, embed_dim=4)), path)
    blob = path.read_bytes()
    # same-length textual edit keeps the container framing valid
    assert blob.count(b"embed_dim = 4") == 1
    path.write_bytes(blob.replace(b"embed_dim = 4", b"embed_dim = 8"))
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_no_diim_checkpoint_lacks_diim_blobs(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(AtfuseModel(replace(TINY, use_diim=False)), path)
    names = stored_array_names(path)
    assert names and not any("diim" in n for n in names)

import numpy as np
import pytest

from comicmtl import tensor as T
from comicmtl.config import ConfigError, ModelConfig
from comicmtl.decoder import (
    DepthHead, MTLModel, SegHead, SkipFusion, Upsample, bilinear_matrix, predict,
)
from comicmtl.encoder import PatchMerging
from comicmtl.gradcheck import check_op, full_model_gradcheck, numeric_grad, rel_error
from comicmtl.tensor import Tensor

TINY = dict(patch_size=2, embed_dim=8, stage_depths=(1, 1, 1, 1), stage_heads=(1, 2, 2, 4),
            decoder_depths=(1, 1, 1, 1), window_size=2, num_classes=2)


def test_upsample_shape_and_gradient():
    rng = np.random.default_rng(0)
    up = Upsample(64, rng)
    assert up(Tensor(np.zeros((1, 4, 4, 64), np.float32))).shape == (1, 8, 8, 32)
    with T.check_mode():
        up = Upsample(8, rng).astype(np.float64)
        assert check_op(lambda x: up(x), [rng.standard_normal((1, 2, 2, 8))]) < 1e-3
    pm = PatchMerging(32, rng)
    x = Tensor(rng.standard_normal((1, 8, 8, 32)).astype(np.float32))
    assert Upsample(64, rng)(pm(x)).shape == x.shape


def test_skip_fusion_identity_and_gradients():
    rng = np.random.default_rng(1)
    with T.check_mode():
        fuse = SkipFusion(8, rng).astype(np.float64)
        fuse.proj.weight.data = np.vstack([np.eye(8), np.zeros((8, 8))])
        fuse.proj.bias.data[:] = 0
        dec = Tensor(rng.standard_normal((1, 4, 4, 8)))
        out = fuse(dec, Tensor(np.zeros((1, 4, 4, 8))))
        ref = T.layer_norm(dec, fuse.norm.weight, fuse.norm.bias)
        np.testing.assert_allclose(out.data, ref.data, rtol=1e-12)

        fuse = SkipFusion(8, rng).astype(np.float64)
        a = Tensor(rng.standard_normal((1, 4, 4, 8)), requires_grad=True)
        b = Tensor(rng.standard_normal((1, 4, 4, 8)), requires_grad=True)
        w = Tensor(rng.standard_normal((1, 4, 4, 8)))
        T.backward(T.sum_(fuse(a, b) * w))
        assert np.abs(a.grad).sum() > 0 and np.abs(b.grad).sum() > 0
    with pytest.raises(T.DimensionError):
        fuse(Tensor(np.zeros((1, 4, 4, 8))), Tensor(np.zeros((1, 2, 2, 8))))


def test_toy_decoder_output_and_mirroring():
    cfg = ModelConfig.toy()
    model = MTLModel(cfg)
    img = np.random.default_rng(0).random((1, 64, 64, 3)).astype(np.float32)
    pyr = model.encoder(img)
    trace = []
    with T.no_grad():
        out = model.seg_decoder(pyr, trace)
    assert out.shape == (1, 16, 16, 32)
    # decoder stage s sees what encoder stage 5 - s emitted
    assert [t.shape[1:] for t in trace] == pyr.shapes()[::-1]


def test_bilinear_rows_are_convex_combinations():
    m = bilinear_matrix(5, 4)
    assert m.shape == (20, 5)
    np.testing.assert_allclose(m.sum(1), 1.0)
    assert m.min() >= 0


def test_seg_head_laws():
    rng = np.random.default_rng(2)
    head = SegHead(8, 2, 4, rng)
    head.linear.weight.data[:] = 0
    g = Tensor(rng.standard_normal((1, 4, 4, 8)).astype(np.float32))
    probs = T.softmax(head(g, 16, 16), -1).data
    assert probs.shape == (1, 16, 16, 2)
    np.testing.assert_array_equal(probs, 0.5)
    head = SegHead(8, 5, 4, rng)
    logits = head(g, 16, 16).data
    np.testing.assert_allclose(T.softmax(Tensor(logits), -1).data.sum(-1), 1.0, atol=1e-6)
    np.testing.assert_array_equal(np.argmax(logits, -1), np.argmax(logits + 3.7, -1))
    with pytest.raises(ConfigError):
        SegHead(8, 1, 4, rng)


def test_depth_head_laws():
    rng = np.random.default_rng(3)
    head = DepthHead(8, 4, rng)
    g = Tensor(rng.standard_normal((1, 4, 4, 8)).astype(np.float32))
    out = head(g, 16, 16).data
    assert np.all((out > 0) & (out < 1))
    head.linear.weight.data[:] = 0
    np.testing.assert_array_equal(head(g, 16, 16).data, 0.5)
    z = np.linspace(-5, 5, 11)
    s = T.sigmoid(Tensor(z)).data
    assert np.all(np.diff(s) >= 0)


def test_forward_shapes_crop_and_finiteness():
    model = MTLModel(ModelConfig.toy())
    for seed in range(10):
        img = np.random.default_rng(seed).random((1, 70, 50, 3)).astype(np.float32)
        probs, depth = predict(model, img)
        assert probs.shape == (1, 70, 50, 4) and depth.shape == (1, 70, 50)
        assert np.isfinite(probs).all() and np.isfinite(depth).all()
        np.testing.assert_allclose(probs.sum(-1), 1.0, atol=1e-6)
        assert np.all((depth > 0) & (depth < 1))


def test_perturbation_routes_and_determinism():
    model = MTLModel(ModelConfig.toy())
    img = np.random.default_rng(0).random((1, 64, 64, 3)).astype(np.float32)
    p0, d0 = predict(model, img)
    p1, d1 = predict(model, img)
    assert p0.tobytes() == p1.tobytes() and d0.tobytes() == d1.tobytes()

    w = model.encoder.stages[0].blocks[0].mlp.fc1.weight
    orig = w.data.copy()
    w.data = orig + 0.05
    pe, de = predict(model, img)
    w.data = orig
    assert np.abs(pe - p0).max() > 0 and np.abs(de - d0).max() > 0

    # a random bump: a uniform one would be absorbed by the final LayerNorm
    w = model.seg_decoder.stages[3].blocks[0].mlp.fc2.weight
    orig = w.data.copy()
    w.data = orig + 0.5 * np.random.default_rng(1).standard_normal(orig.shape).astype(orig.dtype)
    ps, ds = predict(model, img)
    w.data = orig
    assert np.abs(ps - p0).max() > 1e-4 and ds.tobytes() == d0.tobytes()

    # deeper skip matters
    pyr = model.encoder(img)
    with T.no_grad():
        base = model.seg_decoder(pyr).data
        pyr.levels[2] = pyr.levels[2] + 0.1
        assert np.abs(model.seg_decoder(pyr).data - base).max() > 0


def test_decoders_share_no_parameters_and_encoder_feeds_both():
    model = MTLModel(ModelConfig.toy())
    seg = {id(p) for p in model.seg_decoder.parameters()}
    dep = {id(p) for p in model.depth_decoder.parameters()}
    assert not seg & dep
    img = np.random.default_rng(0).random((1, 64, 64, 3)).astype(np.float32)
    out = model(img)
    enc = model.encoder.parameters()
    g_seg = T.grad(T.mean(out.seg_logits), enc)
    g_dep = T.grad(T.mean(out.depth), enc)
    assert all(np.abs(g).sum() > 0 for g in g_seg[-5:])
    assert all(np.abs(g).sum() > 0 for g in g_dep[-5:])


def test_full_model_gradient_check():
    assert full_model_gradcheck(0) < 1e-2


def test_fan_in_init_rescales_the_same_draws():
    a = MTLModel(ModelConfig.toy(init="fixed"))
    b = MTLModel(ModelConfig.toy())
    pa, pb = dict(a.named_parameters()), dict(b.named_parameters())
    w = "encoder.stages.0.blocks.0.attn.q.weight"
    np.testing.assert_allclose(pb[w].data, pa[w].data / (0.02 * np.sqrt(32)), rtol=1e-6)
    # biases, norms and the position-bias table are untouched
    for name in ("encoder.stages.0.blocks.0.attn.q.bias", "encoder.stages.0.blocks.0.norm1.weight",
                 "encoder.stages.0.blocks.0.attn.rel_bias"):
        np.testing.assert_array_equal(pa[name].data, pb[name].data)
    assert ModelConfig.paper().init == "fixed"
    with pytest.raises(ConfigError):
        ModelConfig.toy(init="xavier")

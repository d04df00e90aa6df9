import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from comicmtl import tensor as T
from comicmtl.config import ConfigError, ModelConfig, pyramid_shapes
from comicmtl.encoder import (
    PatchEmbed, PatchMerging, SwinBlock, SwinEncoder, WindowAttention, build_shift_mask,
    cyclic_shift, cyclic_unshift, pad_images, padded_size, window_geometry,
    window_partition, window_reverse,
)
from comicmtl.gradcheck import check_op
from comicmtl.tensor import Tensor


def grid(rng, b=1, h=8, w=8, c=4):
    return Tensor(rng.standard_normal((b, h, w, c)).astype(np.float32))


def test_patch_embed_shapes():
    rng = np.random.default_rng(0)
    pe = PatchEmbed(4, 3, 32, rng)
    assert pe(np.zeros((1, 64, 64, 3), np.float32)).shape == (1, 16, 16, 32)
    pe = PatchEmbed(4, 3, 128, rng)
    assert pe(np.zeros((1, 224, 224, 3), np.float32)).shape == (1, 56, 56, 128)


def test_patch_embed_zero_image_tokens_identical():
    pe = PatchEmbed(4, 3, 8, np.random.default_rng(1))
    pe.proj.bias.data[:] = np.arange(8, dtype=np.float32)
    out = pe(np.zeros((1, 16, 16, 3), np.float32)).data.reshape(-1, 8)
    expected = T.layer_norm(Tensor(np.arange(8, dtype=np.float32)[None]),
                            pe.norm.weight, pe.norm.bias).data[0]
    np.testing.assert_allclose(out, np.broadcast_to(expected, out.shape), atol=1e-6)
    assert np.all(out == out[0])


def test_too_small_image_is_config_error():
    with pytest.raises(ConfigError):
        pad_images(np.zeros((1, 16, 64, 3)), ModelConfig.toy())


def test_padding_makes_every_stage_partitionable():
    cfg = ModelConfig.toy()
    for n in (32, 33, 50, 64, 70, 97):
        m = padded_size(n, cfg)
        assert m >= n and m % 32 == 0
        for h, _, _ in pyramid_shapes(cfg, m, m):
            assert h <= cfg.window_size or h % cfg.window_size == 0
    cfg = ModelConfig.paper(embed_dim=12)
    assert padded_size(224, cfg) == 224


def test_window_partition_small_case_and_index_formula():
    x = Tensor(np.arange(16, dtype=np.float32).reshape(1, 4, 4, 1))
    w = window_partition(x, 2, 2)
    assert w.shape == (1, 4, 4, 1)
    for r in range(4):
        for c in range(4):
            win = (r // 2) * 2 + c // 2
            off = (r % 2) * 2 + c % 2
            assert w.data[0, win, off, 0] == r * 4 + c


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from([(8, 8, 2), (8, 8, 4), (4, 12, 4), (6, 9, 3)]))
def test_partition_roundtrip_bit_exact(seed, dims):
    h, w, win = dims
    x = grid(np.random.default_rng(seed), 2, h, w, 3)
    back = window_reverse(window_partition(x, win, win), h, w, win, win)
    assert back.data.tobytes() == x.data.tobytes()


def test_cyclic_shift_cases():
    x = Tensor(np.arange(16, dtype=np.float32).reshape(1, 4, 4, 1))
    assert cyclic_shift(x, 0) is x
    y = cyclic_shift(x, 2)
    assert y.data[0, 2, 2, 0] == 0.0  # token (0,0) lands at (2,2)
    assert cyclic_unshift(y, 2).data.tobytes() == x.data.tobytes()


def test_shift_mask_cases():
    assert not build_shift_mask(8, 8, 4, 0).any()
    m = build_shift_mask(1, 4, 2, 0, wh=1, ww=2, sw=1)
    # windows [0,1] share a region; [2,3] straddle two regions
    assert m.shape == (2, 2, 2)
    assert not m[0].any()
    np.testing.assert_array_equal(m[1] != 0, [[False, True], [True, False]])
    full = build_shift_mask(8, 8, 4, 2)
    assert np.all(full == np.swapaxes(full, 1, 2))
    assert np.all(np.diagonal(full, axis1=1, axis2=2) == 0)


def test_masked_pairs_get_negligible_weight():
    rng = np.random.default_rng(0)
    attn = WindowAttention(8, 2, 4, rng)
    geo = window_geometry(8, 8, 4, True)
    mask = build_shift_mask(8, 8, 4, 2)
    wins = window_partition(grid(rng, 1, 8, 8, 8), 4, 4)
    _, weights = attn(wins, geo, mask, return_weights=True)
    w = weights.data[0]  # (nW, heads, N, N)
    masked = np.broadcast_to((mask != 0)[:, None], w.shape)
    assert w[masked].max() < 1e-30
    np.testing.assert_allclose(w.sum(-1), 1.0, atol=1e-6)
    assert w.min() >= 0


def test_attention_single_token_and_identical_keys():
    rng = np.random.default_rng(1)
    attn = WindowAttention(4, 2, 1, rng, rel_pos_bias=False)
    x = grid(rng, 1, 1, 1, 4).reshape(1, 1, 1, 4)
    geo = window_geometry(1, 1, 1, False)
    out = attn(x, geo)
    expected = attn.proj(attn.v(x))
    np.testing.assert_allclose(out.data, expected.data, rtol=1e-6)

    attn = WindowAttention(4, 2, 2, rng, rel_pos_bias=False)
    same = Tensor(np.tile(rng.standard_normal(4).astype(np.float32), (1, 1, 4, 1)))
    _, w = attn(same, window_geometry(2, 2, 2, False), return_weights=True)
    np.testing.assert_allclose(w.data, 0.25, atol=1e-7)


def test_attention_closed_form_two_tokens():
    rng = np.random.default_rng(2)
    attn = WindowAttention(2, 1, 1, rng, rel_pos_bias=False)
    for lin in (attn.q, attn.k, attn.v, attn.proj):
        lin.weight.data[:] = np.eye(2, dtype=np.float32)
    x = np.array([[1.0, 0.5], [-0.3, 2.0]], dtype=np.float32)
    _, w = attn(Tensor(x[None, None]), window_geometry(1, 2, 1, False), return_weights=True)
    logits = x @ x.T / np.sqrt(2)
    expected = np.exp(logits) / np.exp(logits).sum(1, keepdims=True)
    np.testing.assert_allclose(w.data[0, 0, 0], expected, rtol=1e-6)


def test_block_identity_with_zero_output_projections():
    rng = np.random.default_rng(3)
    blk = SwinBlock(32, 4, 4, rng)
    blk.attn.proj.weight.data[:] = 0
    blk.mlp.fc2.weight.data[:] = 0
    x = grid(rng, 1, 8, 8, 32)
    for shifted in (False, True):
        out = blk(x, shifted=shifted)
        assert out.shape == x.shape
        np.testing.assert_array_equal(out.data, x.data)


def test_shift_zero_equals_regular_block():
    from comicmtl.encoder import WindowGeometry
    rng = np.random.default_rng(4)
    blk = SwinBlock(8, 2, 4, rng)
    x = grid(rng, 1, 8, 8, 8)
    a = blk(x, shifted=False)
    b = blk(x, geo=WindowGeometry(4, 4, 0, 0), shifted=True)
    assert np.max(np.abs(a.data - b.data)) < 1e-9


def _jacobian_pattern(blocks, h, w, c, rng):
    with T.check_mode():
        for b in blocks:
            b[0].astype(np.float64)
        x = Tensor(rng.standard_normal((1, h, w, c)), requires_grad=True)
        y = x
        for blk, shifted in blocks:
            y = blk(y, shifted=shifted)
        dep = np.zeros((h * w, h * w), bool)
        for i in range(h * w):
            x.grad = None
            sel = np.zeros((1, h, w, c))
            sel.reshape(h * w, c)[i] = 1.0
            T.backward(T.sum_(y * Tensor(sel)))
            dep[i] = np.abs(x.grad.reshape(h * w, c)).sum(-1) > 0
    return dep


def test_receptive_field_grows_with_shifted_block():
    rng = np.random.default_rng(5)
    win, c = 4, 4
    regular = SwinBlock(c, 1, win, rng)
    shifted = SwinBlock(c, 1, win, rng)
    n = 4 * win
    one = _jacobian_pattern([(regular, False)], 1, n, c, rng)
    two = _jacobian_pattern([(regular, False), (shifted, True)], 1, n, c, rng)
    # token 3 (window 0) and token 4 (window 1) are adjacent across a window edge
    assert not one[3, 4] and not one[4, 3]
    assert two[4, 3] or two[3, 4]
    # within a regular window everything already interacts
    assert one[0, 3]


def test_patch_merging_shape_and_equivariance():
    rng = np.random.default_rng(6)
    pm = PatchMerging(32, rng)
    x = grid(rng, 1, 8, 8, 32)
    assert pm(x).shape == (1, 4, 4, 64)
    a = pm(T.roll(x, (2, 2), (1, 2))).data
    b = T.roll(pm(x), (1, 1), (1, 2)).data
    np.testing.assert_allclose(a, b, rtol=1e-6, atol=1e-6)


def test_patch_merging_gradient():
    rng = np.random.default_rng(7)
    with T.check_mode():
        pm = PatchMerging(3, rng).astype(np.float64)
        err = check_op(lambda x: pm(x), [rng.standard_normal((1, 4, 4, 3))])
    assert err < 1e-3


def test_encoder_toy_pyramid():
    cfg = ModelConfig.toy()
    enc = SwinEncoder(cfg, np.random.default_rng(0))
    pyr = enc(np.random.default_rng(1).random((1, 64, 64, 3)).astype(np.float32))
    assert pyr.shapes() == [(16, 16, 32), (8, 8, 64), (4, 4, 128), (2, 2, 256)]


def test_paper_preset_counts():
    cfg = ModelConfig.paper()
    assert cfg.stage_depths == (2, 2, 18, 2) and sum(cfg.stage_depths) == 24
    assert cfg.stage_heads == (6, 12, 24, 48)
    assert cfg.window_size == 7 and cfg.window_size // 2 == 3
    assert cfg.decoder_heads == (48, 24, 12, 6) and sum(cfg.decoder_depths) == 8


def test_head_divisibility_is_config_error():
    with pytest.raises(ConfigError):
        ModelConfig.paper(embed_dim=128)
    with pytest.raises(ConfigError):
        WindowAttention(10, 3, 4, np.random.default_rng(0))


def test_encoder_finite_over_seeds():
    cfg = ModelConfig.toy()
    enc = SwinEncoder(cfg, np.random.default_rng(0))
    with T.no_grad():
        for seed in range(10):
            img = np.random.default_rng(seed).random((1, 64, 64, 3)).astype(np.float32)
            assert all(np.isfinite(l.data).all() for l in enc(img).levels)

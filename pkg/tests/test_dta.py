import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from comicmtl import tensor as T
from comicmtl.dta import (
    Domain, DomainTransfer, MultiHeadDTA, TokenBatch, dta_attention, token_adv_loss,
    transferability,
)
from comicmtl.encoder import DTAContext, SwinBlock
from comicmtl.gradcheck import check_op
from comicmtl.tensor import ContractError, DimensionError, Tensor


def rand(rng, *shape):
    return Tensor(rng.standard_normal(shape))


def zero_disc(dt: DomainTransfer):
    for p in dt.disc.parameters():
        p.data[...] = 0


def test_zero_discriminator_is_half():
    dt = DomainTransfer(8, 16, np.random.default_rng(0))
    zero_disc(dt)
    p = dt.d_token(TokenBatch(rand(np.random.default_rng(1), 5, 8), Domain.COMICS))
    np.testing.assert_array_equal(p.data, 0.5)


def test_discriminator_range_and_width_check():
    dt = DomainTransfer(8, 16, np.random.default_rng(0))
    for seed in range(100):
        p = dt.d_token(TokenBatch(T.scale(rand(np.random.default_rng(seed), 4, 8), 10.0),
                                  Domain.REAL)).data
        assert np.all((p > 0) & (p < 1))
    with pytest.raises(DimensionError):
        dt.d_token(TokenBatch(rand(np.random.default_rng(0), 4, 7), Domain.REAL))


def _clouds(rng, n=64, d=8):
    shift = np.zeros(d)
    shift[0] = 3.0
    comics = rng.standard_normal((n, d)) + shift
    real = rng.standard_normal((n, d)) - shift
    return comics.astype(np.float32), real.astype(np.float32)


def _sgd(params, lr):
    for p in params:
        if p.grad is not None:
            p.data -= lr * p.grad
            p.grad = None


def test_discriminator_learns_separable_clouds():
    rng = np.random.default_rng(0)
    dt = DomainTransfer(8, 16, rng)
    comics, real = _clouds(rng)
    x = Tensor(np.concatenate([comics, real]))
    y = np.concatenate([np.ones(len(comics)), np.zeros(len(real))])
    for _ in range(200):
        T.backward(T.bce_with_logits(dt.disc.logits(x), y))
        _sgd(dt.disc.parameters(), 0.5)
    acc = ((dt.d_token(TokenBatch(x, Domain.COMICS)).data > 0.5) == y).mean()
    assert acc > 0.95


def test_generator_identity_init_shape_and_tag():
    dt = DomainTransfer(32, 16, np.random.default_rng(0))
    x = rand(np.random.default_rng(1), 7, 32)
    out = dt.g_f(TokenBatch(x, Domain.REAL))
    assert out.domain is Domain.FAKE_COMICS and out.tokens.shape == (7, 32)
    np.testing.assert_array_equal(out.tokens.data, x.data)
    with pytest.raises(ContractError):
        dt.g_f(TokenBatch(x, Domain.COMICS))


def test_generator_gradient():
    rng = np.random.default_rng(2)
    with T.check_mode():
        dt = DomainTransfer(4, 4, rng).astype(np.float64)
        dt.gen.mlp.fc2.weight.data[:] = rng.standard_normal((4, 4))
        err = check_op(lambda x: dt.g_f(TokenBatch(x, Domain.REAL)).tokens,
                       [rng.standard_normal((3, 4))])
    assert err < 1e-3


def test_transferability_values():
    assert transferability(np.array([0.5]))[0] == 1.0
    assert transferability(np.array([0.0, 1.0])).max() < 1e-5
    assert abs(transferability(np.array([0.25]))[0] - 0.8112781244591328) < 1e-6
    # closed form oracle
    p = 0.25
    assert abs(-(p * math.log2(p) + (1 - p) * math.log2(1 - p)) - 0.8112781244591328) < 1e-12


@settings(max_examples=200, deadline=None)
@given(st.floats(0.0, 1.0))
def test_transferability_bounded_and_peaked(p):
    t = transferability(np.array([p]))[0]
    assert 0.0 <= t <= 1.0
    assert t <= transferability(np.array([0.5]))[0]


def test_empty_injection_equals_plain_attention():
    rng = np.random.default_rng(3)
    q, k, v = rand(rng, 3, 4), rand(rng, 5, 4), rand(rng, 5, 4)
    plain = dta_attention(q, k, v)
    empty = dta_attention(q, k, v, Tensor(np.zeros((0, 4))), Tensor(np.zeros((0, 4))),
                          np.zeros(0))
    assert np.max(np.abs(plain.data - empty.data)) < 1e-9


def test_unit_transferability_equals_attention_over_concatenation():
    rng = np.random.default_rng(4)
    q, k, v, ki, vi = (rand(rng, 3, 4), rand(rng, 5, 4), rand(rng, 5, 4),
                       rand(rng, 2, 4), rand(rng, 2, 4))
    a = dta_attention(q, k, v, ki, vi, np.ones(2))
    b = dta_attention(q, T.concat([k, ki]), T.concat([v, vi]))
    assert np.max(np.abs(a.data - b.data)) < 1e-12


def test_zero_transferability_nulls_injected_token_closed_form():
    q = Tensor(np.array([[1.0, 0.0]]))
    k_own, v_own = Tensor(np.array([[0.5, 1.0]])), Tensor(np.array([[2.0, -1.0]]))
    k_inj, v_inj = Tensor(np.array([[1.0, 1.0]])), Tensor(np.array([[100.0, 100.0]]))
    out, w = dta_attention(q, k_own, v_own, k_inj, v_inj, np.array([0.0]),
                           return_weights=True)
    lo, li = 0.5 / np.sqrt(2), 1.0 / np.sqrt(2)
    w_own = np.exp(lo) / (np.exp(lo) + np.exp(li))
    assert w.data[0, 1] == 0.0
    np.testing.assert_array_equal(out.data, w.data[:, :1] * v_own.data)
    np.testing.assert_allclose(out.data, w_own * v_own.data, rtol=1e-12)


def test_row_mass_and_monotone_trust():
    rng = np.random.default_rng(5)
    q, k, v, ki, vi = (rand(rng, 4, 3), rand(rng, 3, 3), rand(rng, 3, 3),
                       rand(rng, 2, 3), rand(rng, 2, 3))
    t = np.array([0.3, 0.8])
    _, w = dta_attention(q, k, v, ki, vi, t, return_weights=True)
    mass = w.data.sum(-1)
    assert np.all((mass > 0) & (mass <= 1 + 1e-12)) and np.all(mass < 1)
    norms = []
    for t0 in np.linspace(0, 1, 6):
        _, w = dta_attention(q, k, v, ki, vi, np.array([t0, 0.8]), return_weights=True)
        norms.append(np.linalg.norm(w.data[:, 3:4] * vi.data[0]))
    assert all(b >= a for a, b in zip(norms, norms[1:]))


def test_injection_length_mismatch():
    rng = np.random.default_rng(6)
    with pytest.raises(DimensionError):
        dta_attention(rand(rng, 2, 4), rand(rng, 3, 4), rand(rng, 3, 4),
                      rand(rng, 2, 4), rand(rng, 2, 4), np.ones(3))


def test_multi_head_shape_single_head_and_permutation():
    rng = np.random.default_rng(7)
    x, inj = rand(rng, 5, 8), rand(rng, 5, 8)
    t = rng.random(5)
    with T.check_mode():
        mh = MultiHeadDTA(8, 1, rng).astype(np.float64)
        out = mh(x, inj, t)
        assert out.shape == (5, 8)
        ref = dta_attention(mh.q(x), mh.k(x), mh.v(x), mh.k(inj), mh.v(inj), t)
        np.testing.assert_allclose(out.data, mh.proj(ref).data, rtol=1e-10)

        mh = MultiHeadDTA(8, 4, rng).astype(np.float64)
        before = mh(x, inj, t).data
        perm = [2, 0, 3, 1]
        cols = np.concatenate([np.arange(h * 2, h * 2 + 2) for h in perm])
        for lin in (mh.q, mh.k, mh.v):
            lin.weight.data = lin.weight.data[:, cols]
            lin.bias.data = lin.bias.data[cols]
        mh.proj.weight.data = mh.proj.weight.data[cols]
        np.testing.assert_allclose(mh(x, inj, t).data, before, rtol=1e-10, atol=1e-12)


def test_dta_block_reduction_shape_and_sensitivity():
    rng = np.random.default_rng(8)
    with T.check_mode():
        blk = SwinBlock(8, 2, 4, rng).astype(np.float64)
        z = rand(rng, 2, 8, 8, 8)
        real = rand(rng, 2, 8, 8, 8)
        for shifted in (False, True):
            plain = blk(z, shifted=shifted)
            assert plain.shape == z.shape
            with_t1 = blk(z, shifted=shifted, ctx=DTAContext(real, np.ones((2, 8, 8))))
            assert np.abs(with_t1.data - plain.data).max() > 1e-6
            nulled = blk(z, shifted=shifted, ctx=DTAContext(real, np.zeros((2, 8, 8))))
            # zero trust removes the injected values; the own-softmax mass shrinks though
            assert np.isfinite(nulled.data).all()
        with pytest.raises(DimensionError):
            blk(z, ctx=DTAContext(rand(rng, 2, 4, 4, 8), np.ones((2, 4, 4))))


def test_token_adv_loss_limits():
    rng = np.random.default_rng(9)
    dt = DomainTransfer(4, 8, rng)
    zero_disc(dt)
    c = TokenBatch(rand(rng, 6, 4), Domain.COMICS)
    r = TokenBatch(rand(rng, 5, 4), Domain.REAL)
    loss_d, loss_g = token_adv_loss(c, r, dt)
    np.testing.assert_allclose(loss_d.item(), math.log(2), rtol=1e-6)
    np.testing.assert_allclose(loss_g.item(), math.log(2), rtol=1e-6)

    # a near-perfect discriminator: reads feature 0 with a huge gain
    dt.disc.mlp.fc1.weight.data[0, 0] = 1.0
    dt.disc.mlp.fc2.weight.data[0, 0] = 1e3
    dt.disc.mlp.fc2.bias.data[0] = -1e3 * 5.0
    comics = np.zeros((6, 4)); comics[:, 0] = 10.0
    c = TokenBatch(Tensor(comics), Domain.COMICS)
    r = TokenBatch(Tensor(np.zeros((5, 4))), Domain.REAL)
    loss_d, loss_g = token_adv_loss(c, r, dt)
    assert loss_d.item() < 1e-6 and loss_g.item() > 100


def test_alternating_round_decreases_discriminator_loss():
    rng = np.random.default_rng(10)
    dt = DomainTransfer(8, 16, rng)
    comics, real = _clouds(rng)
    c = TokenBatch(Tensor(comics), Domain.COMICS)
    r = TokenBatch(Tensor(real), Domain.REAL)
    before, _ = token_adv_loss(c, r, dt)
    T.backward(before)
    _sgd(dt.disc.parameters(), 0.5)
    dt.gen.zero_grad()
    _, loss_g = token_adv_loss(c, r, dt)
    (gg,) = T.grad(loss_g, [dt.gen.mlp.fc2.weight])
    after, _ = token_adv_loss(c, r, dt)
    assert after.item() < before.item()
    assert np.abs(gg).sum() > 0

"""Domain transferable attention.

A token-level domain discriminator scores real-domain tokens; the binary
entropy of its probability is the token's transferability. Real tokens are
then injected into the comics stream's attention as extra keys/values whose
post-softmax weights are multiplied by that transferability. With nothing
injected the attention is exactly ordinary multi-head self-attention.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import ConfigError
from .nn import MLP, Linear, Module
from .tensor import ContractError, DimensionError, Tensor

PROB_CLAMP = 1e-7


class Domain(enum.Enum):
    COMICS = "comics"
    REAL = "real"
    FAKE_COMICS = "fake-comics"


@dataclass(frozen=True)
class TokenBatch:
    tokens: Tensor
    domain: Domain

    def __post_init__(self):
        if self.tokens.ndim != 2 or self.tokens.shape[0] < 1:
            raise DimensionError(f"TokenBatch needs (n>=1, d) tokens, got {self.tokens.shape}")

    @classmethod
    def from_grid(cls, grid: Tensor, domain: Domain) -> "TokenBatch":
        return cls(grid.reshape(-1, grid.shape[-1]), domain)

    def __len__(self):
        return self.tokens.shape[0]


def transferability(probs) -> np.ndarray:
    """Base-2 binary entropy of discriminator probabilities, in [0, 1]."""
    p = np.clip(np.asarray(getattr(probs, "data", probs), dtype=np.float64),
                PROB_CLAMP, 1.0 - PROB_CLAMP)
    t = -(p * np.log2(p) + (1.0 - p) * np.log2(1.0 - p))
    return np.clip(t, 0.0, 1.0)


def dta_attention(q: Tensor, k: Tensor, v: Tensor,
                  k_inj: Tensor | None = None, v_inj: Tensor | None = None,
                  t_inj=None, bias=None, mask=None, return_weights: bool = False):
    """Scaled dot-product attention over ``[own; injected]`` keys.

    Shapes are ``(..., m, d)`` for queries and ``(..., n, d)`` for keys and
    values. ``bias`` and ``mask`` are added to the logits of the own block and,
    when given, to the injected block too (injected tokens are assumed to
    share the own tokens' window geometry). ``t_inj`` broadcasts against
    ``(..., n_inj)``; the softmax output is multiplied by ``[1...1, t_inj]``
    and deliberately not renormalised.
    """
    d = q.shape[-1]
    if k.shape[-1] != d or k.shape[-2] != v.shape[-2]:
        raise DimensionError(f"attention: q {q.shape}, k {k.shape}, v {v.shape} disagree")
    sc = 1.0 / np.sqrt(d)
    logits = T.scale(q @ T.swap_last(k), sc)
    if bias is not None:
        logits = logits + bias
    if mask is not None:
        logits = logits + T.as_tensor(mask, logits)
    if k_inj is None:
        weights = T.softmax(logits, axis=-1)
        out = weights @ v
        return (out, weights) if return_weights else out

    if v_inj is None or t_inj is None:
        raise ContractError("injection needs keys, values and transferability together")
    n_inj = k_inj.shape[-2]
    t_inj = T.as_tensor(t_inj, q)
    if v_inj.shape[-2] != n_inj or t_inj.shape[-1] != n_inj or k_inj.shape[-1] != d:
        raise DimensionError(
            f"injection: k {k_inj.shape}, v {v_inj.shape}, t {t_inj.shape} disagree")
    li = T.scale(q @ T.swap_last(k_inj), sc)
    if n_inj and bias is not None:
        li = li + bias
    if n_inj and mask is not None:
        li = li + T.as_tensor(mask, li)
    probs = T.softmax(T.concat([logits, li], axis=-1), axis=-1)
    lead = t_inj.shape[:-1]
    t_row = t_inj.reshape(lead + (1, n_inj))
    ones = np.ones(lead + (1, k.shape[-2]), dtype=q.dtype)
    weights = probs * T.concat([Tensor(ones), t_row], axis=-1)
    out = weights @ T.concat([v, v_inj], axis=-2)
    return (out, weights) if return_weights else out


class MultiHeadDTA(Module):
    """Multi-head attention with optional transferability-weighted injection.

    The per-head projections are the column blocks of the ``q``/``k``/``v``
    weights; head outputs are concatenated and mixed by ``proj``.
    """

    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        if heads < 1 or dim % heads:
            raise ConfigError(f"{heads} heads do not divide width {dim}")
        self.dim, self.heads = dim, heads
        self.q = Linear(dim, dim, rng)
        self.k = Linear(dim, dim, rng)
        self.v = Linear(dim, dim, rng)
        self.proj = Linear(dim, dim, rng)

    def _split(self, x: Tensor) -> Tensor:
        # (..., n, D) -> (..., heads, n, d)
        lead, n = x.shape[:-2], x.shape[-2]
        x = x.reshape(lead + (n, self.heads, self.dim // self.heads))
        nd = x.ndim
        return x.transpose(tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1))

    def _merge(self, x: Tensor) -> Tensor:
        nd = x.ndim
        x = x.transpose(tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1))
        return x.reshape(x.shape[:-2] + (self.dim,))

    def forward(self, x: Tensor, inj: Tensor | None = None, t_inj=None,
                bias=None, mask=None, return_weights: bool = False):
        if x.shape[-1] != self.dim:
            raise DimensionError(f"attention width {self.dim} vs tokens {x.shape}")
        q, k, v = (self._split(f(x)) for f in (self.q, self.k, self.v))
        k_inj = v_inj = t_h = None
        if inj is not None:
            if inj.shape[-1] != self.dim:
                raise DimensionError(f"injected width {inj.shape[-1]} vs {self.dim}")
            k_inj, v_inj = self._split(self.k(inj)), self._split(self.v(inj))
            t = np.asarray(getattr(t_inj, "data", t_inj), dtype=x.dtype)
            t_h = t.reshape(t.shape[:-1] + (1, t.shape[-1]))  # broadcast over heads
        res = dta_attention(q, k, v, k_inj, v_inj, t_h, bias=bias, mask=mask,
                            return_weights=return_weights)
        out, w = res if return_weights else (res, None)
        out = self.proj(self._merge(out))
        return (out, w) if return_weights else out


class TokenDiscriminator(Module):
    """Two-layer MLP giving the per-token probability of the comics domain."""

    def __init__(self, dim: int, hidden: int, rng: np.random.Generator):
        self.dim = dim
        self.mlp = MLP(dim, hidden, 1, rng)

    def logits(self, tokens: Tensor) -> Tensor:
        if tokens.shape[-1] != self.dim:
            raise DimensionError(f"discriminator width {self.dim} vs tokens {tokens.shape}")
        return self.mlp(tokens).reshape(tokens.shape[:-1])

    def forward(self, batch: TokenBatch) -> Tensor:
        return T.sigmoid(self.logits(batch.tokens))


class TokenGenerator(Module):
    """Residual MLP mapping real tokens to fake comics tokens (identity at init)."""

    def __init__(self, dim: int, rng: np.random.Generator):
        self.mlp = MLP(dim, dim, dim, rng)
        self.mlp.fc2.weight.data[...] = 0.0

    def forward(self, batch: TokenBatch) -> TokenBatch:
        if batch.domain is not Domain.REAL:
            raise ContractError(f"generator expects real tokens, got {batch.domain.value}")
        x = batch.tokens
        return TokenBatch(x + self.mlp(x), Domain.FAKE_COMICS)


class DomainTransfer(Module):
    def __init__(self, dim: int, hidden: int, rng: np.random.Generator):
        self.disc = TokenDiscriminator(dim, hidden, rng)
        self.gen = TokenGenerator(dim, rng)

    def d_token(self, batch: TokenBatch) -> Tensor:
        return self.disc(batch)

    def g_f(self, batch: TokenBatch) -> TokenBatch:
        return self.gen(batch)

    def token_transferability(self, tokens: Tensor) -> np.ndarray:
        with T.no_grad():
            p = T.sigmoid(self.disc.logits(tokens))
        return transferability(p).astype(tokens.dtype)


def token_adv_loss(comics: TokenBatch, real: TokenBatch, p: DomainTransfer) -> tuple[Tensor, Tensor]:
    """(discriminator loss, generator loss), both binary cross-entropies.

    The discriminator labels comics tokens 1 and real/generated tokens 0; the
    generator is scored against label 1 on its own outputs.
    """
    if comics.domain is not Domain.COMICS:
        raise ContractError("first batch must be comics tokens")
    fake = p.g_f(real)
    d = p.disc
    loss_d = T.scale(
        T.bce_with_logits(d.logits(comics.tokens), 1.0)
        + T.bce_with_logits(d.logits(real.tokens), 0.0)
        + T.bce_with_logits(d.logits(fake.tokens), 0.0),
        1.0 / 3.0,
    )
    loss_g = T.bce_with_logits(d.logits(fake.tokens), 1.0)
    return loss_d, loss_g

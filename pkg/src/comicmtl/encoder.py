"""Hierarchical shifted-window transformer encoder.

Grids are ``(B, H, W, C)`` tensors. Each stage runs its blocks on a fixed
window partition, alternating regular and half-window-shifted windows; the
window is clipped to the grid on any axis where the grid is not larger than
the window, and such axes are never shifted.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import tensor as T
from .config import ConfigError, ModelConfig
from .dta import MultiHeadDTA
from .nn import MLP, LayerNorm, Linear, Module, trunc_normal
from .tensor import ContractError, DimensionError, Parameter, Tensor

MASK_VALUE = -1e9


@dataclass(frozen=True)
class WindowGeometry:
    wh: int
    ww: int
    sh: int
    sw: int

    @property
    def tokens(self) -> int:
        return self.wh * self.ww


def window_geometry(h: int, w: int, win: int, shifted: bool) -> WindowGeometry:
    wh, ww = min(win, h), min(win, w)
    sh = win // 2 if shifted and h > win else 0
    sw = win // 2 if shifted and w > win else 0
    return WindowGeometry(wh, ww, sh, sw)


def _stage_ok(n: int, win: int) -> bool:
    return n <= win or n % win == 0


def padded_size(n: int, cfg: ModelConfig) -> int:
    """Smallest extent >= n whose every stage grid fits the window partition."""
    unit = cfg.patch_size * 8
    m = -(-n // unit) * unit
    while not all(_stage_ok(m // (cfg.patch_size * 2 ** s), cfg.window_size) for s in range(4)):
        m += unit
    return m


def pad_images(images: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    """Reflect-pad (B, H, W, C) images at the bottom/right edges."""
    _, h, w, _ = images.shape
    unit = cfg.patch_size * 8
    if h < unit or w < unit:
        raise ConfigError(
            f"image {h}x{w} is smaller than one stage-4 token ({unit}x{unit} pixels)")
    ph, pw = padded_size(h, cfg) - h, padded_size(w, cfg) - w
    if ph == 0 and pw == 0:
        return images
    return np.pad(images, ((0, 0), (0, ph), (0, pw), (0, 0)), mode="reflect")


# -- window algebra ----------------------------------------------------------

def window_partition(x: Tensor, wh: int, ww: int) -> Tensor:
    """(B, H, W, C) -> (B, nW, wh*ww, C); windows in row-major order."""
    b, h, w, c = x.shape
    if h % wh or w % ww:
        raise ContractError(f"grid {h}x{w} not divisible by window {wh}x{ww}")
    x = x.reshape(b, h // wh, wh, w // ww, ww, c).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, (h // wh) * (w // ww), wh * ww, c)


def window_reverse(windows: Tensor, h: int, w: int, wh: int, ww: int) -> Tensor:
    b, _, _, c = windows.shape
    x = windows.reshape(b, h // wh, w // ww, wh, ww, c).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, h, w, c)


def cyclic_shift(x: Tensor, sh: int, sw: int | None = None) -> Tensor:
    """Roll a grid by (-sh, -sw) with wraparound."""
    sw = sh if sw is None else sw
    if sh == 0 and sw == 0:
        return x
    return T.roll(x, (-sh, -sw), (1, 2))


def cyclic_unshift(x: Tensor, sh: int, sw: int | None = None) -> Tensor:
    sw = sh if sw is None else sw
    if sh == 0 and sw == 0:
        return x
    return T.roll(x, (sh, sw), (1, 2))


def _regions(n: int, win: int, s: int) -> np.ndarray:
    lab = np.zeros(n, dtype=np.int64)
    if s:
        lab[n - win:n - s] = 1
        lab[n - s:] = 2
    return lab


@lru_cache(maxsize=64)
def _shift_mask(h: int, w: int, wh: int, ww: int, sh: int, sw: int) -> np.ndarray:
    region = _regions(h, wh, sh)[:, None] * 3 + _regions(w, ww, sw)[None, :]
    r = region.reshape(h // wh, wh, w // ww, ww).transpose(0, 2, 1, 3).reshape(-1, wh * ww)
    mask = np.where(r[:, :, None] != r[:, None, :], MASK_VALUE, 0.0)
    mask.setflags(write=False)
    return mask


def build_shift_mask(h: int, w: int, win: int, s: int, wh: int | None = None,
                     ww: int | None = None, sw: int | None = None) -> np.ndarray:
    """Additive (nW, N, N) mask for a shifted partition of an h x w grid.

    Entries are 0 where both tokens come from the same pre-shift region and
    ``MASK_VALUE`` otherwise.
    """
    wh = win if wh is None else wh
    ww = win if ww is None else ww
    sw = s if sw is None else sw
    return _shift_mask(h, w, wh, ww, s, sw)


@lru_cache(maxsize=64)
def relative_position_index(wh: int, ww: int, win: int) -> np.ndarray:
    """(N, N) row indices into a (2*win-1)**2 relative-bias table."""
    ys, xs = np.meshgrid(np.arange(wh), np.arange(ww), indexing="ij")
    ys, xs = ys.ravel(), xs.ravel()
    dy = ys[:, None] - ys[None, :] + win - 1
    dx = xs[:, None] - xs[None, :] + win - 1
    idx = dy * (2 * win - 1) + dx
    idx.setflags(write=False)
    return idx


# -- layers ------------------------------------------------------------------

class WindowAttention(MultiHeadDTA):
    """Multi-head window attention with a learned relative position bias."""

    def __init__(self, dim: int, heads: int, window: int, rng: np.random.Generator,
                 rel_pos_bias: bool = True):
        super().__init__(dim, heads, rng)
        self.window = window
        self.rel_bias = (Parameter(trunc_normal(rng, ((2 * window - 1) ** 2, heads)))
                         if rel_pos_bias else None)

    def position_bias(self, geo: WindowGeometry) -> Tensor | None:
        if self.rel_bias is None:
            return None
        idx = relative_position_index(geo.wh, geo.ww, self.window)
        return T.take(self.rel_bias, idx, axis=0).transpose(2, 0, 1)  # (heads, N, N)

    def forward(self, windows: Tensor, geo: WindowGeometry, mask=None,
                inj: Tensor | None = None, t_inj=None, return_weights: bool = False):
        if mask is not None:
            mask = mask[:, None]  # broadcast over heads
        return super().forward(windows, inj, t_inj, bias=self.position_bias(geo),
                               mask=mask, return_weights=return_weights)


@dataclass
class DTAContext:
    """Real-stream tokens injected into one block of the comics stream."""

    tokens: Tensor
    transferability: np.ndarray  # (B, H, W)


class SwinBlock(Module):
    def __init__(self, dim: int, heads: int, window: int, rng: np.random.Generator,
                 mlp_ratio: float = 4.0, rel_pos_bias: bool = True):
        self.dim, self.window = dim, window
        self.norm1 = LayerNorm(dim)
        self.attn = WindowAttention(dim, heads, window, rng, rel_pos_bias)
        self.norm2 = LayerNorm(dim)
        self.mlp = MLP(dim, int(dim * mlp_ratio), dim, rng)

    def forward(self, x: Tensor, shifted: bool = False, ctx: DTAContext | None = None,
                geo: WindowGeometry | None = None) -> Tensor:
        b, h, w, c = x.shape
        if c != self.dim:
            raise DimensionError(f"block width {self.dim} vs grid {x.shape}")
        geo = geo or window_geometry(h, w, self.window, shifted)
        mask = _shift_mask(h, w, geo.wh, geo.ww, geo.sh, geo.sw) if geo.sh or geo.sw else None

        y = cyclic_shift(self.norm1(x), geo.sh, geo.sw)
        inj = t = None
        if ctx is not None:
            if ctx.tokens.shape != x.shape or ctx.transferability.shape != x.shape[:3]:
                raise DimensionError(
                    f"injected tokens {ctx.tokens.shape} / transferability "
                    f"{ctx.transferability.shape} not aligned with grid {x.shape}")
            inj = window_partition(cyclic_shift(self.norm1(ctx.tokens), geo.sh, geo.sw),
                                   geo.wh, geo.ww)
            t = np.roll(ctx.transferability, (-geo.sh, -geo.sw), (1, 2))
            t = t.reshape(b, h // geo.wh, geo.wh, w // geo.ww, geo.ww)
            t = t.transpose(0, 1, 3, 2, 4).reshape(b, -1, geo.tokens)
        out = self.attn(window_partition(y, geo.wh, geo.ww), geo, mask, inj, t)
        x = x + cyclic_unshift(window_reverse(out, h, w, geo.wh, geo.ww), geo.sh, geo.sw)
        return x + self.mlp(self.norm2(x))


class PatchEmbed(Module):
    def __init__(self, patch: int, in_ch: int, dim: int, rng: np.random.Generator):
        self.patch = patch
        self.proj = Linear(patch * patch * in_ch, dim, rng)
        self.norm = LayerNorm(dim)

    def forward(self, images) -> Tensor:
        x = T.as_tensor(images)
        b, h, w, c = x.shape
        p = self.patch
        if h % p or w % p:
            raise ContractError(f"image {h}x{w} not divisible by patch {p}")
        x = x.reshape(b, h // p, p, w // p, p, c).transpose(0, 1, 3, 2, 4, 5)
        x = x.reshape(b, h // p, w // p, p * p * c)
        return self.norm(self.proj(x))


class PatchMerging(Module):
    """2x2 neighbourhood concat -> LayerNorm -> linear to twice the width."""

    def __init__(self, dim: int, rng: np.random.Generator):
        self.norm = LayerNorm(4 * dim)
        self.reduction = Linear(4 * dim, 2 * dim, rng, bias=False)

    def forward(self, x: Tensor) -> Tensor:
        b, h, w, c = x.shape
        if h % 2 or w % 2:
            raise ContractError(f"patch merging needs even extents, got {h}x{w}")
        x = x.reshape(b, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 2, 4, 5)
        return self.reduction(self.norm(x.reshape(b, h // 2, w // 2, 4 * c)))


class SwinStage(Module):
    def __init__(self, dim: int, depth: int, heads: int, window: int,
                 rng: np.random.Generator, mlp_ratio: float, rel_pos_bias: bool):
        self.blocks = [SwinBlock(dim, heads, window, rng, mlp_ratio, rel_pos_bias)
                       for _ in range(depth)]

    def forward(self, x: Tensor, ctxs=None, capture: list | None = None) -> Tensor:
        for j, blk in enumerate(self.blocks):
            if capture is not None:
                capture.append(x)
            x = blk(x, shifted=j % 2 == 1, ctx=ctxs[j] if ctxs else None)
        return x


@dataclass
class FeaturePyramid:
    levels: list  # four (B, h, w, C) tensors at 1/4 .. 1/32 resolution

    def shapes(self) -> list[tuple[int, int, int]]:
        return [tuple(t.shape[1:]) for t in self.levels]


class SwinEncoder(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.patch_embed = PatchEmbed(cfg.patch_size, cfg.in_channels, cfg.embed_dim, rng)
        self.stages = []
        self.merges = []
        self.out_norms = []  # one per emitted level; the merge path stays unnormalised
        for s in range(1, 5):
            dim = cfg.stage_channels(s)
            self.stages.append(SwinStage(dim, cfg.stage_depths[s - 1], cfg.stage_heads[s - 1],
                                         cfg.window_size, rng, cfg.mlp_ratio, cfg.rel_pos_bias))
            self.out_norms.append(LayerNorm(dim))
            if s < 4:
                self.merges.append(PatchMerging(dim, rng))

    def shared_block(self) -> SwinBlock:
        """Last encoder block: the layer GradNorm measures gradient norms on."""
        return self.stages[-1].blocks[-1]

    def forward(self, images, dta_ctxs=None, capture: list | None = None,
                stop_after: int = 4) -> FeaturePyramid:
        """Run the stages on padded images.

        ``dta_ctxs`` holds one context per block of ``cfg.dta_stage``;
        ``capture`` collects that stage's block inputs.
        """
        x = self.patch_embed(images)
        levels = []
        for s in range(1, stop_after + 1):
            at_dta = s == self.cfg.dta_stage
            x = self.stages[s - 1](x, dta_ctxs if at_dta else None,
                                   capture if at_dta else None)
            levels.append(self.out_norms[s - 1](x))
            if s < 4 and s < stop_after:
                x = self.merges[s - 1](x)
        return FeaturePyramid(levels)

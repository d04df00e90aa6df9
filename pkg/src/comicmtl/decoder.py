"""Mirrored transformer decoders, task heads and the full multitask model."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import tensor as T
from .config import ConfigError, ModelConfig
from .dta import DomainTransfer
from .encoder import FeaturePyramid, SwinEncoder, SwinStage, pad_images
from .nn import LayerNorm, Linear, Module
from .tensor import DimensionError, Tensor


class Upsample(Module):
    """Each token becomes a 2x2 block of tokens with half the channels, then LN."""

    def __init__(self, dim: int, rng: np.random.Generator):
        if dim % 2:
            raise ConfigError(f"cannot halve odd width {dim}")
        self.expand = Linear(dim, 2 * dim, rng)
        self.norm = LayerNorm(dim // 2)

    def forward(self, x: Tensor) -> Tensor:
        b, h, w, c = x.shape
        y = self.expand(x).reshape(b, h, w, 2, 2, c // 2).transpose(0, 1, 3, 2, 4, 5)
        return self.norm(y.reshape(b, 2 * h, 2 * w, c // 2))


class SkipFusion(Module):
    """Concatenate decoded and skip channels, project back, normalise."""

    def __init__(self, dim: int, rng: np.random.Generator):
        self.proj = Linear(2 * dim, dim, rng)
        self.norm = LayerNorm(dim)

    def forward(self, decoded: Tensor, skip: Tensor) -> Tensor:
        if decoded.shape != skip.shape:
            raise DimensionError(f"skip {skip.shape} does not match decoded {decoded.shape}")
        return self.norm(self.proj(T.concat([decoded, skip], axis=-1)))


class TaskDecoder(Module):
    """Four stages from the 1/32 level back to 1/4 resolution.

    Stage 1 starts from the deepest encoder output itself; stages 2-4 first
    fuse the mirrored encoder level. Upsampling sits between stages.
    """

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.stages, self.fusions, self.upsamples = [], [], []
        for i in range(4):
            dim = cfg.stage_channels(4 - i)
            if i > 0:
                self.fusions.append(SkipFusion(dim, rng))
            self.stages.append(SwinStage(dim, cfg.decoder_depths[i], cfg.decoder_heads[i],
                                         cfg.window_size, rng, cfg.mlp_ratio, cfg.rel_pos_bias))
            if i < 3:
                self.upsamples.append(Upsample(dim, rng))
        self.norm = LayerNorm(cfg.embed_dim)  # bounds what the heads see

    def forward(self, pyramid: FeaturePyramid, trace: list | None = None) -> Tensor:
        x = pyramid.levels[3]
        for i in range(4):
            if i > 0:
                x = self.fusions[i - 1](x, pyramid.levels[3 - i])
            x = self.stages[i](x)
            if trace is not None:
                trace.append(x)
            if i < 3:
                x = self.upsamples[i](x)
        return self.norm(x)


@lru_cache(maxsize=32)
def bilinear_matrix(n_in: int, factor: int) -> np.ndarray:
    """(n_in*factor, n_in) half-pixel-centred linear interpolation, edges clamped."""
    n_out = n_in * factor
    src = np.clip((np.arange(n_out) + 0.5) / factor - 0.5, 0, n_in - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    m = np.zeros((n_out, n_in))
    m[np.arange(n_out), i0] += 1 - frac
    m[np.arange(n_out), i1] += frac
    m.setflags(write=False)
    return m


def upsample_bilinear(x: Tensor, factor: int) -> Tensor:
    if factor == 1:
        return x
    x = T.apply_matrix(x, bilinear_matrix(x.shape[1], factor), axis=1)
    return T.apply_matrix(x, bilinear_matrix(x.shape[2], factor), axis=2)


class SegHead(Module):
    def __init__(self, dim: int, num_classes: int, patch: int, rng: np.random.Generator):
        if num_classes < 2:
            raise ConfigError(f"segmentation needs K >= 2 classes, got {num_classes}")
        self.patch = patch
        self.linear = Linear(dim, num_classes, rng)

    def forward(self, g: Tensor, height: int, width: int) -> Tensor:
        """Full-resolution logits; apply softmax for probabilities."""
        return upsample_bilinear(self.linear(g), self.patch)[:, :height, :width]


class DepthHead(Module):
    def __init__(self, dim: int, patch: int, rng: np.random.Generator):
        self.patch = patch
        self.linear = Linear(dim, 1, rng)

    def forward(self, g: Tensor, height: int, width: int) -> Tensor:
        z = upsample_bilinear(self.linear(g), self.patch)[:, :height, :width]
        return T.sigmoid(z)


@dataclass
class TaskPrediction:
    seg_logits: Tensor   # (B, H, W, K)
    seg_probs: Tensor    # (B, H, W, K), sums to one per pixel
    depth: Tensor        # (B, H, W, 1) in (0, 1)
    pyramid: FeaturePyramid | None = None


# images arrive in [0, 1]; centring keeps the patch projection + LayerNorm from
# discarding brightness (a bias-free linear map followed by LN is scale invariant)
PIXEL_MEAN, PIXEL_STD = 0.5, 0.25


def normalize_images(images: np.ndarray) -> np.ndarray:
    return (images - PIXEL_MEAN) / PIXEL_STD


class MTLModel(Module):
    """Shared encoder, two identically-shaped task decoders, two heads."""

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        c = cfg.embed_dim
        self.encoder = SwinEncoder(cfg, rng)
        self.seg_decoder = TaskDecoder(cfg, rng)
        self.depth_decoder = TaskDecoder(cfg, rng)
        self.seg_head = SegHead(c, cfg.num_classes, cfg.patch_size, rng)
        self.depth_head = DepthHead(c, cfg.patch_size, rng)
        self.dta = (DomainTransfer(cfg.stage_channels(cfg.dta_stage), cfg.disc_hidden, rng)
                    if cfg.dta_enabled else None)
        if cfg.init == "fan_in":
            # same draws, rescaled: std 0.02 starves the deep levels of a narrow model
            for m in self.modules():
                if isinstance(m, Linear):
                    m.weight.data *= np.float32(1.0 / (0.02 * np.sqrt(m.weight.shape[0])))
        list(self.named_parameters())  # bind names

    def task_parameters(self):
        """Everything the task/generator optimiser updates (not the discriminator)."""
        return [p for n, p in self.named_parameters() if not n.startswith("dta.disc.")]

    def disc_parameters(self):
        return [p for n, p in self.named_parameters() if n.startswith("dta.disc.")]

    def encode(self, images, dta_ctxs=None, capture: list | None = None,
               stop_after: int = 4) -> FeaturePyramid:
        images = np.asarray(getattr(images, "data", images))
        if images.ndim == 3:
            images = images[None]
        x = normalize_images(pad_images(images, self.cfg)).astype(T.default_dtype(), copy=False)
        return self.encoder(x, dta_ctxs=dta_ctxs, capture=capture, stop_after=stop_after)

    def forward(self, images, dta_ctxs=None, capture: list | None = None) -> TaskPrediction:
        images = np.asarray(getattr(images, "data", images))
        if images.ndim == 3:
            images = images[None]
        _, h, w, _ = images.shape
        pyr = self.encode(images, dta_ctxs=dta_ctxs, capture=capture)
        logits = self.seg_head(self.seg_decoder(pyr), h, w)
        depth = self.depth_head(self.depth_decoder(pyr), h, w)
        return TaskPrediction(logits, T.softmax(logits, axis=-1), depth, pyr)


def forward_mtl(images, model: MTLModel, dta_ctxs=None) -> TaskPrediction:
    return model(images, dta_ctxs=dta_ctxs)


def predict(model: MTLModel, images: np.ndarray, batch_size: int = 8) -> tuple[np.ndarray, np.ndarray]:
    """Inference without graph building: (seg_probs (N,H,W,K), depth (N,H,W))."""
    probs, depths = [], []
    with T.no_grad():
        for i in range(0, len(images), batch_size):
            out = model(images[i:i + batch_size])
            probs.append(out.seg_probs.data)
            depths.append(out.depth.data[..., 0])
    return np.concatenate(probs), np.concatenate(depths)

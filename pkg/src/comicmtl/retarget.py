"""Seam carving guided by dense predictions.

The energy of a pixel is

    E = base * |grad luminance| + sum_k lambda_seg[k] * p_k + lambda_depth * (1 - depth)

so confidently segmented foreground and near pixels become expensive to
remove. Setting every lambda to zero gives plain seam carving.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import ConfigError
from .tensor import ContractError

LUMA = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class RetargetConfig:
    target_width: int
    target_height: int
    seg_weights: tuple = ()  # one weight per class; empty means no segmentation term
    depth_weight: float = 0.0
    base_weight: float = 1.0

    def validate(self, height: int, width: int, num_classes: int | None = None) -> None:
        if self.target_width < 1 or self.target_height < 1:
            raise ConfigError("targets must be positive")
        if self.target_width > width or self.target_height > height:
            raise ConfigError(
                f"target {self.target_height}x{self.target_width} exceeds source "
                f"{height}x{width}; enlargement is not supported")
        if min((self.depth_weight, self.base_weight) + tuple(self.seg_weights)) < 0:
            raise ConfigError("energy weights must be non-negative")
        if self.seg_weights and num_classes is not None and len(self.seg_weights) != num_classes:
            raise ConfigError(f"{len(self.seg_weights)} class weights for {num_classes} classes")


def luminance(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, np.float64)
    return image @ LUMA if image.ndim == 3 else image


def gradient_energy(image: np.ndarray) -> np.ndarray:
    """|d/dx| + |d/dy| of luminance, central differences, replicated borders."""
    lum = np.pad(luminance(image), 1, mode="edge")
    dx = (lum[1:-1, 2:] - lum[1:-1, :-2]) / 2.0
    dy = (lum[2:, 1:-1] - lum[:-2, 1:-1]) / 2.0
    return np.abs(dx) + np.abs(dy)


def cue_energy(seg_probs: np.ndarray | None, depth: np.ndarray | None, cfg: RetargetConfig) -> np.ndarray | float:
    """The prediction-driven part of the energy (zero when unguided)."""
    e = 0.0
    if cfg.seg_weights:
        if seg_probs is None:
            raise ConfigError("class weights given but no segmentation probabilities")
        if seg_probs.shape[-1] != len(cfg.seg_weights):
            raise ConfigError(f"{len(cfg.seg_weights)} class weights for {seg_probs.shape[-1]} classes")
        e = e + np.asarray(seg_probs, np.float64) @ np.asarray(cfg.seg_weights, np.float64)
    if cfg.depth_weight:
        if depth is None:
            raise ConfigError("depth weight given but no depth plane")
        e = e + cfg.depth_weight * (1.0 - np.asarray(depth, np.float64))
    return e


def guided_energy(image: np.ndarray, seg_probs: np.ndarray | None, depth: np.ndarray | None,
                  cfg: RetargetConfig) -> np.ndarray:
    h, w = image.shape[:2]
    for name, plane in (("segmentation", seg_probs), ("depth", depth)):
        if plane is not None and plane.shape[:2] != (h, w):
            raise ConfigError(f"{name} plane {plane.shape[:2]} does not match image {(h, w)}")
    return cfg.base_weight * gradient_energy(image) + cue_energy(seg_probs, depth, cfg)


def min_seam_dp(energy: np.ndarray) -> tuple[np.ndarray, float]:
    """Minimal 8-connected vertical seam: (column per row, total energy).

    Ties go to the smaller column, both among parents and in the last row.
    """
    e = np.asarray(energy, np.float64)
    h, w = e.shape
    if w < 2:
        raise ContractError(f"need width >= 2 to carve a seam, got {w}")
    cost = e[0].copy()
    parent = np.zeros((h, w), np.int64)
    cols = np.arange(w)
    for i in range(1, h):
        left = np.concatenate([[np.inf], cost[:-1]])
        right = np.concatenate([cost[1:], [np.inf]])
        cand = np.stack([left, cost, right])
        pick = np.argmin(cand, axis=0)  # first minimum = smallest column
        parent[i] = cols + pick - 1
        cost = e[i] + cand[pick, cols]
    seam = np.empty(h, np.int64)
    seam[-1] = int(np.argmin(cost))
    for i in range(h - 1, 0, -1):
        seam[i - 1] = parent[i, seam[i]]
    return seam, float(cost[seam[-1]])


def check_seam(seam: np.ndarray, height: int, width: int) -> None:
    seam = np.asarray(seam)
    if width < 2:
        raise ContractError(f"need width >= 2 to remove a seam, got {width}")
    if seam.shape != (height,):
        raise ContractError(f"seam has {seam.shape} entries for {height} rows")
    if seam.min() < 0 or seam.max() >= width:
        raise ContractError("seam leaves the image")
    if height > 1 and np.abs(np.diff(seam)).max() > 1:
        raise ContractError("seam is not connected")


def remove_seam(planes, seam: np.ndarray) -> list[np.ndarray]:
    """Drop one pixel per row from each (H, W, ...) plane."""
    planes = list(planes)
    h, w = planes[0].shape[:2]
    check_seam(seam, h, w)
    keep = np.ones((h, w), bool)
    keep[np.arange(h), seam] = False
    out = []
    for p in planes:
        if p.shape[:2] != (h, w):
            raise ContractError(f"plane {p.shape} not aligned with {(h, w)}")
        out.append(p[keep].reshape((h, w - 1) + p.shape[2:]))
    return out


def _update_band(grad: np.ndarray, lum: np.ndarray, seam: np.ndarray) -> np.ndarray:
    """Gradient energy after a seam removal, recomputing only the seam's band.

    ``grad`` has already been shrunk; ``lum`` is the shrunk luminance. A pixel's
    central differences change only if one of its four neighbours changed,
    which confines the change to columns near the seam in rows i-1..i+1.
    """
    h, w = lum.shape
    padded = np.pad(lum, 1, mode="edge")
    for i in range(h):
        lo = int(seam[max(i - 1, 0):i + 2].min()) - 2
        hi = int(seam[max(i - 1, 0):i + 2].max()) + 1
        lo, hi = max(lo, 0), min(hi, w - 1)
        if lo > hi:
            continue
        j = np.arange(lo, hi + 1)
        dx = (padded[i + 1, j + 2] - padded[i + 1, j]) / 2.0
        dy = (padded[i + 2, j + 1] - padded[i, j + 1]) / 2.0
        grad[i, lo:hi + 1] = np.abs(dx) + np.abs(dy)
    return grad


def carve_width(image: np.ndarray, cue, target_width: int, base_weight: float = 1.0,
                planes=(), incremental: bool = True):
    """Remove vertical seams until ``target_width``.

    ``cue`` is the fixed cue-energy plane (or a scalar); it is shrunk along
    with the image and any extra ``planes``. Returns (image, planes, seams).
    """
    h, w = image.shape[:2]
    cue = np.broadcast_to(np.asarray(cue, np.float64), (h, w)).copy()
    planes = [np.asarray(p) for p in planes]
    lum = luminance(image)
    grad = gradient_energy(image)
    seams = []
    while image.shape[1] > target_width:
        seam, _ = min_seam_dp(base_weight * grad + cue)
        image, cue, lum, grad, *planes = remove_seam([image, cue, lum, grad, *planes], seam)
        grad = _update_band(grad, lum, seam) if incremental else gradient_energy(lum)
        seams.append(seam)
    return image, planes, seams


def _swap(a: np.ndarray) -> np.ndarray:
    return np.swapaxes(a, 0, 1)


def retarget(image: np.ndarray, seg_probs: np.ndarray | None, depth: np.ndarray | None,
             cfg: RetargetConfig, return_planes: bool = False):
    """Shrink to (target_height, target_width): vertical seams first, then horizontal."""
    h, w = image.shape[:2]
    k = None if seg_probs is None else seg_probs.shape[-1]
    cfg.validate(h, w, k)
    guided_energy(image, seg_probs, depth, cfg)  # extent checks
    cue = cue_energy(seg_probs, depth, cfg)
    extra = [p for p in (seg_probs, depth) if p is not None]
    img, extra, _ = carve_width(image, cue, cfg.target_width, cfg.base_weight,
                                [np.broadcast_to(np.asarray(cue, np.float64), (h, w))] + extra)
    cue, extra = extra[0], extra[1:]
    img, extra, _ = carve_width(_swap(img), _swap(cue), cfg.target_height, cfg.base_weight,
                                [_swap(p) for p in extra])
    img = np.ascontiguousarray(_swap(img))
    if return_planes:
        return img, [np.ascontiguousarray(_swap(p)) for p in extra]
    return img


def protection_instance(seed: int = 0, height: int = 24, width: int = 32):
    """Textured background with one flat object: plain carving cuts the object.

    Returns (image, seg_probs with 2 classes, depth, object mask). Background
    energy is at most 1 per pixel, so an object weight above ``height`` makes
    every seam through the object cost more than any background seam.
    """
    rng = np.random.default_rng(seed)
    image = rng.random((height, width, 1)).repeat(3, axis=2)
    mask = np.zeros((height, width), bool)
    mask[height // 6:height - height // 6, width // 2 - 4:width // 2 + 4] = True
    image[mask] = 0.5
    seg = np.stack([~mask, mask], axis=-1).astype(np.float64)
    depth = np.where(mask, 0.3, 1.0)
    return image, seg, depth, mask

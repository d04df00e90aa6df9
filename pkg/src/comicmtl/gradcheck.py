"""Central finite-difference oracle for the autodiff engine."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor


def numeric_grad(f: Callable[[], float], arr: np.ndarray, eps: float = 1e-4,
                 indices: Sequence[tuple] | None = None) -> np.ndarray:
    """d f / d arr by central differences, perturbing ``arr`` in place.

    With ``indices`` only those entries are estimated (others stay NaN).
    """
    out = np.full(arr.shape, np.nan) if indices is not None else np.zeros(arr.shape)
    it = indices if indices is not None else list(np.ndindex(arr.shape))
    for idx in it:
        old = arr[idx]
        arr[idx] = old + eps
        fp = f()
        arr[idx] = old - eps
        fm = f()
        arr[idx] = old
        out[idx] = (fp - fm) / (2 * eps)
    return out


def rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-5) -> float:
    a, n = np.asarray(analytic, float), np.asarray(numeric, float)
    ok = ~np.isnan(n)
    a, n = a[ok], n[ok]
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)))


def check_op(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray], eps: float = 1e-4,
             seed: int = 0) -> float:
    """Max relative error of d<w, fn(*inputs)>/d inputs against finite differences.

    A fixed random projection ``w`` turns any output into a scalar so every
    output entry contributes.
    """
    with T.check_mode():
        arrays = [np.array(a, dtype=np.float64) for a in arrays]
        probe = fn(*[Tensor(a) for a in arrays])
        w = np.random.default_rng(seed).standard_normal(probe.shape)

        def scalar() -> float:
            return float((fn(*[Tensor(a) for a in arrays]).data * w).sum())

        ins = [Tensor(a, requires_grad=True) for a in arrays]
        out = fn(*ins)
        T.backward(T.sum_(out * Tensor(w)))
        worst = 0.0
        for t, a in zip(ins, arrays):
            g = t.grad if t.grad is not None else np.zeros_like(a)
            worst = max(worst, rel_error(g, numeric_grad(scalar, a, eps)))
        return worst


# 2 classes, 16x16 input, one block per stage
TINY = dict(patch_size=2, embed_dim=8, stage_depths=(1, 1, 1, 1), stage_heads=(1, 2, 2, 4),
            decoder_depths=(1, 1, 1, 1), window_size=2, num_classes=2)


def full_model_gradcheck(seed: int, entries_per_param: int = 2) -> float:
    """Worst relative error over sampled entries of every parameter of a tiny model."""
    from .config import ModelConfig
    from .decoder import MTLModel

    rng = np.random.default_rng(seed)
    with T.check_mode():
        model = MTLModel(ModelConfig(seed=seed, **TINY)).astype(np.float64)
        # nonzero generic params everywhere (LayerNorm gains/biases included)
        for p in model.parameters():
            p.data = p.data + 0.05 * rng.standard_normal(p.shape)
        img = rng.random((1, 16, 16, 3))
        labels = rng.integers(0, 2, (1, 16, 16))
        gt = rng.random((1, 16, 16, 1))

        def loss_fn():
            out = model(img)
            return T.cross_entropy(out.seg_logits, labels) + T.mean(T.abs_(out.depth - Tensor(gt)))

        grads = T.backward(loss_fn())
        worst = 0.0
        for name, p in model.named_parameters():
            idx = [tuple(rng.integers(0, s) for s in p.shape) for _ in range(entries_per_param)]
            num = numeric_grad(lambda: loss_fn().item(), p.data, 1e-4, idx)
            worst = max(worst, rel_error(grads[name], num))
        return worst

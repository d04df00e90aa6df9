"""Losses, GradNorm task weighting, AdamW, the lr schedule, checkpoints, training.

One training step, with DTA enabled:

1. real batch forward (supervised); the DTA stage output is kept as real tokens
2. comics batch forward up to the DTA stage, no graph, with the real stream's
   block inputs injected at their transferability
3. discriminator update on detached tokens
4. generator + backbone update on w_seg*L_CE + w_depth*L_depth + adv*loss_G
5. GradNorm update of (w_seg, w_depth) from gradient norms on the last
   encoder block

Without DTA steps 2-3 and the adversarial term disappear.
"""

from __future__ import annotations

import json
import math
import struct
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .data import IGNORE, Sample, hue_rotation_matrix, stack
from .decoder import MTLModel
from .dta import Domain, TokenBatch, token_adv_loss
from .encoder import DTAContext
from .tensor import ContractError, Tensor


class NumericAbort(RuntimeError):
    def __init__(self, report: dict):
        super().__init__(f"non-finite loss at step {report.get('step')}: {report}")
        self.report = report


class CheckpointError(ValueError):
    pass


# -- losses --------------------------------------------------------------------

def ce_seg_loss(seg_logits: Tensor, labels: np.ndarray, ignore_label: int = IGNORE) -> tuple[Tensor, bool]:
    """(mean cross-entropy over non-ignored pixels, empty flag).

    Takes logits rather than probabilities so the log-softmax stays fused.
    """
    empty = not np.any(np.asarray(labels) != ignore_label)
    if empty:
        warnings.warn("every pixel is ignored; segmentation loss set to 0", RuntimeWarning)
    return T.cross_entropy(seg_logits, labels, ignore_label), empty


def _masked_mean(err: Tensor, mask: np.ndarray) -> Tensor:
    m = np.broadcast_to(np.asarray(mask, dtype=err.dtype), err.shape)
    return T.scale(T.sum_(err * Tensor(m)), 1.0 / m.sum())


def _l1(pred: Tensor, gt: Tensor, mask) -> Tensor:
    return _masked_mean(T.abs_(pred - gt), mask)


def _l2(pred: Tensor, gt: Tensor, mask) -> Tensor:
    d = pred - gt
    return _masked_mean(d * d, mask)


DEPTH_LOSSES = {"l1": _l1, "l2": _l2}


def depth_loss(pred: Tensor, gt, valid_mask=None, kind: str = "l1") -> tuple[Tensor, bool]:
    """(masked depth loss, empty flag); ``kind`` picks from ``DEPTH_LOSSES``."""
    gt = T.as_tensor(gt, pred)
    mask = np.ones(pred.shape, bool) if valid_mask is None else np.asarray(valid_mask, bool)
    if not mask.any():
        warnings.warn("depth mask is empty; depth loss set to 0", RuntimeWarning)
        return T.scale(T.sum_(pred), 0.0), True
    try:
        fn = DEPTH_LOSSES[kind]
    except KeyError:
        raise ContractError(f"unknown depth loss {kind!r}; have {sorted(DEPTH_LOSSES)}") from None
    return fn(pred, gt, mask), False


@dataclass
class LossWeights:
    w_seg: float = 1.0
    w_depth: float = 1.0

    def __post_init__(self):
        if not (self.w_seg > 0 and self.w_depth > 0):
            raise ContractError(f"loss weights must be positive, got {self}")

    def as_array(self) -> np.ndarray:
        return np.array([self.w_seg, self.w_depth])


def mtl_loss(l_ce: Tensor, l_depth: Tensor, w: LossWeights) -> Tensor:
    # weights enter as constants: no gradient flows into them from here
    return T.scale(l_ce, w.w_seg) + T.scale(l_depth, w.w_depth)


# -- GradNorm --------------------------------------------------------------------

@dataclass
class GradNormState:
    alpha: float = 1.5
    lr: float = 0.025
    initial: np.ndarray | None = None  # L_i(0), frozen at the first step
    min_weight: float = 1e-4


def task_grad_norms(losses, shared_params) -> np.ndarray:
    """||d L_i / d shared|| for each task loss, walking only the needed subgraph."""
    out = []
    for loss in losses:
        gs = T.grad(loss, shared_params)
        out.append(math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in gs)))
    return np.array(out)


def gradnorm_step(state: GradNormState, w: LossWeights, l_ce, l_depth,
                  shared_params=None, norms=None) -> tuple[LossWeights, dict]:
    """One update of the task weights; returns (new weights, diagnostics).

    With G_i = w_i * ||grad L_i|| on the shared layer, r_i the relative
    inverse training rate and target_i = mean(G) * r_i**alpha held constant,
    the weight loss sum_i |G_i - target_i| has gradient
    sign(G_i - target_i) * ||grad L_i|| in w_i.
    """
    losses = np.array([float(getattr(l, "data", l)) for l in (l_ce, l_depth)])
    if norms is None:
        norms = task_grad_norms([l_ce, l_depth], shared_params)
    norms = np.asarray(norms, np.float64)
    if state.initial is None:
        state.initial = losses.copy()
    ratio = np.where(state.initial > 0, losses / np.where(state.initial > 0, state.initial, 1.0), 1.0)
    r = ratio / ratio.mean() if ratio.mean() > 0 else np.ones_like(ratio)
    wv = w.as_array()
    g = wv * norms
    target = g.mean() * r ** state.alpha
    wv = np.maximum(wv - state.lr * np.sign(g - target) * norms, state.min_weight)
    wv = wv * (len(wv) / wv.sum())
    return LossWeights(float(wv[0]), float(wv[1])), {"G_seg": float(g[0]), "G_depth": float(g[1])}


# -- optimiser and schedule ------------------------------------------------------------

def adamw_step(p: np.ndarray, g: np.ndarray, m: np.ndarray, v: np.ndarray, t: int, lr: float,
               betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0):
    """Decoupled-decay Adam update at step ``t`` (1-based); returns (p, m, v)."""
    b1, b2 = betas
    m = b1 * m + (1 - b1) * g
    v = b2 * v + (1 - b2) * g * g
    mhat = m / (1 - b1 ** t)
    vhat = v / (1 - b2 ** t)
    p = p * (1 - lr * weight_decay) - lr * mhat / (np.sqrt(vhat) + eps)
    return p.astype(g.dtype, copy=False), m.astype(g.dtype, copy=False), v.astype(g.dtype, copy=False)


class AdamW:
    """AdamW over named parameters; moments keyed by parameter name."""

    def __init__(self, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.01):
        self.betas, self.eps, self.weight_decay = betas, eps, weight_decay
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params, grads, lr: float) -> None:
        if len(params) != len(grads):
            raise ContractError(f"{len(params)} params but {len(grads)} grads")
        self.t += 1
        for p, g in zip(params, grads):
            m = self.m.get(p.name)
            if m is None:
                m = np.zeros_like(p.data)
                v = np.zeros_like(p.data)
            else:
                v = self.v[p.name]
            p.data, self.m[p.name], self.v[p.name] = adamw_step(
                p.data, g, m, v, self.t, lr, self.betas, self.eps, self.weight_decay)


def clip_grad_norm(grads, max_norm: float) -> tuple[list[np.ndarray], float]:
    """Scale all gradients jointly so their global L2 norm is at most ``max_norm``.

    Returns (grads, norm before clipping). ``max_norm <= 0`` disables clipping.
    """
    norm = float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads)))
    if max_norm <= 0 or norm <= max_norm:
        return list(grads), norm
    k = max_norm / (norm + 1e-12)
    return [(g * k).astype(g.dtype, copy=False) for g in grads], norm


def warmup_cosine_lr(step: int, total_steps: int, base_lr: float, warmup_steps: int) -> float:
    if step < 0:
        raise ContractError("step must be non-negative")
    if warmup_steps > 0 and step < warmup_steps:
        return base_lr * step / warmup_steps
    span = max(total_steps - warmup_steps, 1)
    frac = min((step - warmup_steps) / span, 1.0)
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * frac))


# -- checkpoints -------------------------------------------------------------------
#
# Little-endian container: b"PFCK", uint32 version, then records until EOF:
#   uint32 name length, name (utf-8), uint32 rank, rank x uint32 extents,
#   prod(extents) float32 values.
# Adam moments live under "__adam_m__." / "__adam_v__." prefixes, scalars and
# the model configuration (as utf-8 code units) under "__meta__.".

MAGIC = b"PFCK"
FORMAT_VERSION = 1
M_PREFIX, V_PREFIX, META_PREFIX = "__adam_m__.", "__adam_v__.", "__meta__."


def write_pfck(path, records: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<I", FORMAT_VERSION))
        for name, arr in records.items():
            arr = np.asarray(arr)
            key = name.encode()
            fh.write(struct.pack("<I", len(key)) + key)
            fh.write(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_pfck(path) -> dict[str, np.ndarray]:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"{path}: {exc}") from exc
    if buf[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a PFCK checkpoint")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {version}, this build reads {FORMAT_VERSION}")
    out, pos = {}, 8
    try:
        while pos < len(buf):
            (n,) = struct.unpack_from("<I", buf, pos)
            name = buf[pos + 4:pos + 4 + n].decode()
            pos += 4 + n
            (rank,) = struct.unpack_from("<I", buf, pos)
            shape = struct.unpack_from(f"<{rank}I", buf, pos + 4)
            pos += 4 + 4 * rank
            count = int(np.prod(shape, dtype=np.int64))
            arr = np.frombuffer(buf, "<f4", count, pos).reshape(shape)
            pos += 4 * count
            out[name] = arr.astype(np.float32)
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: truncated or corrupt record near byte {pos}") from exc
    return out


def _text_record(s: str) -> np.ndarray:
    return np.frombuffer(s.encode(), np.uint8).astype(np.float32)


def _record_text(a: np.ndarray) -> str:
    return a.astype(np.uint8).tobytes().decode()


@dataclass
class TrainState:
    model: MTLModel
    opt: AdamW
    opt_disc: AdamW
    weights: LossWeights = field(default_factory=LossWeights)
    gradnorm: GradNormState = field(default_factory=GradNormState)
    step: int = 0
    epoch: int = 0


def save_checkpoint(path, st: TrainState) -> None:
    rec = dict(st.model.state_dict())
    for opt in (st.opt, st.opt_disc):
        rec.update({M_PREFIX + k: v for k, v in opt.m.items()})
        rec.update({V_PREFIX + k: v for k, v in opt.v.items()})
    gn0 = st.gradnorm.initial if st.gradnorm.initial is not None else np.full(2, np.nan)
    rec.update({
        META_PREFIX + "step": np.array([st.step, st.epoch]),
        META_PREFIX + "opt_t": np.array([st.opt.t, st.opt_disc.t]),
        META_PREFIX + "loss_weights": st.weights.as_array(),
        META_PREFIX + "gradnorm_initial": gn0,
        META_PREFIX + "model_config": _text_record(config_text(st.model.cfg)),
    })
    write_pfck(path, rec)


def config_text(cfg: ModelConfig) -> str:
    return ";".join(f"{k}={v}" for k, v in cfg.to_dict().items())


def load_model(path) -> MTLModel:
    """Rebuild the model from a checkpoint's stored configuration and weights."""
    from .config import parse_value

    rec = read_pfck(path)
    key = META_PREFIX + "model_config"
    if key not in rec:
        raise CheckpointError(f"{path}: no model configuration record")
    fields = dict(kv.split("=", 1) for kv in _record_text(rec[key]).split(";"))
    cfg = ModelConfig(**{k: parse_value(v) for k, v in fields.items()})
    model = MTLModel(cfg)
    restore(path, model, rec=rec)
    return model


def restore(path, model: MTLModel, st: TrainState | None = None, rec=None) -> None:
    rec = read_pfck(path) if rec is None else rec
    params = {k: v for k, v in rec.items() if not k.startswith(("__",))}
    try:
        model.load_state_dict(params)
    except (KeyError, T.DimensionError) as exc:
        raise CheckpointError(f"{path} (format v{FORMAT_VERSION}) does not fit this model: {exc}") from exc
    if st is None:
        return
    disc = {p.name for p in model.disc_parameters()}
    for k, v in rec.items():
        for prefix, slot in ((M_PREFIX, "m"), (V_PREFIX, "v")):
            if k.startswith(prefix):
                name = k[len(prefix):]
                getattr(st.opt_disc if name in disc else st.opt, slot)[name] = v.copy()
    st.step, st.epoch = (int(x) for x in rec[META_PREFIX + "step"])
    st.opt.t, st.opt_disc.t = (int(x) for x in rec[META_PREFIX + "opt_t"])
    w = rec[META_PREFIX + "loss_weights"]
    st.weights = LossWeights(float(w[0]), float(w[1]))
    gn0 = rec[META_PREFIX + "gradnorm_initial"]
    st.gradnorm.initial = None if np.isnan(gn0).any() else gn0.astype(np.float64)


# -- training loop ---------------------------------------------------------------

@dataclass
class HyperParams:
    lr: float = 5e-5
    warmup_steps: int = 2000
    epochs: int = 20
    batch_size: int = 4
    seed: int = 0
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    adv_weight: float = 0.1
    gradnorm: bool = True
    gradnorm_alpha: float = 1.5
    gradnorm_lr: float = 0.025
    depth_loss: str = "l1"
    ignore_index: int = IGNORE
    checkpoint_every: int = 1  # epochs
    grad_clip: float = 0.0  # global gradient-norm bound, 0 disables
    augment: bool = False  # flip / shift / hue jitter of the real batch

    @classmethod
    def toy(cls, **overrides) -> "HyperParams":
        """Settings used for the synthetic reference run."""
        base = dict(lr=1e-3, warmup_steps=200, epochs=20, batch_size=4, grad_clip=1.0,
                    augment=True)
        base.update(overrides)
        return cls(**base)


@dataclass
class TrainStepReport:
    step: int
    epoch: int
    lr: float
    L_CE: float
    L_depth: float
    L_MTL: float
    w_seg: float
    w_depth: float
    G_seg: float
    G_depth: float
    loss_D: float | None = None
    loss_G: float | None = None

    def as_dict(self) -> dict:
        d = asdict(self)
        if self.loss_D is None:
            del d["loss_D"], d["loss_G"]
        return d


@dataclass
class TrainResult:
    model: MTLModel
    reports: list
    checkpoints: list
    state: TrainState


def _batches(n: int, size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[i:i + size] for i in range(0, n, size)]


def augment_batch(rng: np.random.Generator, imgs, labels, depth, valid, max_shift: int = 8):
    """Random horizontal flip, translation (edge padded) and hue rotation per sample.

    Geometry is applied to every plane alike so supervision stays aligned;
    the hue rotation touches the image only.
    """
    imgs, labels, depth, valid = (np.array(a) for a in (imgs, labels, depth, valid))
    b, h, w = labels.shape
    for i in range(b):
        flip = rng.random() < 0.5
        dy, dx = rng.integers(-max_shift, max_shift + 1, 2)
        rot = hue_rotation_matrix(rng.uniform(0.0, 360.0))
        for a in (imgs, labels, depth, valid):
            x = a[i][:, ::-1] if flip else a[i]
            pad = ((max_shift, max_shift), (max_shift, max_shift)) + ((0, 0),) * (x.ndim - 2)
            x = np.pad(x, pad, mode="edge")
            a[i] = x[max_shift - dy:max_shift - dy + h, max_shift - dx:max_shift - dx + w]
        imgs[i] = np.clip(imgs[i] @ rot.T.astype(imgs.dtype), 0.0, 1.0)
    return imgs, labels, depth, valid


def train_loop(train_real: list[Sample], cfg: ModelConfig, hyper: HyperParams,
               train_comics: list[Sample] | None = None, out_dir=None,
               on_epoch=None) -> TrainResult:
    """Train from scratch; writes checkpoints and the step stream when ``out_dir`` is set.

    ``on_epoch(epoch, model)`` may return a dict that is appended to
    ``epochs.jsonl`` (used for validation curves).
    """
    if not train_real:
        raise ContractError("no real training samples")
    if cfg.dta_enabled and not train_comics:
        raise ContractError("DTA training needs comics images")
    model = MTLModel(cfg)
    betas = (hyper.beta1, hyper.beta2)
    st = TrainState(model, AdamW(betas, hyper.eps, hyper.weight_decay),
                    AdamW(betas, hyper.eps, 0.0), LossWeights(),
                    GradNormState(hyper.gradnorm_alpha, hyper.gradnorm_lr))
    rng = np.random.default_rng(hyper.seed)
    steps_per_epoch = math.ceil(len(train_real) / hyper.batch_size)
    total = steps_per_epoch * hyper.epochs
    task_params = model.task_parameters()
    disc_params = model.disc_parameters()
    shared = model.encoder.shared_block().parameters()

    out = Path(out_dir) if out_dir is not None else None
    log = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log = open(out / "train_steps.jsonl", "w")
    reports, ckpts = [], []
    comics_cursor = 0
    comics_order = rng.permutation(len(train_comics)) if cfg.dta_enabled else None
    try:
        for epoch in range(1, hyper.epochs + 1):
            st.epoch = epoch
            for idx in _batches(len(train_real), hyper.batch_size, rng):
                imgs, labels, depth, valid = stack([train_real[i] for i in idx])
                if hyper.augment:
                    imgs, labels, depth, valid = augment_batch(rng, imgs, labels, depth, valid)
                lr = warmup_cosine_lr(st.step, total, hyper.lr, hyper.warmup_steps)
                cap = [] if cfg.dta_enabled else None
                pred = model(imgs, capture=cap)
                l_ce, _ = ce_seg_loss(pred.seg_logits, labels, hyper.ignore_index)
                l_dep, _ = depth_loss(pred.depth, depth[..., None], valid[..., None], hyper.depth_loss)
                w = st.weights
                l_mtl = mtl_loss(l_ce, l_dep, w)
                total_loss = l_mtl
                loss_d = loss_g = None

                if cfg.dta_enabled:
                    take = [comics_order[(comics_cursor + j) % len(comics_order)]
                            for j in range(len(idx))]
                    comics_cursor += len(idx)
                    c_imgs = np.stack([train_comics[i].image for i in take])
                    comics = TokenBatch.from_grid(_comics_tokens(model, c_imgs, cap), Domain.COMICS)
                    real = pred.pyramid.levels[cfg.dta_stage - 1]
                    ld, _ = token_adv_loss(comics, TokenBatch.from_grid(real.detach(), Domain.REAL),
                                           model.dta)
                    if not np.isfinite(ld.item()):
                        _abort(log, st, lr, l_ce, l_dep, l_mtl, w, ld.item())
                    st.opt_disc.step(disc_params, T.grad(ld, disc_params), lr)
                    # generator term against the freshly updated discriminator
                    _, lg = token_adv_loss(comics, TokenBatch.from_grid(real, Domain.REAL), model.dta)
                    loss_d, loss_g = ld.item(), lg.item()
                    total_loss = l_mtl + T.scale(lg, hyper.adv_weight)

                if not np.isfinite(total_loss.item()):
                    _abort(log, st, lr, l_ce, l_dep, l_mtl, w, loss_d)
                if hyper.gradnorm:
                    norms = task_grad_norms([l_ce, l_dep], shared)
                    new_w, diag = gradnorm_step(st.gradnorm, w, l_ce, l_dep, norms=norms)
                else:
                    new_w, diag = w, {"G_seg": 0.0, "G_depth": 0.0}
                grads, _ = clip_grad_norm(T.grad(total_loss, task_params), hyper.grad_clip)
                st.opt.step(task_params, grads, lr)

                rep = TrainStepReport(st.step, epoch, lr, l_ce.item(), l_dep.item(), l_mtl.item(),
                                      w.w_seg, w.w_depth, diag["G_seg"], diag["G_depth"],
                                      loss_d, loss_g)
                reports.append(rep)
                if log is not None:
                    log.write(json.dumps(rep.as_dict()) + "\n")
                st.weights = new_w
                st.step += 1

            if out is not None and (epoch % hyper.checkpoint_every == 0 or epoch == hyper.epochs):
                path = out / f"epoch_{epoch:03d}.pfck"
                save_checkpoint(path, st)
                ckpts.append(path)
            if on_epoch is not None:
                extra = on_epoch(epoch, model)
                if extra is not None and out is not None:
                    with open(out / "epochs.jsonl", "a") as fh:
                        fh.write(json.dumps({"epoch": epoch, **extra}) + "\n")
        if out is not None:
            save_checkpoint(out / "final.pfck", st)
            ckpts.append(out / "final.pfck")
    finally:
        if log is not None:
            log.close()
    return TrainResult(model, reports, ckpts, st)


def _abort(log, st: TrainState, lr, l_ce, l_dep, l_mtl, w, loss_d=None):
    rep = {"step": st.step, "epoch": st.epoch, "lr": lr, "L_CE": l_ce.item(),
           "L_depth": l_dep.item(), "L_MTL": l_mtl.item(), "w_seg": w.w_seg,
           "w_depth": w.w_depth, "loss_D": loss_d, "abort": "non-finite loss"}
    if log is not None:
        log.write(json.dumps(rep) + "\n")
    raise NumericAbort(rep)


def _comics_tokens(model: MTLModel, comics_imgs, real_block_inputs) -> Tensor:
    """Comics stream up to the DTA stage, real block inputs injected; no graph."""
    with T.no_grad():
        ctxs = [DTAContext(tok.detach(), model.dta.token_transferability(tok))
                for tok in real_block_inputs]
        return model.encode(comics_imgs, dta_ctxs=ctxs, stop_after=model.cfg.dta_stage).levels[-1]

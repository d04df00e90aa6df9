"""Command-line front end: synth, train, eval, predict, retarget.

Run configuration is a flat ``key = value`` file. Blank lines and lines
starting with ``#`` are skipped; values are Python literals or bare words.
Keys:

    model.preset            toy | paper (applied before other model.* keys)
    model.<field>           any ModelConfig field
    train.<field>           any HyperParams field (defaults follow the preset)
    data.manifest           manifest path; when absent a synthetic set is built
    data.synth_seed         synthetic dataset seed
    data.synth_train        real training samples (and as many comics images)
    data.synth_val          comics validation samples
    out                     run directory

``--set key=value`` and the dedicated flags override the file. Every run
writes the fully resolved configuration to ``<out>/config.txt``.

Exit status: 0 ok, 2 configuration error, 3 data error, 4 numeric abort.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .config import ConfigError, ModelConfig, parse_value
from .data import (
    DatasetManifest, IngestionError, Sample, read_depth, read_image, read_labels, toy_splits,
    write_dataset, write_depth, write_image, write_labels,
)
from .training import CheckpointError, HyperParams, NumericAbort, load_model, train_loop

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


@dataclass
class DataSpec:
    manifest: str | None = None
    synth_seed: int = 0
    synth_train: int = 400
    synth_val: int = 100


@dataclass
class RunConfig:
    preset: str = "toy"
    model: dict = field(default_factory=dict)  # explicit ModelConfig overrides
    train: dict = field(default_factory=dict)  # explicit HyperParams overrides
    data: DataSpec = field(default_factory=DataSpec)
    out: str = "runs/default"

    def model_config(self) -> ModelConfig:
        if self.preset not in ("toy", "paper"):
            raise ConfigError(f"unknown model preset {self.preset!r}")
        return getattr(ModelConfig, self.preset)(**self.model)

    def hyper(self) -> HyperParams:
        """The toy preset trains with HyperParams.toy(); the paper preset with the defaults."""
        base = HyperParams.toy() if self.preset == "toy" else HyperParams()
        return replace(base, **self.train)

    def resolved_lines(self) -> list[str]:
        lines = [f"model.preset = {self.preset}"]
        lines += [f"model.{k} = {v}" for k, v in self.model_config().to_dict().items()]
        hyper = self.hyper()
        lines += [f"train.{f.name} = {getattr(hyper, f.name)}" for f in fields(HyperParams)]
        lines += [f"data.{f.name} = {getattr(self.data, f.name)}" for f in fields(DataSpec)]
        lines.append(f"out = {self.out}")
        return lines


_MODEL_KEYS = {f.name for f in fields(ModelConfig)}
_TRAIN_KEYS = {f.name: f for f in fields(HyperParams)}
_DATA_KEYS = {f.name for f in fields(DataSpec)}


def apply_setting(cfg: RunConfig, key: str, raw: str, where: str = "") -> None:
    loc = f"{where}: " if where else ""
    key = key.strip()
    value = parse_value(raw)
    section, _, name = key.partition(".")
    if key == "out":
        cfg.out = str(raw).strip()
    elif section == "model" and name == "preset":
        cfg.preset = str(value)
    elif section == "model" and name in _MODEL_KEYS:
        cfg.model[name] = value
    elif section == "train" and name in _TRAIN_KEYS:
        cur = getattr(HyperParams(), name)
        if isinstance(cur, bool) and not isinstance(value, bool):
            raise ConfigError(f"{loc}{key} expects true/false, got {raw.strip()!r}")
        if isinstance(cur, (int, float)) and not isinstance(value, (int, float)):
            raise ConfigError(f"{loc}{key} expects a number, got {raw.strip()!r}")
        if type(cur) is int and value != int(value):
            raise ConfigError(f"{loc}{key} expects an integer, got {raw.strip()!r}")
        cfg.train[name] = type(cur)(value) if not isinstance(cur, bool) else value
    elif section == "data" and name in _DATA_KEYS:
        setattr(cfg.data, name, None if value is None else (str(raw).strip() if name == "manifest" else value))
    else:
        raise ConfigError(f"{loc}unknown key {key!r}")


def parse_config_text(text: str, source: str = "<config>", cfg: RunConfig | None = None) -> RunConfig:
    cfg = cfg or RunConfig()
    for no, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{no}: expected key = value, got {line!r}")
        key, raw = line.split("=", 1)
        apply_setting(cfg, key, raw, f"{source}:{no}")
    return cfg


def load_run_config(path=None, overrides=()) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        parse_config_text(text, str(path), cfg)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        apply_setting(cfg, key, raw, "--set")
    cfg.model_config()  # validate early
    return cfg


def write_resolved(cfg: RunConfig, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "config.txt"
    path.write_text("\n".join(cfg.resolved_lines()) + "\n")
    return path


# -- commands --------------------------------------------------------------------

def cmd_synth(args) -> int:
    sp = toy_splits(args.seed, args.count, args.val_count)
    m = write_dataset(args.out, {"train": sp.train_real + sp.train_comics, "val": sp.val_comics})
    print(f"wrote {len(m.entries)} samples to {Path(args.out) / 'manifest.tsv'}")
    return EXIT_OK


def _training_data(spec: DataSpec):
    if spec.manifest:
        m = DatasetManifest.read(spec.manifest)
        return m.load_split("train", "real"), m.load_split("train", "comics")
    sp = toy_splits(spec.synth_seed, spec.synth_train, spec.synth_val)
    return sp.train_real, sp.train_comics


def cmd_train(args) -> int:
    overrides = list(args.set or [])
    if args.dta is not None:
        overrides.append(f"model.dta_enabled={args.dta}")
    if args.epochs is not None:
        overrides.append(f"train.epochs={args.epochs}")
    if args.out is not None:
        overrides.append(f"out={args.out}")
    cfg = load_run_config(args.config, overrides)
    model_cfg = cfg.model_config()
    write_resolved(cfg, cfg.out)
    real, comics = _training_data(cfg.data)
    res = train_loop(real, model_cfg, cfg.hyper(), comics, out_dir=cfg.out)
    last = res.reports[-1].as_dict() if res.reports else {}
    print(f"trained {len(res.reports)} steps; final checkpoint {res.checkpoints[-1]}")
    print(json.dumps(last))
    return EXIT_OK


def _eval_samples(args) -> list[Sample]:
    if args.manifest:
        m = DatasetManifest.read(args.manifest)
        return m.load_split(args.split, args.domain)
    sp = toy_splits(args.synth_seed, 0, args.synth_val)
    return sp.val_comics


def cmd_eval(args) -> int:
    from .metrics import evaluate

    samples = _eval_samples(args)
    if not samples:
        raise IngestionError(f"split {args.split!r} holds no samples")
    rows = []
    for ck in args.checkpoint:
        model = load_model(ck)
        rows.append(evaluate(model, samples, args.split, args.method, args.scale_m).as_dict())
    print(f"{'method':<14}{'dta':<7}{'mIoU%':>9}{'RMSE':>10}")
    for r in rows:
        print(f"{r['method']:<14}{str(r['dta']).lower():<7}{r['miou_percent']:>9.2f}{r['rmse']:>10.4f}")
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        with open(args.out, "w") as fh:
            for r in rows:
                fh.write(json.dumps(r) + "\n")
    return EXIT_OK


def cmd_predict(args) -> int:
    from .decoder import predict

    model = load_model(args.checkpoint)
    img = read_image(args.image)
    probs, depth = predict(model, img[None])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_labels(out / "seg.png", np.argmax(probs[0], -1).astype(np.uint8))
    write_depth(out / "depth.png", depth[0])
    print(f"wrote {out / 'seg.png'} and {out / 'depth.png'}")
    return EXIT_OK


def _parse_weights(text: str | None) -> tuple:
    if not text:
        return ()
    try:
        return tuple(float(x) for x in text.split(","))
    except ValueError:
        raise ConfigError(f"--weights expects comma-separated numbers, got {text!r}") from None


def cmd_retarget(args) -> int:
    from .retarget import RetargetConfig, retarget

    img = read_image(args.image)
    weights = _parse_weights(args.weights)
    probs = depth = None
    if args.pred_dir:
        labels = read_labels(Path(args.pred_dir) / "seg.png")
        depth, _ = read_depth(Path(args.pred_dir) / "depth.png")
        k = len(weights) if weights else int(labels.max()) + 1
        if labels.max() >= k:
            raise ConfigError(f"prediction holds class {labels.max()} but only {k} weights")
        probs = np.eye(k)[labels]
    elif args.checkpoint:
        from .decoder import predict

        p, d = predict(load_model(args.checkpoint), img[None])
        probs, depth = p[0], d[0]
    elif weights or args.depth_weight:
        raise ConfigError("guidance weights need --pred-dir or --checkpoint")
    h, w = img.shape[:2]
    cfg = RetargetConfig(args.width or w, args.height or h, weights, args.depth_weight, args.base_weight)
    out = retarget(img, probs, depth, cfg)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_image(args.out, out)
    print(f"wrote {args.out} ({out.shape[0]}x{out.shape[1]})")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="comicmtl", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a synthetic dataset and manifest")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--count", type=int, default=400, help="samples per style in the train split")
    s.add_argument("--val-count", type=int, default=100)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_synth)

    s = sub.add_parser("train", help="train a model")
    s.add_argument("--config")
    s.add_argument("--set", action="append", metavar="KEY=VALUE")
    s.add_argument("--dta", choices=["true", "false"])
    s.add_argument("--epochs", type=int)
    s.add_argument("--out")
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("eval", help="evaluate one or more checkpoints")
    s.add_argument("--checkpoint", action="append", required=True)
    s.add_argument("--manifest")
    s.add_argument("--split", default="val")
    s.add_argument("--domain", choices=["real", "comics"])
    s.add_argument("--synth-seed", type=int, default=0)
    s.add_argument("--synth-val", type=int, default=100)
    s.add_argument("--method", default="MTL")
    s.add_argument("--scale-m", type=float, default=1.0)
    s.add_argument("--out", help="write report rows as JSON lines")
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("predict", help="segmentation and depth PNGs for one image")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--image", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_predict)

    s = sub.add_parser("retarget", help="shrink an image with guided seam carving")
    s.add_argument("--image", required=True)
    g = s.add_mutually_exclusive_group()
    g.add_argument("--pred-dir")
    g.add_argument("--checkpoint")
    s.add_argument("--width", type=int)
    s.add_argument("--height", type=int)
    s.add_argument("--weights", help="per-class weights, e.g. 0,5,5,5")
    s.add_argument("--depth-weight", type=float, default=0.0)
    s.add_argument("--base-weight", type=float, default=1.0)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_retarget)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (IngestionError, CheckpointError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericAbort as exc:
        print(f"numeric abort: {json.dumps(exc.report)}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())

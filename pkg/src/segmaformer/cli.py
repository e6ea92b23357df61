"""Command-line interface: ``segmaformer {gen-data,train,eval,grad-check,count}``.

Exit codes: 0 success, 1 failed gradient check, 2 configuration error,
3 numeric divergence, 4 I/O or data error.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import complexity, gradsuite
from .errors import CheckpointError, ConfigError, DataError, DivergenceError, NumericError
from .network import ModelConfig, SegMaFormer, load_checkpoint
from .training.data import SyntheticDataSpec, generate_synthetic
from .training.loop import METRICS_NAME, TrainConfig, predict, train
from .training.losses import dice_score, region_dice
from .volume_io import read_svf, write_svf

log = logging.getLogger("segmaformer")

EXIT_OK, EXIT_GRAD_FAIL, EXIT_CONFIG, EXIT_DIVERGED, EXIT_IO = 0, 1, 2, 3, 4
CONFIG_NAME = "config.json"
MANIFEST_NAME = "manifest.json"


@dataclass
class PathsConfig:
    out: str | None = None


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: SyntheticDataSpec = field(default_factory=SyntheticDataSpec)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def validate(self) -> None:
        if self.model.in_channels != self.data.channels:
            raise ConfigError(
                f"model expects {self.model.in_channels} channels, data has {self.data.channels}", "model.in_channels"
            )
        if self.model.num_classes != self.data.num_classes:
            raise ConfigError(
                f"model predicts {self.model.num_classes} classes, data has {self.data.num_classes}",
                "model.num_classes",
            )
        self.model.stage_grids((self.data.extent,) * 3)

    def to_dict(self) -> dict[str, Any]:
        return {
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
            "data": self.data.to_dict(),
            "paths": {"out": self.paths.out},
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object", "<root>")
        for key in d:
            if key not in ("model", "train", "data", "paths"):
                raise ConfigError("unknown key", key)
        paths = d.get("paths", {})
        for key in paths:
            if key != "out":
                raise ConfigError("unknown key", f"paths.{key}")
        try:
            cfg = cls(
                model=ModelConfig.from_dict(d.get("model", {})),
                train=TrainConfig.from_dict(d.get("train", {})),
                data=SyntheticDataSpec.from_dict(d.get("data", {})),
                paths=PathsConfig(**paths),
            )
        except TypeError as exc:  # wrong value types inside a section
            raise ConfigError(str(exc), "<root>") from exc
        cfg.validate()
        return cfg


def _parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(raw: dict[str, Any], overrides: Sequence[str]) -> dict[str, Any]:
    """Apply ``section.key=value`` overrides (values parsed as JSON when possible)."""
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value", item)
        dotted, value = item.split("=", 1)
        parts = dotted.split(".")
        node = raw
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError("cannot override inside a non-object", dotted)
        node[parts[-1]] = _parse_value(value)
    return raw


def load_run_config(path: str | None, overrides: Sequence[str] = ()) -> RunConfig:
    raw: dict[str, Any] = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON: {exc}", str(path)) from exc
    return RunConfig.from_dict(apply_overrides(raw, overrides))


def write_config(cfg: RunConfig, out_dir: Path) -> None:
    (out_dir / CONFIG_NAME).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _out_dir(arg: str | None, cfg: RunConfig) -> Path:
    out = arg or cfg.paths.out
    if out is None:
        raise ConfigError("no output directory given (--out or paths.out)", "paths.out")
    cfg.paths.out = str(out)
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


# ------------------------------------------------------------------ commands
def cmd_gen_data(args) -> int:
    cfg = load_run_config(args.config, args.set)
    out = _out_dir(args.out, cfg)
    spec = cfg.data
    items = []
    for i in range(args.start, args.start + args.count):
        vol, lbl = generate_synthetic(spec, i)
        vname, lname = f"volume_{i:05d}.svf", f"label_{i:05d}.svf"
        write_svf(out / vname, vol)
        write_svf(out / lname, lbl)
        items.append({"index": i, "seed": [spec.seed, i], "volume": vname, "label": lname})
    manifest = {"data": spec.to_dict(), "items": items}
    (out / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    write_config(cfg, out)
    print(f"wrote {len(items)} volume/label pairs to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_run_config(args.config, args.set)
    out = _out_dir(args.out, cfg)
    write_config(cfg, out)
    model = SegMaFormer(cfg.model, seed=cfg.train.seed)

    def progress(step, lr, loss):
        if args.log_every and (step + 1) % args.log_every == 0:
            log.info("step %d/%d lr %.3e loss %.4f", step + 1, cfg.train.total_steps, lr, loss)

    try:
        history = train(model, cfg.train, cfg.data, out_dir=out, resume=args.resume, on_step=progress)
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    if history:
        last = history[-1]
        dice = [v for k, v in last.items() if k.startswith("dice_c")]
        score = f"mean foreground dice {np.mean(dice):.4f}" if cfg.train.eval_size else "no held-out evaluation"
        print(f"finished step {last['step'] + 1}: loss {last['loss']:.4f}, {score}")
    print(f"artifacts in {out}: {CONFIG_NAME}, checkpoint.smfc, optimizer.npz, {METRICS_NAME}")
    return EXIT_OK


def _load_dataset(data_dir: Path) -> tuple[np.ndarray, np.ndarray]:
    manifest_path = data_dir / MANIFEST_NAME
    if manifest_path.exists():
        items = json.loads(manifest_path.read_text(encoding="utf-8"))["items"]
        pairs = [(data_dir / it["volume"], data_dir / it["label"]) for it in items]
    else:
        pairs = [(v, data_dir / v.name.replace("volume_", "label_")) for v in sorted(data_dir.glob("volume_*.svf"))]
    if not pairs:
        raise DataError(f"no volumes found in {data_dir}")
    vols = np.stack([read_svf(v) for v, _ in pairs])
    lbls = np.stack([read_svf(lb) for _, lb in pairs])
    return vols, lbls


def eval_table(pred: np.ndarray, labels: np.ndarray, num_classes: int) -> list[tuple[str, float]]:
    """Per-class Dice rows plus the foreground average.

    Background is scored as its own class; foreground class ``k`` is scored on the nested
    region ``label >= k``.
    """
    rows = [("0", float(np.mean([dice_score(p, t, 0) for p, t in zip(pred, labels)])))]
    for k in range(1, num_classes):
        rows.append((str(k), float(np.mean([region_dice(p, t, k) for p, t in zip(pred, labels)]))))
    rows.append(("mean_foreground", float(np.mean([d for _, d in rows[1:]]))))
    return rows


def cmd_eval(args) -> int:
    model, meta = load_checkpoint(args.checkpoint)
    vols, lbls = _load_dataset(Path(args.data))
    if vols.shape[1] != model.config.in_channels:
        raise ConfigError(
            f"volumes have {vols.shape[1]} channels, checkpoint expects {model.config.in_channels}", "model.in_channels"
        )
    rows = eval_table(predict(model, vols, args.batch_size), lbls, model.config.num_classes)
    print(f"checkpoint {args.checkpoint} (step {meta.get('step', '?')}), {len(vols)} volumes")
    for name, d in rows:
        print(f"  class {name:>16}: dice {d:.4f}")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["class", "dice"])
    w.writerows([name, repr(d)] for name, d in rows)
    csv_path = Path(args.csv) if args.csv else Path(args.checkpoint).with_name("eval.csv")
    csv_path.write_text(buf.getvalue(), encoding="utf-8", newline="")
    return EXIT_OK


def cmd_grad_check(args) -> int:
    if args.module is not None and args.module not in gradsuite.MODULES:
        raise ConfigError(f"unknown module {args.module!r}; choose from {', '.join(gradsuite.MODULES)}", "--module")
    results = gradsuite.run_suite(
        module=args.module, variants=args.variants, tol=args.tol,
        on_result=lambda r: print(f"{r.module:10s} {r.case:22s} shape#{r.variant}  {r.report}"),
    )
    failed = [r for r in results if not r.report.passed]
    worst = max((r.report.max_rel_err for r in results), default=0.0)
    print(f"{len(results) - len(failed)}/{len(results)} checks passed (max rel. err {worst:.3e}, tol {args.tol:g})")
    return EXIT_OK if results and not failed else EXIT_GRAD_FAIL


def cmd_count(args) -> int:
    model_cfg = load_run_config(args.config, args.set).model if (args.config or args.set) else ModelConfig()
    report = complexity.count_flops(model_cfg, args.input_extent) if args.input_extent else complexity.count_params(
        model_cfg
    )
    print(report.to_text())
    print()
    print(complexity.summary(model_cfg, args.input_extent))
    extents = [int(e) for e in args.extents.split(",")]
    print()
    print(f"stage-1 scaling (Mamba vs. hypothetical attention) over cubic extents {extents}:")
    print(complexity.format_scaling(complexity.scaling_report(model_cfg, extents)))
    if args.csv:
        Path(args.csv).write_text(report.to_csv(), encoding="utf-8", newline="")
    return EXIT_OK


# ------------------------------------------------------------------ entry point
def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="segmaformer", description="Hybrid Mamba/attention 3D segmentation on numpy.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp, required=False):
        sp.add_argument("--config", required=required, help="JSON run config (model/train/data/paths)")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config field, e.g. train.total_steps=50 (repeatable)")

    g = sub.add_parser("gen-data", help="write synthetic phantoms as SVF pairs plus a manifest")
    with_config(g)
    g.add_argument("--out", help="output directory")
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--start", type=int, default=0, help="first phantom index")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train on synthetic phantoms")
    with_config(t)
    t.add_argument("--out", help="output directory (defaults to paths.out)")
    t.add_argument("--resume", action="store_true", help="continue from the checkpoint in --out")
    t.add_argument("--log-every", type=int, default=50)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="per-class Dice of a checkpoint on an SVF dataset")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True, help="directory written by gen-data")
    e.add_argument("--csv", help="CSV output path (default: eval.csv next to the checkpoint)")
    e.add_argument("--batch-size", type=int, default=2)
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("grad-check", help="finite-difference gradient suite")
    c.add_argument("--module", help=f"restrict to one group: {', '.join(gradsuite.MODULES)}")
    c.add_argument("--tol", type=float, default=1e-4)
    c.add_argument("--variants", type=int, default=3, help="randomized shapes per case")
    c.set_defaults(func=cmd_grad_check)

    n = sub.add_parser("count", help="parameter / FLOP report")
    with_config(n)
    n.add_argument("--input-extent", type=int, help="cubic input extent for FLOP counting, e.g. 128")
    n.add_argument("--extents", default="16,32,64", help="comma-separated extents for the scaling table")
    n.add_argument("--csv", help="also write module,params,flops CSV here")
    n.set_defaults(func=cmd_count)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (OSError, DataError, CheckpointError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())

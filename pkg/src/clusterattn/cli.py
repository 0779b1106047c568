"""Batch command-line entry point: train, eval, bench, visualize, gradcheck.

Every command is deterministic given its flags and config file; reruns
produce byte-identical artifacts apart from wall-time fields. Config files
are flat key=value text; unknown keys are rejected before anything is
written.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import bench as bn
from . import dataio
from . import tensor as tn
from .checkpoint import config_from_fields, load_checkpoint
from .encoder import ModelConfig, init_params, model_forward
from .errors import ConfigError, DataError
from .oracle import GradReport, model_grad_report, op_grad_reports
from .training import AdamConfig, evaluate, append_metrics_row, train_model

log = logging.getLogger(__name__)

TRAIN_KEYS = ("lr", "batch_size", "epochs")


@dataclass
class RunConfig:
    command: str
    config_path: str | None
    data: str | None
    epochs: int
    batch_size: int
    lr: float
    seed: int
    out_dir: str
    precision: str | None

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ConfigError("epochs must be >= 0, batch_size >= 1, lr > 0")


def read_kv_file(path) -> dict[str, str]:
    """Flat key=value text; blank lines and # comments ignored."""
    fields: dict[str, str] = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        fields[key.strip()] = value.strip()
    return fields


def load_configs(args) -> tuple[ModelConfig, RunConfig]:
    """Merge the config file with CLI flags (flags win) and validate."""
    fields = read_kv_file(args.config) if args.config else {}
    train_fields = {k: fields.pop(k) for k in list(fields) if k in TRAIN_KEYS}
    model_config = config_from_fields(fields)
    if args.seed is not None:
        model_config = replace(model_config, seed=args.seed)
    if getattr(args, "precision", None):
        model_config = replace(model_config, precision=args.precision)
    epochs = args.epochs if getattr(args, "epochs", None) is not None \
        else int(train_fields.get("epochs", 10))
    run = RunConfig(
        command=args.command,
        config_path=args.config,
        data=getattr(args, "data", None),
        epochs=epochs,
        batch_size=int(getattr(args, "batch_size", None)
                       or train_fields.get("batch_size", 4)),
        lr=float(getattr(args, "lr", None) or train_fields.get("lr", 1e-3)),
        seed=model_config.seed,
        out_dir=args.out,
        precision=model_config.precision,
    )
    return model_config, run


def _load_images(source: str, seed: int, config: ModelConfig):
    images, labels, names = dataio.load_dataset(source, seed, config.in_channels)
    if images.shape[1] != config.image_size or images.shape[2] != config.image_size:
        raise ConfigError(
            f"dataset images are {images.shape[1]}x{images.shape[2]} but the model "
            f"expects {config.image_size}x{config.image_size}")
    if len(names) > config.num_classes:
        raise ConfigError(
            f"dataset has {len(names)} classes but the model has {config.num_classes}")
    return images, labels, names


# ---------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    config, run = load_configs(args)
    if run.data is None:
        raise ConfigError("train requires --data (directory or synthetic:<spec>)")
    images, labels, names = _load_images(run.data, run.seed, config)
    out_dir = Path(run.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    model = init_params(config)
    result = train_model(model, images, labels, epochs=run.epochs,
                         batch_size=run.batch_size, seed=run.seed,
                         out_dir=out_dir, adam=AdamConfig(lr=run.lr))
    print(f"trained {run.epochs} epochs on {len(images)} samples "
          f"({', '.join(names)})")
    if result.final_top1 is not None:
        print(f"final train top1={result.final_top1:.4f} loss={result.final_loss:.4f}; "
              f"best top1={result.best_top1:.4f} at epoch {result.best_epoch}")
    print(f"wrote {out_dir / 'metrics.csv'}, {out_dir / 'final.cfk'}, "
          f"{out_dir / 'best.cfk'}")
    return 0


def cmd_eval(args) -> int:
    expected = None
    if args.config:
        fields = read_kv_file(args.config)
        for key in TRAIN_KEYS:
            fields.pop(key, None)
        expected = config_from_fields(fields)
    model, meta = load_checkpoint(args.checkpoint, expected_config=expected)
    if args.precision:
        from .encoder import to_precision
        model = to_precision(model, args.precision)
    seed = args.seed if args.seed is not None else model.config.seed
    images, labels, names = _load_images(args.data, seed, model.config)
    result = evaluate(model, images.astype(model.dtype), labels,
                      workers=args.workers)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    epoch = meta.get("epochs_trained", "")
    append_metrics_row(out_dir / "metrics.csv", epoch, "eval",
                       result.loss, result.top1, result.top5)
    line = f"eval on {len(images)} samples: loss={result.loss:.6f} top1={result.top1:.6f}"
    if result.top5 is not None:
        line += f" top5={result.top5:.6f}"
    print(line)
    return 0


def cmd_visualize(args) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    image = dataio.read_pnm(args.image)
    c = model.config
    if image.shape[0] != c.image_size or image.shape[1] != c.image_size:
        raise DataError(
            f"{args.image}: image is {image.shape[0]}x{image.shape[1]} but the "
            f"model expects {c.image_size}x{c.image_size}")
    if image.shape[2] != c.in_channels:
        image = dataio.adapt_channels(image, c.in_channels)
    with tn.no_grad():
        _, states = model_forward(image.astype(model.dtype), model)
    side = c.grid_side(c.num_stages - 1)
    assignment = states[-1].assignment.data
    rendered = dataio.render_assignment_map(assignment, side, side, cell=args.cell)
    out_path = Path(args.out)
    if out_path.suffix == "" or out_path.is_dir():
        out_path.mkdir(parents=True, exist_ok=True)
        out_path = out_path / "assignment.ppm"
    dataio.write_pnm(out_path, rendered)
    distinct = len(np.unique(np.argmax(assignment, axis=0)))
    print(f"assignment map {side}x{side} cells, {assignment.shape[0]} centers, "
          f"{distinct} clusters in use -> {out_path}")
    return 0


def cmd_bench(args) -> int:
    mechanisms = [m.strip() for m in args.mechanisms.split(",") if m.strip()]
    for m in mechanisms:
        if m not in bn.MECHANISMS:
            raise ConfigError(f"unknown mechanism {m!r} (choose from {bn.MECHANISMS})")
    hw_values = [int(v) for v in args.hw.split(",") if v.strip()]
    if not hw_values:
        raise ConfigError("--hw needs at least one value")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    samples = []
    for mech in mechanisms:
        for hw in hw_values:
            sample = bn.measure_cost(mech, hw, k=args.k, d=args.d, t=args.t,
                                     runs=args.runs, seed=args.seed or 0)
            samples.append(sample)
            flag = " UNSTABLE" if sample.unstable else ""
            print(f"{sample.csv_row()}{flag}")
    path = out_dir / "bench.csv"
    bn.write_csv(samples, path)
    for mech in mechanisms:
        subset = [s for s in samples if s.mechanism == mech]
        try:
            fit = bn.fit_scaling(subset, "HW")
        except ValueError as exc:
            print(f"SLOPE mechanism={mech} axis=HW skipped ({exc})")
            continue
        print(f"SLOPE mechanism={mech} axis=HW "
              f"flop_slope={fit.flop_slope:.12f} time_slope={fit.time_slope:.6f}")
    print(f"wrote {path}")
    return 0


def cmd_gradcheck(args) -> int:
    reports: list[GradReport] = []
    if args.scope in ("ops", "all"):
        reports.extend(op_grad_reports())
    if args.scope in ("model", "all"):
        reports.append(model_grad_report())
    for r in reports:
        print(r.render())
    if args.out:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "gradcheck.csv", "w") as fh:
            fh.write(GradReport.CSV_HEADER + "\n")
            for r in reports:
                fh.write(r.csv_row() + "\n")
    failed = [r for r in reports if not r.passed]
    print(f"{len(reports) - len(failed)}/{len(reports)} gradient checks passed")
    return 1 if failed else 0


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="clusterattn",
        description="Recurrent cross-attention clustering: desk-scale train/eval, "
                    "complexity benchmarks, gradient checks, and assignment maps.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=False):
        p.add_argument("--config", help="flat key=value model/run config file")
        p.add_argument("--out", default="out", help="output directory")
        p.add_argument("--seed", type=int, default=None, help="run seed override")
        p.add_argument("--precision", choices=("single", "double"), default=None)
        if data:
            p.add_argument("--data", help="dataset directory or synthetic:<spec>")

    p = sub.add_parser("train", help="train on a dataset, write metrics + checkpoints")
    common(p, data=True)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    common(p, data=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--workers", type=int, default=1,
                   help="forward-pass worker threads (results identical)")

    p = sub.add_parser("bench", help="flop tallies and wall-time scaling sweep")
    common(p)
    p.add_argument("--mechanisms", default="self_attention,rca")
    p.add_argument("--hw", default="256,512,1024,2048,4096",
                   help="comma list of token counts")
    p.add_argument("--k", type=int, default=8)
    p.add_argument("--d", type=int, default=64)
    p.add_argument("--t", type=int, default=3)
    p.add_argument("--runs", type=int, default=5)

    p = sub.add_parser("visualize", help="render the final-stage assignment map")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True, help="P5/P6 input image")
    p.add_argument("--out", default="out", help="output .ppm path or directory")
    p.add_argument("--cell", type=int, default=16, help="pixels per token cell")

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--scope", choices=("ops", "model", "all"), default="all")
    p.add_argument("--out", default=None, help="optional directory for gradcheck.csv")
    return parser


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "bench": cmd_bench,
    "visualize": cmd_visualize,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, DataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

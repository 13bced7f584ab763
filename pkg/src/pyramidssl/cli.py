"""Command-line entry point: synth / split / pretrain / finetune / eval / curves.

Exit codes: 0 success, 2 usage or configuration problem, 1 runtime failure.
Each training command persists the fully resolved config next to its outputs
so a run can be reproduced from the artifact directory alone.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from . import config as config_mod
from . import data, trainer
from .errors import ConfigError, FormatError, PyramidSslError

log = logging.getLogger(__name__)

CURVE_SERIES = (
    ("restoration", "#d62728"),
    ("comparison", "#1f77b4"),
    ("total", "#2ca02c"),
)


def _require_dir(path: str, what: str) -> Path:
    p = Path(path)
    if not p.is_dir():
        raise ConfigError(f"{what} directory not found: {p}")
    return p


def _require_file(path: str, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"{what} not found: {p}")
    return p


def _resolve_config(args) -> config_mod.RunConfig:
    cfg = config_mod.load_file(args.config) if args.config else config_mod.RunConfig()
    if getattr(args, "set", None):
        cfg = config_mod.apply_overrides(cfg, args.set)
    if getattr(args, "seed", None) is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    cfg.validate()
    return cfg


def _persist_config(cfg, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.resolved.json").write_text(
        json.dumps(cfg.to_dict(), indent=2, sort_keys=True)
    )


def _load_subset(data_dir: Path, split_path: str | None, subset: str) -> list:
    if split_path is None:
        return data.load_dataset(data_dir)
    plan = data.SplitPlan.load(_require_file(split_path, "split file"))
    ids = {
        "train": plan.train_ids,
        "val": plan.val_ids,
        "test": plan.test_ids,
        "pretrain": plan.pretrain_ids,
        "finetune": plan.finetune_ids,
    }.get(subset)
    if ids is None:
        raise ConfigError(f"unknown subset {subset!r}")
    return data.load_dataset(data_dir, ids)


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    samples = data.synth_dataset(args.kind, args.n, args.seed)
    out = Path(args.out)
    data.save_dataset(
        samples, out, manifest_extra={"kind": args.kind, "n": args.n, "seed": args.seed}
    )
    print(f"wrote {len(samples)} samples to {out}")
    return 0


def cmd_split(args) -> int:
    data_dir = _require_dir(args.data, "data")
    ids = data.list_ids(data_dir)
    plan = data.make_splits(ids, labeling_ratio=args.ratio, seed=args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    plan.save(out)
    print(
        f"split {len(ids)} ids: train {len(plan.train_ids)} "
        f"(pretrain {len(plan.pretrain_ids)} / finetune {len(plan.finetune_ids)}), "
        f"val {len(plan.val_ids)}, test {len(plan.test_ids)} -> {out}"
    )
    return 0


def cmd_pretrain(args) -> int:
    cfg = _resolve_config(args)
    data_dir = _require_dir(args.data, "data")
    if args.dry_run:
        print(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
        print("dry run: config valid")
        return 0
    samples = _load_subset(data_dir, args.split, "pretrain")
    out = Path(args.out)
    _persist_config(cfg, out)
    path, report = trainer.pretrain(
        cfg,
        samples,
        out,
        resume=args.resume,
        dump_crops=out / "crops.json" if args.dump_crops else None,
        dump_augment_params=out / "augment_params.json" if args.dump_augment_params else None,
    )
    print(f"pre-training done: {path} ({len(report.epochs)} epochs recorded)")
    return 0


def cmd_finetune(args) -> int:
    cfg = _resolve_config(args)
    data_dir = _require_dir(args.data, "data")
    checkpoint = None
    if not args.scratch:
        if args.checkpoint is None:
            raise ConfigError("finetune needs --checkpoint CKPT or --scratch")
        checkpoint = _require_file(args.checkpoint, "checkpoint")
    train_samples = _load_subset(data_dir, args.split, "finetune")
    val_samples = _load_subset(data_dir, args.split, "val") if args.split else None
    out = Path(args.out)
    _persist_config(cfg, out)
    runner = trainer.finetune_classify if args.task == "classify" else trainer.finetune_segment
    path, report = runner(
        cfg, train_samples, out, checkpoint_path=checkpoint, val_samples=val_samples
    )
    print(f"fine-tuning done: {path}")
    print(json.dumps(report.final_metrics, indent=2, sort_keys=True))
    return 0


def cmd_eval(args) -> int:
    model = _require_file(args.model, "model")
    data_dir = _require_dir(args.data, "data")
    samples = _load_subset(data_dir, args.split, args.subset)
    result = trainer.evaluate_model(model, samples)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.json").write_text(json.dumps(result, indent=2, sort_keys=True))
    print(json.dumps(result, indent=2, sort_keys=True))
    return 0


def cmd_curves(args) -> int:
    render_curves(args.infile, args.out)
    print(f"wrote {args.out}")
    return 0


# ---------------------------------------------------------------------------
# loss-curve SVG rendering (static chart, no plotting dependency)


def _read_losses(csv_path: str | Path) -> dict:
    p = Path(csv_path)
    if not p.is_file():
        raise ConfigError(f"losses file not found: {p}")
    lines = [line for line in p.read_text().splitlines() if line.strip()]
    if not lines or lines[0].split(",") != list(trainer.LOSS_COLUMNS):
        raise FormatError(f"{p} does not look like a losses.csv (bad header)")
    if len(lines) < 2:
        raise FormatError(f"{p} has no data rows")
    steps, restoration, comparison, total = [], [], [], []
    for i, line in enumerate(lines[1:], start=2):
        parts = line.split(",")
        if len(parts) != len(trainer.LOSS_COLUMNS):
            raise FormatError(f"{p}:{i}: expected {len(trainer.LOSS_COLUMNS)} columns")
        try:
            steps.append(int(parts[0]))
            restoration.append(float(parts[2]))
            comparison.append(float(parts[3]) + float(parts[4]))
            total.append(float(parts[5]))
        except ValueError as e:
            raise FormatError(f"{p}:{i}: {e}") from e
    return {
        "steps": steps,
        "restoration": restoration,
        "comparison": comparison,
        "total": total,
    }


def _polyline(xs, ys, x_range, y_range, plot) -> str:
    (x0, x1), (y0, y1) = x_range, y_range
    left, top, width, height = plot
    span_x = (x1 - x0) or 1.0
    span_y = (y1 - y0) or 1.0
    points = []
    for x, y in zip(xs, ys):
        px = left + (x - x0) / span_x * width
        py = top + (y1 - y) / span_y * height
        points.append(f"{px:.2f},{py:.2f}")
    return " ".join(points)


def render_curves(csv_path: str | Path, svg_path: str | Path) -> None:
    """Render the three loss series from a losses.csv as a static SVG chart."""
    series = _read_losses(csv_path)
    steps = series["steps"]
    values = [v for name, _ in CURVE_SERIES for v in series[name]]
    x_range = (min(steps), max(steps))
    y_lo, y_hi = min(values), max(values)
    pad = 0.05 * ((y_hi - y_lo) or 1.0)
    y_range = (y_lo - pad, y_hi + pad)
    width, height = 800, 480
    left, top, right, bottom = 60, 20, 20, 40
    plot = (left, top, width - left - right, height - top - bottom)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<rect x="{left}" y="{top}" width="{plot[2]}" height="{plot[3]}" '
        'fill="none" stroke="#999"/>',
    ]
    for i in range(5):
        frac = i / 4
        y_val = y_range[1] - frac * (y_range[1] - y_range[0])
        py = top + frac * plot[3]
        parts.append(
            f'<line x1="{left}" y1="{py:.1f}" x2="{left + plot[2]}" y2="{py:.1f}" '
            'stroke="#eee"/>'
        )
        parts.append(
            f'<text x="{left - 6}" y="{py + 4:.1f}" font-size="11" text-anchor="end" '
            f'fill="#444">{y_val:.3g}</text>'
        )
        x_val = x_range[0] + frac * (x_range[1] - x_range[0])
        px = left + frac * plot[2]
        parts.append(
            f'<text x="{px:.1f}" y="{height - bottom + 16}" font-size="11" '
            f'text-anchor="middle" fill="#444">{x_val:.5g}</text>'
        )
    for idx, (name, color) in enumerate(CURVE_SERIES):
        pts = _polyline(steps, series[name], x_range, y_range, plot)
        parts.append(
            f'<polyline class="series-{name}" fill="none" stroke="{color}" '
            f'stroke-width="1.5" points="{pts}"/>'
        )
        lx = left + 10 + idx * 140
        parts.append(
            f'<line x1="{lx}" y1="{top + 12}" x2="{lx + 18}" y2="{top + 12}" '
            f'stroke="{color}" stroke-width="2"/>'
        )
        parts.append(
            f'<text x="{lx + 24}" y="{top + 16}" font-size="12" fill="#222">{name}</text>'
        )
    parts.append(
        f'<text x="{left + plot[2] / 2:.0f}" y="{height - 6}" font-size="12" '
         'text-anchor="middle" fill="#222">step</text>'
    )
    parts.append("</svg>")
    out = Path(svg_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text("\n".join(parts))


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pyramidssl",
        description="Multi-scale self-supervised pre-training and transfer experiments.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--kind", required=True, choices=sorted(data.SYNTH_KINDS))
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("split", help="write a train/val/test + pretrain/finetune split plan")
    p.add_argument("--data", required=True)
    p.add_argument("--ratio", type=float, required=True, help="labeled fraction of train")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("pretrain", help="run self-supervised pre-training")
    p.add_argument("--config", help="JSON config file (defaults used when omitted)")
    p.add_argument("--data", required=True)
    p.add_argument("--split", help="split plan; restricts to its pretrain ids")
    p.add_argument("--out", required=True)
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override config key")
    p.add_argument("--seed", type=int)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--dry-run", action="store_true", help="validate config and exit")
    p.add_argument("--dump-crops", action="store_true", help="record sampled boxes as JSON")
    p.add_argument(
        "--dump-augment-params", action="store_true", help="record augmentation records as JSON"
    )
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="train a classifier or segmenter from a checkpoint")
    p.add_argument("--task", required=True, choices=("classify", "segment"))
    p.add_argument("--checkpoint", help="pre-trained checkpoint to transfer")
    p.add_argument("--scratch", action="store_true", help="random-init baseline (no checkpoint)")
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--data", required=True)
    p.add_argument("--split", help="split plan; trains on its finetune ids")
    p.add_argument("--out", required=True)
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("eval", help="recompute metrics for a fine-tuned model")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", help="split plan selecting the evaluation subset")
    p.add_argument("--subset", default="test", help="train|val|test|pretrain|finetune")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("curves", help="render losses.csv as a static SVG chart")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_curves)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except PyramidSslError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # pragma: no cover - last-resort diagnostics
        log.exception("unhandled failure: %s", e)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())

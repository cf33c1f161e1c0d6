"""Command-line entry point: run, sweep, counts, merge, report."""

from __future__ import annotations

import argparse
import glob
import os
import sys

import numpy as np
import yaml

from .accounting import complexity_table
from .backbone import ArchConfig, ValidationError, build_backbone
from .checkpoint import CheckpointError, load_delta
from .config import load_experiment, load_sweep, parse_arch
from .petl import (
    Adapter,
    BitFit,
    FullFinetune,
    Lora,
    Prefix,
    Probing,
    Prompt,
    Ssf,
    merge_lora,
    merge_ssf,
    method_name,
)
from .report import COLUMNS, emit_report, parse_csv, render_counts, render_text
from .tensor import Tensor, get_default_dtype
from .training import TrainingDivergedError

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_SCHEMA = 2
EXIT_DIVERGED = 3

# Reference shapes for the two checkpoint families.
ARCH_PRESETS = {
    "transformer": ArchConfig("transformer", 768, 12, 12),
    "conformer": ArchConfig("conformer", 1024, 12, 8),
}

ABLATION_GRID = [
    Adapter(8),
    Adapter(16),
    Adapter(32),
    Prefix(16),
    Prefix(32),
    Prefix(64),
    Lora(1, "att"),
    Lora(2, "att"),
    Lora(4, "att"),
    Lora(2, "all"),
    Lora(4, "all"),
]


def _load_arch(spec: str) -> tuple[ArchConfig, int]:
    """Arch preset name or a YAML file with arch fields (+ optional use_layers)."""
    if spec in ARCH_PRESETS:
        arch = ARCH_PRESETS[spec]
        return arch, min(6, arch.n_layers)
    with open(spec) as fh:
        doc = yaml.safe_load(fh)
    if isinstance(doc, dict) and "arch" in doc:
        use_layers = doc.get("use_layers")
        arch = parse_arch(doc["arch"])
    else:
        use_layers = None
        arch = parse_arch(doc)
    if use_layers is None:
        use_layers = min(6, arch.n_layers)
    return arch, int(use_layers)


def cmd_run(args) -> int:
    from .experiment import run_experiment

    cfg = load_experiment(args.config)
    outcome = run_experiment(cfg, timing=not args.no_timing)
    os.makedirs(cfg.output_dir, exist_ok=True)
    report_path = os.path.join(cfg.output_dir, "report.csv")
    emit_report([outcome.row], path=report_path, fmt="csv")
    print(render_text([outcome.row.formatted()], COLUMNS), end="")
    print(f"report: {report_path}")
    if outcome.checkpoint_path:
        print(f"checkpoint: {outcome.checkpoint_path}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    from .experiment import run_sweep

    base, grid = load_sweep(args.grid)
    cells = run_sweep(base, grid, timing=args.timing)
    rows = [c.row for c in cells if c.row is not None]
    for cell in cells:
        if cell.error is not None:
            print(
                f"cell {method_name(cell.method)} ({cell.method}) failed: {cell.error}",
                file=sys.stderr,
            )
    text = emit_report(rows, fmt="text")
    print(text, end="")
    os.makedirs(base.output_dir, exist_ok=True)
    csv_path = os.path.join(base.output_dir, "sweep.csv")
    emit_report(rows, path=csv_path, fmt="csv")
    print(f"report: {csv_path}")
    return EXIT_OK


def cmd_counts(args) -> int:
    arch, use_layers = _load_arch(args.arch)
    if args.use_layers is not None:
        use_layers = args.use_layers
    if not 1 <= use_layers <= arch.n_layers:
        raise ValidationError("use_layers", f"must be in [1, {arch.n_layers}], got {use_layers}")
    cfgs = None
    if args.all_methods:
        cfgs = [FullFinetune(), Probing(), Adapter(), Prompt(), Prefix(), BitFit(), Ssf(), Lora(2, "all")]
        cfgs += ABLATION_GRID
    rows = complexity_table([arch], cfgs, use_layers=use_layers)
    print(render_counts(rows, fmt=args.format), end="")
    return EXIT_OK


def cmd_merge(args) -> int:
    arch, use_layers = _load_arch(args.arch)
    base = build_backbone(arch, seed=args.seed, use_layers=use_layers)
    model = load_delta(base, args.checkpoint)
    name = method_name(model.method)
    rng = np.random.default_rng(args.seed)
    xs = [
        rng.normal(0.0, 1.0, (8, arch.d_model)).astype(get_default_dtype()) for _ in range(4)
    ]
    pre = [model.forward_features(Tensor(x)).data.copy() for x in xs]
    if name == "lora":
        merge_lora(model)
    elif name == "ssf":
        merge_ssf(model)
    else:
        print(f"method {name!r} has no reparameterization merge", file=sys.stderr)
        return EXIT_ERROR
    post = [model.forward_features(Tensor(x)).data for x in xs]
    worst = max(float(np.abs(a - b).max()) for a, b in zip(pre, post))
    reference = build_backbone(arch, seed=args.seed, use_layers=use_layers)
    tree_base = {n: p.tensor.shape for n, p in reference.registry.items()}
    structural = tree_base == model.structural_tree()
    print(f"merged {name} checkpoint into base weights")
    print(f"max forward deviation over {len(xs)} random inputs: {worst:.3e}")
    print(f"parameter tree identical to base: {structural}")
    if worst > 1e-5 or not structural:
        print("merge verification FAILED", file=sys.stderr)
        return EXIT_ERROR
    return EXIT_OK


def cmd_report(args) -> int:
    paths = sorted(glob.glob(os.path.join(args.dir, "**", "*.csv"), recursive=True))
    records: list[dict[str, str]] = []
    for path in paths:
        with open(path) as fh:
            text = fh.read()
        try:
            records.extend(parse_csv(text))
        except ValueError:
            continue  # not one of ours
    if not records:
        print(f"no report rows found under {args.dir}")
        return EXIT_OK
    print(render_text(records, COLUMNS), end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="petlkit",
        description="Parameter-efficient transfer learning experiments on miniature backbones",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run one experiment from a config file")
    p_run.add_argument("config")
    p_run.add_argument("--no-timing", action="store_true", help="skip the timing probe")
    p_run.set_defaults(fn=cmd_run)

    p_sweep = sub.add_parser("sweep", help="run a grid of method configs")
    p_sweep.add_argument("grid")
    p_sweep.add_argument("--timing", action="store_true", help="include timing probes per cell")
    p_sweep.set_defaults(fn=cmd_sweep)

    p_counts = sub.add_parser("counts", help="closed-form trainable-parameter table")
    p_counts.add_argument("arch", help="'transformer', 'conformer', or an arch YAML file")
    p_counts.add_argument("--all-methods", action="store_true", help="include the ablation grid")
    p_counts.add_argument("--use-layers", type=int, default=None)
    p_counts.add_argument("--format", choices=("text", "csv"), default="text")
    p_counts.set_defaults(fn=cmd_counts)

    p_merge = sub.add_parser("merge", help="fold a delta checkpoint into base weights and verify")
    p_merge.add_argument("checkpoint")
    p_merge.add_argument("arch", help="'transformer', 'conformer', or an arch YAML file")
    p_merge.add_argument("--seed", type=int, default=0)
    p_merge.set_defaults(fn=cmd_merge)

    p_report = sub.add_parser("report", help="aligned-text summary of report CSVs in a directory")
    p_report.add_argument("dir")
    p_report.set_defaults(fn=cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ValidationError as exc:
        print(f"config error at {exc.field_path}: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    except TrainingDivergedError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (CheckpointError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())

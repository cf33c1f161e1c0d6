"""One experiment run end to end, and grid sweeps over method configurations."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

from .accounting import audit
from .backbone import HeadConfig, build_backbone, build_head
from .checkpoint import save_delta
from .config import ExperimentConfig
from .petl import FullFinetune, MethodConfig, apply_method, hyperparam_label, method_name
from .report import ReportRow
from .tasks import generate_task
from .training import evaluate, timing_probe, train

THREADS_ENV_VAR = "PETLKIT_THREADS"


def head_config_for(cfg: ExperimentConfig) -> HeadConfig:
    return HeadConfig(n_outputs=cfg.task.n_outputs, output_kind=cfg.task.output_kind)


def build_model(cfg: ExperimentConfig):
    base = build_backbone(cfg.arch, seed=cfg.seed, use_layers=cfg.use_layers)
    head = build_head(cfg.arch.d_model, head_config_for(cfg), seed=cfg.seed)
    return apply_method(base, cfg.petl, head=head, seed=cfg.seed)


@dataclass
class RunResult:
    row: ReportRow
    checkpoint_path: str | None
    history: object


def run_experiment(cfg: ExperimentConfig, timing: bool = True, write_outputs: bool = True) -> RunResult:
    """Build, inject, train, evaluate, bootstrap, and write the delta checkpoint."""
    dataset = generate_task(cfg.task)
    model = build_model(cfg)
    counts = audit(model)  # predict/audit tripwire before any training
    history = train(model, dataset, cfg.train)
    result = evaluate(model, dataset, split="test", seed=cfg.seed)

    train_ratio = infer_ratio = float("nan")
    if timing:
        own = timing_probe(model, dataset, cfg.train)
        reference = replace(cfg, petl=FullFinetune(), seed=cfg.seed)
        ref_model = build_model(reference)
        ref = timing_probe(ref_model, dataset, cfg.train)
        train_ratio = own[0] / ref[0] if ref[0] > 0 else float("nan")
        infer_ratio = own[1] / ref[1] if ref[1] > 0 else float("nan")

    row = ReportRow(
        method=method_name(cfg.petl),
        arch=cfg.arch.label(),
        use_layers=cfg.use_layers,
        hyperparams=hyperparam_label(cfg.petl),
        trainable_params=counts.total_trainable,
        metric_name=result.metric_name,
        value=result.value,
        ci_low=result.ci_low,
        ci_high=result.ci_high,
        train_ms_per_step_ratio=train_ratio,
        infer_ratio=infer_ratio,
        seed=cfg.seed,
    )

    ckpt_path = None
    if write_outputs:
        os.makedirs(cfg.output_dir, exist_ok=True)
        tag = method_name(cfg.petl)
        if row.hyperparams:
            tag += "-" + row.hyperparams.replace("=", "").replace(";", "-")
        ckpt_path = os.path.join(cfg.output_dir, f"{tag}-{cfg.arch.label()}-seed{cfg.seed}.petl")
        save_delta(model, ckpt_path)
    return RunResult(row=row, checkpoint_path=ckpt_path, history=history)


@dataclass
class SweepCell:
    method: MethodConfig
    row: ReportRow | None = None
    error: str | None = None


def sweep_threads() -> int:
    value = os.environ.get(THREADS_ENV_VAR, "1")
    try:
        return max(1, int(value))
    except ValueError:
        return 1


def run_sweep(
    base: ExperimentConfig,
    grid: list[MethodConfig],
    timing: bool = False,
    threads: int | None = None,
) -> list[SweepCell]:
    """Run every grid cell on an independent replica; failures don't stop the sweep.

    Cells may run in parallel (thread count from PETLKIT_THREADS unless given);
    results are assembled in grid order either way.
    """
    if threads is None:
        threads = sweep_threads()

    def one(method: MethodConfig) -> SweepCell:
        cell = SweepCell(method=method)
        try:
            cfg = replace(base, petl=method)
            outcome = run_experiment(cfg, timing=timing, write_outputs=False)
            cell.row = outcome.row
        except Exception as exc:  # cell failure is a recorded result
            cell.error = f"{type(exc).__name__}: {exc}"
        return cell

    if threads == 1:
        return [one(m) for m in grid]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(one, grid))

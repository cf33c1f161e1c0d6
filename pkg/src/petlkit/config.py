"""Experiment configuration files: strict YAML schema, field-path errors.

Unknown keys are rejected and every violation names the offending field, so a
bad config fails before any allocation happens.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace

import yaml

from .backbone import ArchConfig, ValidationError
from .petl import (
    Adapter,
    BitFit,
    FullFinetune,
    Lora,
    MethodConfig,
    Prefix,
    Probing,
    Prompt,
    Ssf,
)
from .tasks import TaskSpec
from .training import TrainConfig


@dataclass(frozen=True)
class ExperimentConfig:
    arch: ArchConfig
    petl: MethodConfig
    task: TaskSpec
    train: TrainConfig = field(default_factory=TrainConfig)
    use_layers: int = 6
    output_dir: str = "runs"
    seed: int = 0


def _require_mapping(doc, path: str) -> dict:
    if not isinstance(doc, dict):
        raise ValidationError(path, f"expected a mapping, got {type(doc).__name__}")
    return doc


def _reject_unknown(doc: dict, allowed: set[str], path: str) -> None:
    unknown = set(doc) - allowed
    if unknown:
        key = sorted(unknown)[0]
        raise ValidationError(f"{path}.{key}", "unknown field")


def _as_int(value, path: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ValidationError(path, f"expected an integer, got {value!r}")
    return value


def _as_float(value, path: str) -> float:
    if isinstance(value, bool):
        raise ValidationError(path, f"expected a number, got {value!r}")
    if isinstance(value, (int, float)):
        return float(value)
    if isinstance(value, str):
        try:
            return float(value)
        except ValueError:
            pass
    raise ValidationError(path, f"expected a number, got {value!r}")


def _as_str(value, path: str) -> str:
    if not isinstance(value, str):
        raise ValidationError(path, f"expected a string, got {value!r}")
    return value


def parse_arch(doc, path: str = "arch") -> ArchConfig:
    doc = _require_mapping(doc, path)
    allowed = {"family", "d_model", "n_layers", "n_heads", "ff_mult", "conv_kernel", "max_seq"}
    _reject_unknown(doc, allowed, path)
    for required in ("family", "d_model", "n_layers", "n_heads"):
        if required not in doc:
            raise ValidationError(f"{path}.{required}", "required field missing")
    kwargs = {"family": _as_str(doc["family"], f"{path}.family")}
    for name in ("d_model", "n_layers", "n_heads", "ff_mult", "conv_kernel", "max_seq"):
        if name in doc:
            kwargs[name] = _as_int(doc[name], f"{path}.{name}")
    return ArchConfig(**kwargs)


_METHOD_FIELDS = {
    "adapter": (Adapter, {"bottleneck": _as_int}),
    "prompt": (Prompt, {"n_prompts": _as_int}),
    "prefix": (Prefix, {"n_prefix": _as_int, "mlp_hidden": _as_int}),
    "bitfit": (BitFit, {}),
    "ssf": (Ssf, {}),
    "lora": (Lora, {"rank": _as_int, "scope": _as_str}),
    "ft": (FullFinetune, {}),
    "probing": (Probing, {}),
}


def parse_method(doc, path: str = "petl") -> MethodConfig:
    if isinstance(doc, str):
        name = doc.lower()
        if name not in _METHOD_FIELDS:
            raise ValidationError(path, f"unknown method {doc!r}")
        cls, _ = _METHOD_FIELDS[name]
        return cls()
    doc = _require_mapping(doc, path)
    if "method" not in doc:
        raise ValidationError(f"{path}.method", "required field missing")
    name = _as_str(doc["method"], f"{path}.method").lower()
    if name not in _METHOD_FIELDS:
        raise ValidationError(f"{path}.method", f"unknown method {doc['method']!r}")
    cls, converters = _METHOD_FIELDS[name]
    _reject_unknown(doc, {"method", *converters}, path)
    kwargs = {}
    for key, conv in converters.items():
        if key in doc:
            value = conv(doc[key], f"{path}.{key}")
            if key == "scope":
                value = value.lower()
            kwargs[key] = value
    return cls(**kwargs)


def parse_task(doc, d_model: int, path: str = "task") -> TaskSpec:
    doc = _require_mapping(doc, path)
    allowed = {f.name for f in fields(TaskSpec)}
    _reject_unknown(doc, allowed, path)
    if "kind" not in doc:
        raise ValidationError(f"{path}.kind", "required field missing")
    kwargs = {"kind": _as_str(doc["kind"], f"{path}.kind")}
    for name in allowed - {"kind"}:
        if name in doc:
            kwargs[name] = _as_int(doc[name], f"{path}.{name}")
    kwargs.setdefault("d_input", d_model)
    if kwargs["d_input"] != d_model:
        raise ValidationError(
            f"{path}.d_input", f"must equal arch.d_model ({d_model}), got {kwargs['d_input']}"
        )
    return TaskSpec(**kwargs)


def parse_train(doc, path: str = "train") -> TrainConfig:
    if doc is None:
        return TrainConfig()
    doc = _require_mapping(doc, path)
    int_fields = {"steps", "batch_size", "eval_every", "seed", "early_stop_patience"}
    float_fields = {"lr_petl", "lr_head", "lr_ft", "weight_decay"}
    _reject_unknown(doc, int_fields | float_fields, path)
    kwargs = {}
    for name in int_fields:
        if name in doc:
            kwargs[name] = _as_int(doc[name], f"{path}.{name}")
    for name in float_fields:
        if name in doc:
            kwargs[name] = _as_float(doc[name], f"{path}.{name}")
    return TrainConfig(**kwargs)


def parse_experiment(doc) -> ExperimentConfig:
    doc = _require_mapping(doc, "config")
    allowed = {"arch", "use_layers", "petl", "task", "train", "output_dir", "seed"}
    _reject_unknown(doc, allowed, "config")
    for required in ("arch", "petl", "task"):
        if required not in doc:
            raise ValidationError(f"config.{required}", "required field missing")
    arch = parse_arch(doc["arch"])
    use_layers = _as_int(doc.get("use_layers", min(6, arch.n_layers)), "config.use_layers")
    if not 1 <= use_layers <= arch.n_layers:
        raise ValidationError("config.use_layers", f"must be in [1, {arch.n_layers}], got {use_layers}")
    cfg = ExperimentConfig(
        arch=arch,
        petl=parse_method(doc["petl"]),
        task=parse_task(doc["task"], arch.d_model),
        train=parse_train(doc.get("train")),
        use_layers=use_layers,
        output_dir=_as_str(doc.get("output_dir", "runs"), "config.output_dir"),
        seed=_as_int(doc.get("seed", 0), "config.seed"),
    )
    _check_sequence_budget(cfg)
    return cfg


def _check_sequence_budget(cfg: ExperimentConfig) -> None:
    prompts = cfg.petl.n_prompts if isinstance(cfg.petl, Prompt) else 0
    if cfg.task.seq_len + prompts > cfg.arch.max_seq:
        raise ValidationError(
            "task.seq_len",
            f"seq_len {cfg.task.seq_len} + prompts {prompts} exceeds arch.max_seq {cfg.arch.max_seq}",
        )


def load_experiment(path: str) -> ExperimentConfig:
    with open(path) as fh:
        doc = yaml.safe_load(fh)
    return parse_experiment(doc)


def parse_sweep(doc) -> tuple[ExperimentConfig, list[MethodConfig]]:
    doc = _require_mapping(doc, "sweep")
    _reject_unknown(doc, {"base", "grid"}, "sweep")
    if "base" not in doc:
        raise ValidationError("sweep.base", "required field missing")
    base_doc = _require_mapping(doc["base"], "sweep.base")
    if "petl" not in base_doc:
        base_doc = dict(base_doc)
        base_doc["petl"] = "probing"  # placeholder; each cell overrides it
    base = parse_experiment(base_doc)
    grid_doc = doc.get("grid", [])
    if not isinstance(grid_doc, list):
        raise ValidationError("sweep.grid", "expected a list of method configs")
    grid = [parse_method(cell, f"sweep.grid[{i}]") for i, cell in enumerate(grid_doc)]
    for i, cell in enumerate(grid):
        probe = replace(base, petl=cell)
        _check_sequence_budget(probe)
    return base, grid


def load_sweep(path: str) -> tuple[ExperimentConfig, list[MethodConfig]]:
    with open(path) as fh:
        doc = yaml.safe_load(fh)
    return parse_sweep(doc)

"""Report rows and their CSV / aligned-text emission."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

COLUMNS = [
    "method",
    "arch",
    "use_layers",
    "hyperparams",
    "trainable_params",
    "metric_name",
    "value",
    "ci_low",
    "ci_high",
    "train_ms_per_step_ratio",
    "infer_ratio",
    "seed",
]

# Wall-clock derived columns; excluded from determinism comparisons.
TIMING_COLUMNS = ("train_ms_per_step_ratio", "infer_ratio")


@dataclass
class ReportRow:
    method: str
    arch: str
    use_layers: int
    hyperparams: str
    trainable_params: int
    metric_name: str
    value: float
    ci_low: float
    ci_high: float
    train_ms_per_step_ratio: float
    infer_ratio: float
    seed: int

    def formatted(self) -> dict[str, str]:
        return {
            "method": self.method,
            "arch": self.arch,
            "use_layers": str(self.use_layers),
            "hyperparams": self.hyperparams,
            "trainable_params": str(self.trainable_params),
            "metric_name": self.metric_name,
            "value": f"{self.value:.4f}",
            "ci_low": f"{self.ci_low:.4f}",
            "ci_high": f"{self.ci_high:.4f}",
            "train_ms_per_step_ratio": f"{self.train_ms_per_step_ratio:.3f}",
            "infer_ratio": f"{self.infer_ratio:.3f}",
            "seed": str(self.seed),
        }


def rows_to_csv(rows: list[ReportRow]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=COLUMNS, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow(row.formatted())
    return buf.getvalue()


def parse_csv(text: str) -> list[dict[str, str]]:
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames != COLUMNS:
        raise ValueError(f"unexpected report header {reader.fieldnames}")
    return list(reader)


def render_text(records: list[dict[str, str]], columns: list[str] | None = None) -> str:
    """Fixed-width table; deterministic for identical records."""
    if columns is None:
        columns = COLUMNS if not records else list(records[0].keys())
    widths = {c: len(c) for c in columns}
    for rec in records:
        for c in columns:
            widths[c] = max(widths[c], len(str(rec.get(c, ""))))
    lines = ["  ".join(c.ljust(widths[c]) for c in columns)]
    lines.append("  ".join("-" * widths[c] for c in columns))
    for rec in records:
        lines.append("  ".join(str(rec.get(c, "")).ljust(widths[c]) for c in columns))
    return "\n".join(lines) + "\n"


def emit_report(rows: list[ReportRow], path: str | None = None, fmt: str = "csv") -> str:
    """Serialize rows; also write them to `path` when given."""
    if fmt == "csv":
        text = rows_to_csv(rows)
    elif fmt == "text":
        text = render_text([r.formatted() for r in rows], COLUMNS)
    else:
        raise ValueError(f"unknown report format {fmt!r}")
    if path is not None:
        with open(path, "w") as fh:
            fh.write(text)
    return text


def render_counts(count_rows: list[dict], fmt: str = "text") -> str:
    """Emission for the complexity table (counts CLI verb)."""
    records = [
        {
            "method": r["method"],
            "hyperparams": r["hyperparams"],
            "arch": r["arch"],
            "use_layers": str(r["use_layers"]),
            "trainable_params": str(r["trainable_params"]),
            "ratio": f"{r['ratio']:.4%}",
            "note": r["note"],
        }
        for r in count_rows
    ]
    columns = ["method", "hyperparams", "arch", "use_layers", "trainable_params", "ratio", "note"]
    if fmt == "text":
        return render_text(records, columns)
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n")
    writer.writeheader()
    for rec in records:
        writer.writerow(rec)
    return buf.getvalue()

"""Delimited and key=value report files."""
from __future__ import annotations

import csv
from pathlib import Path

from .metrics import METRIC_LABELS, METRIC_NAMES, Aggregate, MetricReport, RocCurve

UNDEFINED = "undefined"


def _fmt(v: float | None, digits: int = 6) -> str:
    return UNDEFINED if v is None else f"{v:.{digits}f}"


def write_metrics_csv(path: str | Path, report: MetricReport) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["metric", "value"])
        for name in METRIC_NAMES:
            w.writerow([METRIC_LABELS[name], _fmt(getattr(report, name))])


def read_metrics_csv(path: str | Path) -> dict[str, float | None]:
    out = {}
    with Path(path).open(newline="") as fh:
        for row in csv.DictReader(fh):
            out[row["metric"]] = None if row["value"] == UNDEFINED else float(row["value"])
    return out


def metrics_text(report: MetricReport, title: str = "", notes=()) -> str:
    lines = [title] if title else []
    for name in METRIC_NAMES:
        lines.append(f"{METRIC_LABELS[name]:<4} {_fmt(getattr(report, name), 4)}")
    lines.extend(f"note: {n}" for n in notes)
    return "\n".join(lines) + "\n"


def write_roc_csv(path: str | Path, curve: RocCurve) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["fpr", "tpr", "threshold"])
        for f, t, th in zip(curve.fpr, curve.tpr, curve.thresholds):
            w.writerow([f"{f:.6f}", f"{t:.6f}", "inf" if th == float("inf") else f"{th:.6f}"])


def write_trace_csv(path: str | Path, trace) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "loss"])
        for rec in trace:
            w.writerow([rec.epoch, f"{rec.loss:.8f}"])


def write_scores_csv(path: str | Path, ids, labels, scores) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id", "label", "glaucoma_score"])
        for i, y, s in zip(ids, labels, scores):
            w.writerow([i, y, f"{s:.8f}"])


def write_aggregate(csv_path: str | Path, txt_path: str | Path, agg: dict[str, Aggregate], column: str) -> None:
    """Fold aggregate as ``metric,mean,std,n`` plus a "mean ± std" text table."""
    with Path(csv_path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["metric", "mean", "std", "n"])
        for name in METRIC_NAMES:
            a = agg[name]
            w.writerow([METRIC_LABELS[name], _fmt(a.mean), _fmt(a.std), a.n])
    lines = [f"{'':<4} {column}"]
    lines += [f"{METRIC_LABELS[n]:<4} {agg[n].format()}" for n in METRIC_NAMES]
    Path(txt_path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_config(path: str | Path, values: dict) -> None:
    """Flat ``key=value`` file; keys sorted, ``None`` values omitted."""
    lines = [f"{k}={v}" for k, v in sorted(values.items()) if v is not None]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_config(path: str | Path) -> dict[str, str]:
    out = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"{path}: malformed line {line!r}")
        out[key.strip()] = value.strip()
    return out

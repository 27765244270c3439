"""Confusion-matrix figures of merit, ROC/AUC and fold aggregation.

The positive class is glaucoma. Undefined ratios (zero denominators) are
reported as ``None`` rather than 0.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .errors import ParameterError, UndefinedMetricError

METRIC_NAMES = ("sn", "spc", "ppv", "npv", "fs", "acc", "auc")
METRIC_LABELS = {"sn": "SN", "spc": "SPC", "ppv": "PPV", "npv": "NPV", "fs": "FS", "acc": "ACC", "auc": "AUC"}


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    fn: int
    fp: int
    tn: int

    def __post_init__(self):
        if min(self.tp, self.fn, self.fp, self.tn) < 0:
            raise ParameterError(f"confusion counts must be non-negative: {self}")

    @property
    def total(self) -> int:
        return self.tp + self.fn + self.fp + self.tn


@dataclass(frozen=True)
class MetricReport:
    sn: float | None
    spc: float | None
    ppv: float | None
    npv: float | None
    fs: float | None
    acc: float | None
    auc: float | None = None

    def as_dict(self) -> dict[str, float | None]:
        return asdict(self)


@dataclass(frozen=True)
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray  # threshold reaching each point; +inf for (0, 0)


def confusion(labels, scores, threshold: float = 0.5, positive: int = 0) -> ConfusionMatrix:
    """Counts with ``score >= threshold`` predicted positive.

    ``labels`` hold class ids; ``positive`` is the id scored by ``scores``
    (glaucoma = 0 by default).
    """
    y = np.asarray(labels)
    s = np.asarray(scores, dtype=np.float64)
    if y.shape != s.shape or y.ndim != 1:
        raise ParameterError(f"labels {y.shape} and scores {s.shape} must be equal-length vectors")
    if len(y) == 0:
        raise ParameterError("need at least one sample")
    pos = y == positive
    pred = s >= threshold
    return ConfusionMatrix(
        tp=int((pos & pred).sum()),
        fn=int((pos & ~pred).sum()),
        fp=int((~pos & pred).sum()),
        tn=int((~pos & ~pred).sum()),
    )


def _ratio(num: int, den: int) -> float | None:
    return num / den if den else None


def basic_metrics(cm: ConfusionMatrix) -> MetricReport:
    return MetricReport(
        sn=_ratio(cm.tp, cm.tp + cm.fn),
        spc=_ratio(cm.tn, cm.tn + cm.fp),
        ppv=_ratio(cm.tp, cm.tp + cm.fp),
        npv=_ratio(cm.tn, cm.tn + cm.fn),
        fs=_ratio(2 * cm.tp, 2 * cm.tp + cm.fp + cm.fn),
        acc=_ratio(cm.tp + cm.tn, cm.total),
    )


def roc_auc(labels, scores, positive: int = 0) -> tuple[RocCurve, float]:
    """ROC curve over the distinct scores (tied scores form one step) and its
    trapezoidal area, which equals P(s+ > s-) + P(s+ = s-) / 2."""
    y = np.asarray(labels)
    s = np.asarray(scores, dtype=np.float64)
    if y.shape != s.shape or y.ndim != 1:
        raise ParameterError("labels and scores must be equal-length vectors")
    pos = y == positive
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC is undefined unless both classes are present")
    order = np.argsort(-s, kind="stable")
    s_sorted, pos_sorted = s[order], pos[order]
    # Last index of each run of equal scores.
    ends = np.r_[np.nonzero(np.diff(s_sorted))[0], len(s_sorted) - 1]
    tps = np.cumsum(pos_sorted)[ends]
    fps = (ends + 1) - tps
    tpr = np.r_[0.0, tps / n_pos]
    fpr = np.r_[0.0, fps / n_neg]
    thresholds = np.r_[np.inf, s_sorted[ends]]
    auc = float(np.sum((fpr[1:] - fpr[:-1]) * (tpr[1:] + tpr[:-1]) / 2.0))
    return RocCurve(fpr, tpr, thresholds), auc


def evaluate_scores(labels, scores, threshold: float = 0.5, positive: int = 0) -> MetricReport:
    """Point metrics at ``threshold`` plus AUC (None when only one class is present)."""
    rep = basic_metrics(confusion(labels, scores, threshold, positive))
    try:
        _, auc = roc_auc(labels, scores, positive)
    except UndefinedMetricError:
        auc = None
    return MetricReport(**{**rep.as_dict(), "auc": auc})


@dataclass(frozen=True)
class Aggregate:
    mean: float | None
    std: float | None
    n: int  # reports contributing a defined value

    def format(self, digits: int = 4) -> str:
        if self.mean is None:
            return "undefined"
        if self.std is None:
            return f"{self.mean:.{digits}f}"
        return f"{self.mean:.{digits}f} ± {self.std:.{digits}f}"


def aggregate_folds(reports: list[MetricReport]) -> dict[str, Aggregate]:
    """Per-metric mean and sample (n - 1) standard deviation over folds.

    Undefined entries are skipped metric by metric; ``Aggregate.n`` records
    how many folds contributed. A metric defined in a single fold gets no
    standard deviation.
    """
    if len(reports) < 2:
        raise ParameterError("aggregation needs at least 2 reports")
    out = {}
    for name in METRIC_NAMES:
        vals = [getattr(r, name) for r in reports if getattr(r, name) is not None]
        if not vals:
            out[name] = Aggregate(None, None, 0)
            continue
        arr = np.asarray(vals, dtype=np.float64)
        std = float(arr.std(ddof=1)) if len(arr) > 1 else None
        out[name] = Aggregate(float(arr.mean()), std, len(arr))
    return out

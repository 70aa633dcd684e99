"""Confusion-based metrics, ROC-AUC, threshold search and domain-wise reports.

AMF (label 1) is the positive class throughout: sensitivity is atypical
recall, specificity is normal recall. A sample is called positive when its
probability is ``>= threshold``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.stats import rankdata


class UndefinedMetricError(ValueError):
    """A metric's denominator is zero because a class is absent."""


class MetricsInputError(ValueError):
    pass


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.tn, self.fn) < 0:
            raise MetricsInputError(f"negative confusion count in {self}")

    @property
    def positives(self) -> int:
        return self.tp + self.fn

    @property
    def negatives(self) -> int:
        return self.tn + self.fp

    @property
    def total(self) -> int:
        return self.positives + self.negatives


def _as_arrays(probs, labels) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(probs, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if p.shape != y.shape:
        raise MetricsInputError(f"probs has {p.size} entries but labels has {y.size}")
    if p.size == 0:
        raise MetricsInputError("empty input")
    if not np.all(np.isfinite(p)):
        raise MetricsInputError("scores must be finite")
    if not np.all(np.isin(y, (0, 1))):
        raise MetricsInputError("labels must be 0 or 1")
    return p, y.astype(np.int64)


def confusion_at_threshold(probs, labels, threshold: float) -> ConfusionCounts:
    p, y = _as_arrays(probs, labels)
    pred = p >= threshold
    pos = y == 1
    return ConfusionCounts(
        tp=int(np.sum(pred & pos)),
        fp=int(np.sum(pred & ~pos)),
        tn=int(np.sum(~pred & ~pos)),
        fn=int(np.sum(~pred & pos)),
    )


def sensitivity(c: ConfusionCounts) -> float:
    if c.positives == 0:
        raise UndefinedMetricError("sensitivity undefined: no positive (AMF) samples")
    return c.tp / c.positives


def specificity(c: ConfusionCounts) -> float:
    if c.negatives == 0:
        raise UndefinedMetricError("specificity undefined: no negative (NMF) samples")
    return c.tn / c.negatives


def accuracy(c: ConfusionCounts) -> float:
    if c.total == 0:
        raise UndefinedMetricError("accuracy undefined on zero samples")
    return (c.tp + c.tn) / c.total


def balanced_accuracy(c: ConfusionCounts) -> float:
    return balanced_accuracy_from_rates(sensitivity(c), specificity(c))


def balanced_accuracy_from_rates(sens: float, spec: float) -> float:
    return (sens + spec) / 2.0


def roc_auc(probs, labels) -> float:
    """Mann-Whitney estimate: P(score_pos > score_neg) + 0.5 P(tie)."""
    p, y = _as_arrays(probs, labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("ROC-AUC needs both classes")
    ranks = rankdata(p, method="average")
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


class SweepMode(str, Enum):
    POOLED = "pooled"
    PER_FOLD = "per_fold"


@dataclass(frozen=True)
class ThresholdPolicy:
    grid_lo: float = 0.35
    grid_hi: float = 0.75
    grid_step: float = 0.05
    mode: SweepMode = SweepMode.POOLED

    def __post_init__(self):
        object.__setattr__(self, "mode", SweepMode(self.mode))
        if self.grid_lo > self.grid_hi:
            raise MetricsInputError(f"grid_lo {self.grid_lo} exceeds grid_hi {self.grid_hi}")
        if not self.grid_step > 0:
            raise MetricsInputError(f"grid_step must be positive, got {self.grid_step}")

    def grid(self) -> np.ndarray:
        n = int(np.floor((self.grid_hi - self.grid_lo) / self.grid_step + 1e-9))
        # rounding keeps 0.35 + 3 * 0.05 == 0.5 exactly
        return np.round(self.grid_lo + self.grid_step * np.arange(n + 1), 10)

    def to_dict(self) -> dict:
        return {"grid_lo": self.grid_lo, "grid_hi": self.grid_hi, "grid_step": self.grid_step, "mode": self.mode.value}


def bac_curve(probs, labels, thresholds: Sequence[float]) -> np.ndarray:
    p, y = _as_arrays(probs, labels)
    pos = y == 1
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("threshold search needs both classes")
    t = np.asarray(thresholds, dtype=np.float64)[:, None]
    pred = p[None, :] >= t
    sens = (pred & pos).sum(axis=1) / n_pos
    spec = (~pred & ~pos).sum(axis=1) / n_neg
    return (sens + spec) / 2.0


def optimize_threshold(probs, labels, policy: ThresholdPolicy = ThresholdPolicy()) -> tuple[float, float]:
    """Grid threshold maximizing balanced accuracy; ties go to the smallest threshold."""
    grid = policy.grid()
    curve = bac_curve(probs, labels, grid)
    best = int(np.argmax(curve))  # first maximum == smallest threshold
    return float(grid[best]), float(curve[best])


def optimize_threshold_per_fold(
    fold_probs: Sequence, fold_labels: Sequence, policy: ThresholdPolicy = ThresholdPolicy()
) -> tuple[float, float, list[tuple[float, float]]]:
    """Per-fold sweeps plus the threshold maximizing fold-averaged BAC.

    Returns ``(threshold, mean_bac, [(fold_threshold, fold_bac), ...])``.
    """
    grid = policy.grid()
    curves = [bac_curve(p, y, grid) for p, y in zip(fold_probs, fold_labels)]
    per_fold = [(float(grid[int(np.argmax(c))]), float(c.max())) for c in curves]
    mean_curve = np.mean(curves, axis=0)
    best = int(np.argmax(mean_curve))
    return float(grid[best]), float(mean_curve[best]), per_fold


METRIC_COLUMNS = ("roc_auc", "accuracy", "sensitivity", "specificity", "balanced_accuracy")


@dataclass
class MetricsRow:
    name: str
    n: int
    n_pos: int
    n_neg: int
    roc_auc: float | None
    accuracy: float | None
    sensitivity: float | None
    specificity: float | None
    balanced_accuracy: float | None


def _safe(fn, *args):
    try:
        return fn(*args)
    except UndefinedMetricError:
        return None


def metrics_row(name: str, probs, labels, threshold: float) -> MetricsRow:
    p, y = _as_arrays(probs, labels)
    c = confusion_at_threshold(p, y, threshold)
    sens = _safe(sensitivity, c)
    spec = _safe(specificity, c)
    return MetricsRow(
        name=name,
        n=c.total,
        n_pos=c.positives,
        n_neg=c.negatives,
        roc_auc=_safe(roc_auc, p, y),
        accuracy=accuracy(c),
        sensitivity=sens,
        specificity=spec,
        balanced_accuracy=None if sens is None or spec is None else balanced_accuracy_from_rates(sens, spec),
    )


@dataclass
class MetricsReport:
    threshold: float
    rows: list[MetricsRow]
    extra: dict = field(default_factory=dict)

    @property
    def overall(self) -> MetricsRow:
        return self.rows[-1]

    def row(self, name: str) -> MetricsRow:
        for r in self.rows:
            if r.name == name:
                return r
        raise KeyError(name)

    def to_dict(self) -> dict:
        return {"threshold": self.threshold, "rows": [asdict(r) for r in self.rows], **self.extra}

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        extra = {k: v for k, v in d.items() if k not in ("threshold", "rows")}
        return cls(float(d["threshold"]), [MetricsRow(**r) for r in d["rows"]], extra)

    def to_table(self) -> str:
        return format_table(self)


def domainwise_report(probs, labels, domains, threshold: float) -> MetricsReport:
    """One row per domain (sorted by id) plus a pooled ``Overall`` row."""
    p, y = _as_arrays(probs, labels)
    d = np.asarray([str(v) for v in np.asarray(domains, dtype=object).ravel()])
    if d.shape != p.shape:
        raise MetricsInputError(f"domains has {d.size} entries, expected {p.size}")
    rows = [metrics_row(dom, p[d == dom], y[d == dom], threshold) for dom in sorted(set(d.tolist()))]
    rows.append(metrics_row("Overall", p, y, threshold))
    return MetricsReport(threshold=float(threshold), rows=rows)


def _fmt(v: float | None) -> str:
    return "-" if v is None else f"{v:.4f}"


def format_table(report: MetricsReport) -> str:
    header = ["Domain", "ROC AUC", "Accuracy", "Sensitivity", "Specificity", "Balanced Accuracy", "N"]
    body = [
        [r.name, *(_fmt(getattr(r, c)) for c in METRIC_COLUMNS), str(r.n)]
        for r in report.rows
    ]
    widths = [max(len(row[i]) for row in [header] + body) for i in range(len(header))]
    lines = [f"threshold = {report.threshold:.2f}"]
    lines.append("  ".join(h.ljust(w) for h, w in zip(header, widths)))
    lines.append("  ".join("-" * w for w in widths))
    for row in body:
        lines.append("  ".join([row[0].ljust(widths[0])] + [c.rjust(w) for c, w in zip(row[1:], widths[1:])]))
    return "\n".join(lines) + "\n"


def save_report(report: MetricsReport, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def load_report(path) -> MetricsReport:
    return MetricsReport.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

"""Fold-ensemble inference and the predictions file."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np

from .manifest import Manifest
from .preprocess import InputPipeline
from .trainer import (
    Checkpoint,
    CropDataset,
    model_from_checkpoint,
    predict_probs,
    preprocess_from_checkpoint,
)
from .model_zoo import get_backbone

PROB_DECIMALS = 6


class EnsembleError(ValueError):
    pass


class Aggregation(str, Enum):
    MEAN_PROB = "mean_prob"
    MEAN_LOGIT = "mean_logit"


def aggregate_probabilities(member_probs, mode: Aggregation = Aggregation.MEAN_PROB) -> np.ndarray:
    """Column-wise mean of a ``k x n`` member-probability matrix.

    The result is clipped into each column's ``[min, max]`` so identical
    members reproduce their probability exactly.
    """
    try:
        P = np.asarray(member_probs, dtype=np.float64)
    except ValueError as exc:
        raise EnsembleError(f"ragged member probabilities: {exc}") from None
    if P.ndim == 1:
        P = P[None, :]
    if P.ndim != 2 or P.shape[0] < 1:
        raise EnsembleError(f"expected a k x n matrix, got shape {P.shape}")
    mode = Aggregation(mode)
    if mode is Aggregation.MEAN_PROB:
        agg = P.mean(axis=0)
    else:
        eps = 1e-12
        Q = np.clip(P, eps, 1 - eps)
        agg = 1.0 / (1.0 + np.exp(-np.log(Q / (1 - Q)).mean(axis=0)))
    return np.clip(agg, P.min(axis=0), P.max(axis=0))


def predict_with_threshold(probs, threshold: float) -> np.ndarray:
    return (np.asarray(probs, dtype=np.float64) >= threshold).astype(np.int64)


@dataclass(frozen=True)
class PredictionRecord:
    crop_id: str
    member_probs: tuple[float, ...]
    prob: float
    label: int


class FoldEnsemble:
    """Mean-of-probabilities predictor over fold checkpoints."""

    def __init__(
        self,
        members: Sequence[Checkpoint],
        threshold: float = 0.5,
        aggregation: Aggregation = Aggregation.MEAN_PROB,
        weights_path=None,
    ):
        if not members:
            raise EnsembleError("an ensemble needs at least one member checkpoint")
        if not 0.0 < threshold < 1.0:
            raise EnsembleError(f"decision threshold must lie in (0, 1), got {threshold}")
        self.members = list(members)
        self.threshold = float(threshold)
        self.aggregation = Aggregation(aggregation)
        self.weights_path = weights_path

    def member_probs(self, manifest: Manifest, batch_size: int = 32) -> np.ndarray:
        rows = []
        for ckpt in self.members:
            spec = get_backbone(ckpt.backbone)
            pipe = InputPipeline(preprocess_from_checkpoint(ckpt), spec.norm_mean, spec.norm_std, None, train=False)
            model = model_from_checkpoint(ckpt, self.weights_path)
            rows.append(predict_probs(model, CropDataset(manifest, pipe), batch_size))
        return np.stack(rows)

    def predict(self, manifest: Manifest, batch_size: int = 32) -> list[PredictionRecord]:
        P = self.member_probs(manifest, batch_size)
        agg = aggregate_probabilities(P, self.aggregation)
        labels = predict_with_threshold(agg, self.threshold)
        return [
            PredictionRecord(r.crop_id, tuple(float(v) for v in P[:, i]), float(agg[i]), int(labels[i]))
            for i, r in enumerate(manifest.records)
        ]


def prediction_header(k: int) -> list[str]:
    return ["crop_id", *(f"prob_member_{j}" for j in range(k)), "prob_ensemble", "label"]


def export_predictions(records: Sequence[PredictionRecord], path) -> Path:
    if not records:
        raise EnsembleError("no prediction records to export")
    k = len(records[0].member_probs)
    if any(len(r.member_probs) != k for r in records):
        raise EnsembleError("records disagree on the number of ensemble members")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fmt = f"{{:.{PROB_DECIMALS}f}}"
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(prediction_header(k))
        for r in sorted(records, key=lambda r: r.crop_id):
            w.writerow([r.crop_id, *(fmt.format(p) for p in r.member_probs), fmt.format(r.prob), r.label])
    return path


def read_predictions(path) -> list[PredictionRecord]:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    k = len(header) - 3
    if k < 1 or header != prediction_header(k):
        raise EnsembleError(f"unexpected predictions header {header}")
    return [
        PredictionRecord(row[0], tuple(float(v) for v in row[1 : 1 + k]), float(row[1 + k]), int(row[2 + k]))
        for row in body
    ]


def validate_predictions_file(path, k: int | None = None, threshold: float | None = None) -> list[str]:
    """Schema check; returns a list of problems (empty when valid)."""
    problems: list[str] = []
    with Path(path).open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        return ["empty file"]
    header, body = rows[0], rows[1:]
    n_members = len(header) - 3
    if n_members < 1 or header != prediction_header(n_members):
        return [f"bad header {header}"]
    if k is not None and n_members != k:
        problems.append(f"expected {k} member columns, found {n_members}")
    ids = [row[0] for row in body]
    if ids != sorted(ids):
        problems.append("rows are not ordered by crop_id")
    if len(set(ids)) != len(ids):
        problems.append("duplicate crop_id rows")
    tol = 0.5 * 10.0**-PROB_DECIMALS
    for line, row in enumerate(body, start=2):
        if len(row) != len(header):
            problems.append(f"line {line}: {len(row)} fields, expected {len(header)}")
            continue
        probs = row[1 : 2 + n_members]
        for cell in probs:
            whole, _, frac = cell.partition(".")
            if len(frac) != PROB_DECIMALS or not whole.isdigit() or not frac.isdigit():
                problems.append(f"line {line}: probability {cell!r} not written at {PROB_DECIMALS} decimals")
        values = [float(c) for c in probs]
        members, ens = values[:-1], values[-1]
        if any(not 0.0 <= v <= 1.0 for v in values):
            problems.append(f"line {line}: probability outside [0, 1]")
        if not min(members) - tol <= ens <= max(members) + tol:
            problems.append(f"line {line}: ensemble probability outside member range")
        if row[-1] not in ("0", "1"):
            problems.append(f"line {line}: label {row[-1]!r} not 0/1")
        elif threshold is not None and int(row[-1]) != int(ens >= threshold) and abs(ens - threshold) > tol:
            problems.append(f"line {line}: label disagrees with threshold {threshold}")
    return problems

"""Ranking metrics for multi-label evaluation.

Average precision is the raw step sum p(i) * delta_r(i) over the ranked
prediction list (no interpolation); macro/weighted mAP aggregate it per
class, and GAP pools every (image, class) prediction into one global
ranking. Ties are broken by a stable sort on (-score, sample index,
class index) so every number is bit-reproducible.

Classes without a single positive have no defined AP; they are reported
as None and excluded from the mAP aggregates rather than counted as 0.
For GAP@K, positives truncated away by the per-sample top-K cut still
count in the recall denominator, so a GAP@K of 1 is only achievable when
K covers all positives.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np


def _check_scores_truth(scores: np.ndarray, truth: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=np.float64)
    truth = np.asarray(truth)
    if scores.shape != truth.shape:
        raise ValueError(f"scores shape {scores.shape} != truth shape {truth.shape}")
    if not np.all(np.isfinite(scores)):
        raise FloatingPointError("scores contain non-finite values")
    if not np.all((truth == 0) | (truth == 1)):
        raise ValueError("truth must be binary")
    return scores, truth.astype(np.int64)


def average_precision(scores: np.ndarray, truth: np.ndarray) -> float | None:
    """Area under the stepwise precision-recall curve for one class.

    Returns None when the class has no positives (AP is undefined there,
    which is distinct from an AP of 0).
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    truth = np.asarray(truth).ravel()
    if scores.shape != truth.shape:
        raise ValueError("scores and truth must have equal length")
    n_pos = int(np.sum(truth == 1))
    if n_pos == 0:
        return None
    order = np.argsort(-scores, kind="stable")
    hits = 0
    total = 0.0
    for rank, idx in enumerate(order, start=1):
        if truth[idx] == 1:
            hits += 1
            total += hits / rank
    return total / n_pos


def macro_map(aps: list[float | None]) -> float:
    """Unweighted mean AP over classes where AP is defined."""
    defined = [a for a in aps if a is not None]
    if not defined:
        raise ValueError("no class has a defined AP (no positives anywhere)")
    return float(sum(defined) / len(defined))


def weighted_map(aps: list[float | None], positives: np.ndarray) -> float:
    """Mean AP weighted by each class's positive count."""
    positives = np.asarray(positives, dtype=np.int64)
    if len(aps) != positives.shape[0]:
        raise ValueError("aps and positives must have equal length")
    num = 0.0
    den = 0
    for ap, n_pos in zip(aps, positives):
        if ap is None:
            continue
        num += ap * int(n_pos)
        den += int(n_pos)
    if den == 0:
        raise ValueError("no positives in any class")
    return num / den


def _pooled_ap(entries: list[tuple[float, int, int, int]], n_pos_total: int) -> float:
    """AP over a pooled prediction list of (score, sample, class, truth)."""
    if n_pos_total == 0:
        raise ValueError("no positives in the pooled predictions")
    ranked = sorted(entries, key=lambda e: (-e[0], e[1], e[2]))
    hits = 0
    total = 0.0
    for rank, entry in enumerate(ranked, start=1):
        if entry[3] == 1:
            hits += 1
            total += hits / rank
    return total / n_pos_total


def gap(scores: np.ndarray, truth: np.ndarray) -> float:
    """Global AP: every (image, class) prediction ranked in one list."""
    scores, truth = _check_scores_truth(scores, truth)
    n, n_classes = scores.shape
    entries = [(scores[i, j], i, j, int(truth[i, j]))
               for i in range(n) for j in range(n_classes)]
    return _pooled_ap(entries, int(truth.sum()))


def gap_at_k(scores: np.ndarray, truth: np.ndarray, k: int) -> float:
    """GAP over each sample's top-K predictions.

    Truncated positives still count in the recall denominator.
    """
    scores, truth = _check_scores_truth(scores, truth)
    n, n_classes = scores.shape
    if not 1 <= k <= n_classes:
        raise ValueError(f"k must lie in [1, {n_classes}], got {k}")
    entries = []
    for i in range(n):
        top = sorted(range(n_classes), key=lambda j: (-scores[i, j], j))[:k]
        entries.extend((scores[i, j], i, j, int(truth[i, j])) for j in top)
    return _pooled_ap(entries, int(truth.sum()))


@dataclass
class MetricReport:
    """Aggregate evaluation scores plus the per-class AP vector."""

    ap_per_class: list[float | None]
    macro_map: float
    weighted_map: float
    gap: float
    gap_at_k: dict[int, float]
    positives_per_class: list[int]

    def to_dict(self, class_ids: list[str] | None = None) -> dict:
        if class_ids is None:
            class_ids = [str(j) for j in range(len(self.ap_per_class))]
        if len(class_ids) != len(self.ap_per_class):
            raise ValueError("class_ids length does not match the AP vector")
        return {
            "ap_per_class": dict(zip(class_ids, self.ap_per_class)),
            "positives_per_class": dict(zip(class_ids, self.positives_per_class)),
            "macro_map": self.macro_map,
            "weighted_map": self.weighted_map,
            "gap": self.gap,
            "gap_at_k": {str(k): v for k, v in self.gap_at_k.items()},
        }

    def write_json(self, path, class_ids: list[str] | None = None) -> None:
        Path(path).write_text(json.dumps(self.to_dict(class_ids), sort_keys=True,
                                         indent=1) + "\n")


def evaluate(scores: np.ndarray, truth: np.ndarray, ks=(10,)) -> MetricReport:
    """Compute the full metric suite; ks larger than the class count are skipped."""
    scores, truth = _check_scores_truth(scores, truth)
    n_classes = scores.shape[1]
    aps = [average_precision(scores[:, j], truth[:, j]) for j in range(n_classes)]
    positives = truth.sum(axis=0)
    return MetricReport(
        ap_per_class=aps,
        macro_map=macro_map(aps),
        weighted_map=weighted_map(aps, positives),
        gap=gap(scores, truth),
        gap_at_k={k: gap_at_k(scores, truth, k) for k in ks if 1 <= k <= n_classes},
        positives_per_class=[int(p) for p in positives],
    )

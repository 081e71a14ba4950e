"""Evaluation metrics, dataset diagnostics and rank statistics."""

from __future__ import annotations

import json
import math
from typing import Optional, Sequence

import numpy as np
from scipy import stats

from .datamodel import ScoreMatrix


def _check_pair(preds, labels):
    preds, labels = np.asarray(preds), np.asarray(labels)
    if preds.shape != labels.shape:
        raise ValueError("preds and labels differ in length")
    if preds.size == 0:
        raise ValueError("empty input")
    return preds, labels


def accuracy(preds, labels) -> float:
    preds, labels = _check_pair(preds, labels)
    return float(np.mean(preds == labels))


def macro_f1(preds, labels, num_classes: int) -> float:
    """Unweighted mean of per-class F1; a class with no support and no predictions scores 0."""
    preds, labels = _check_pair(preds, labels)
    scores = []
    for k in range(num_classes):
        tp = np.sum((preds == k) & (labels == k))
        fp = np.sum((preds == k) & (labels != k))
        fn = np.sum((preds != k) & (labels == k))
        denom = 2 * tp + fp + fn
        scores.append(0.0 if denom == 0 else 2 * tp / denom)
    return float(np.mean(scores))


def shift_proxy(acc_source: float, acc_target: float) -> float:
    """Relative accuracy drop from source to target of a non-adapted classifier."""
    if acc_source <= 0:
        raise ValueError("shift proxy undefined for zero source accuracy")
    return (acc_source - acc_target) / acc_source


def imbalance_score(labels, num_classes: int) -> tuple[float, bool]:
    """Normalized class entropy and the ``I < 0.95`` high-imbalance flag."""
    if num_classes < 2:
        raise ValueError("imbalance score needs K >= 2")
    counts = np.bincount(np.asarray(labels, dtype=int), minlength=num_classes)
    p = counts / counts.sum()
    h = -np.sum(p[p > 0] * np.log(p[p > 0]))
    score = float(h / math.log(num_classes))
    return score, score < 0.95


def imbalance_from_proportions(p) -> float:
    p = np.asarray(p, dtype=float)
    nz = p[p > 0]
    return float(-np.sum(nz * np.log(nz)) / math.log(len(p)))


def _values(scores) -> np.ndarray:
    values = scores.values if isinstance(scores, ScoreMatrix) else np.asarray(scores, dtype=float)
    if not np.isfinite(values).all():
        raise ValueError("score matrix has missing entries")
    return values


def rank_columns(scores) -> np.ndarray:
    """Per-column ranks, 1 = highest accuracy, ties share the mean position."""
    values = _values(scores)
    return np.column_stack([stats.rankdata(-values[:, j], method="average")
                            for j in range(values.shape[1])])


def average_ranks(scores) -> np.ndarray:
    return rank_columns(scores).mean(axis=1)


def friedman_test(scores) -> tuple[float, float, np.ndarray]:
    """Chi-square Friedman statistic on tie-averaged ranks (no tie correction)."""
    values = _values(scores)
    k, n = values.shape
    if k < 3 or n < 2:
        raise ValueError(f"Friedman test needs >= 3 methods and >= 2 scenarios, got {k}x{n}")
    ranks = average_ranks(values)
    stat = 12.0 * n / (k * (k + 1)) * float(np.sum((ranks - (k + 1) / 2.0) ** 2))
    p = float(stats.chi2.sf(stat, k - 1))
    return stat, p, ranks


def _signed_rank_parts(a, b):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError("paired samples must have equal length")
    d = a - b
    wins, ties, losses = int(np.sum(d > 0)), int(np.sum(d == 0)), int(np.sum(d < 0))
    d = d[d != 0]
    ranks = stats.rankdata(np.abs(d), method="average")
    return d, ranks, (wins, ties, losses)


def _exact_pvalue(d, ranks) -> float:
    # average ranks are multiples of 1/2, so doubled ranks are integers
    r2 = np.rint(2 * ranks).astype(int)
    total = int(r2.sum())
    counts = np.zeros(total + 1)
    counts[0] = 1.0
    for r in r2:
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[: total + 1 - r]
        counts = counts + shifted
    probs = counts / counts.sum()
    w = int(r2[d > 0].sum())
    lower = probs[: w + 1].sum()
    upper = probs[w:].sum()
    return float(min(1.0, 2 * min(lower, upper)))


def _normal_pvalue(d, ranks) -> float:
    n = len(d)
    w = ranks[d > 0].sum()
    mean = n * (n + 1) / 4.0
    _, tie_counts = np.unique(ranks, return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - np.sum(tie_counts ** 3 - tie_counts) / 48.0
    if var <= 0:
        return 1.0
    z = (w - mean) / math.sqrt(var)
    return float(min(1.0, 2 * stats.norm.sf(abs(z))))


def wilcoxon_signed_rank(a, b, method: str = "auto") -> tuple[float, int, int, int]:
    """Two-sided signed-rank test; returns ``(p, wins, ties, losses)`` of a over b.

    Exact enumeration of sign assignments up to 25 non-zero pairs, normal
    approximation with tie correction above.
    """
    d, ranks, (wins, ties, losses) = _signed_rank_parts(a, b)
    if len(d) == 0:
        return 1.0, wins, ties, losses
    if len(d) < 5:
        raise ValueError(f"need at least 5 non-zero differences, got {len(d)}")
    if method == "auto":
        method = "exact" if len(d) <= 25 else "normal"
    p = _exact_pvalue(d, ranks) if method == "exact" else _normal_pvalue(d, ranks)
    return p, wins, ties, losses


def cd_diagram_data(ranks: Sequence[float], names: Sequence[str],
                    friedman: Optional[tuple] = None, title: str = "") -> dict:
    """Methods ordered by average rank (best first) and the rank axis bounds."""
    ranks = [float(r) for r in ranks]
    if len(ranks) != len(names):
        raise ValueError("ranks and names differ in length")
    order = sorted(range(len(ranks)), key=lambda i: (ranks[i], i))
    record = {
        "kind": "average_rank_diagram",
        "title": title,
        "methods": [{"name": str(names[i]), "average_rank": ranks[i]} for i in order],
        "axis": {"lowest_rank": 1, "highest_rank": max(len(ranks), 1)},
    }
    if friedman is not None:
        record["friedman"] = {"statistic": float(friedman[0]), "p_value": float(friedman[1])}
    return record


def cd_diagram_json(record: dict) -> str:
    return json.dumps(record, sort_keys=True)

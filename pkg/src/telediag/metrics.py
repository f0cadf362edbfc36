"""Evaluation metrics for detection, triage and localization."""

from __future__ import annotations

from typing import Sequence


def prf(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    """Precision, recall and F1 from raw counts. Any 0/0 is defined as 0."""
    if tp < 0 or fp < 0 or fn < 0:
        raise ValueError("counts must be non-negative")
    precision = tp / (tp + fp) if tp + fp > 0 else 0.0
    recall = tp / (tp + fn) if tp + fn > 0 else 0.0
    f1 = (
        2 * precision * recall / (precision + recall)
        if precision + recall > 0
        else 0.0
    )
    return precision, recall, f1


def per_class_counts(
    y_true: Sequence[str], y_pred: Sequence[str], classes: Sequence[str] | None = None
) -> dict[str, tuple[int, int, int]]:
    """(tp, fp, fn) per class. ``classes`` defaults to the labels seen in y_true."""
    if len(y_true) != len(y_pred):
        raise ValueError("y_true and y_pred lengths differ")
    if classes is None:
        classes = sorted(set(y_true))
    counts = {}
    for c in classes:
        tp = sum(1 for t, p in zip(y_true, y_pred) if t == c and p == c)
        fp = sum(1 for t, p in zip(y_true, y_pred) if t != c and p == c)
        fn = sum(1 for t, p in zip(y_true, y_pred) if t == c and p != c)
        counts[c] = (tp, fp, fn)
    return counts


def weighted_prf(counts: dict[str, tuple[int, int, int]]) -> tuple[float, float, float]:
    """Support-weighted mean of per-class precision/recall/F1.

    Support of a class is tp + fn (its number of true examples).
    """
    total = sum(tp + fn for tp, _, fn in counts.values())
    if total == 0:
        raise ValueError("zero total support")
    wp = wr = wf = 0.0
    for tp, fp, fn in counts.values():
        support = tp + fn
        p, r, f = prf(tp, fp, fn)
        wp += support * p
        wr += support * r
        wf += support * f
    return wp / total, wr / total, wf / total


def weighted_f1(counts: dict[str, tuple[int, int, int]]) -> float:
    return weighted_prf(counts)[2]


def topk_metrics(
    ranked: Sequence[Sequence[int]], truths: Sequence[int]
) -> tuple[float, float, float, float]:
    """(Top@1, Top@3, Top@5, Avg@5) over a set of ranked-instance lists.

    Top@K is the fraction of cases whose ground-truth instance appears in the
    first K entries; Avg@5 is the mean of Top@1..Top@5. Each ranked list must
    contain its case's ground truth.
    """
    if len(ranked) != len(truths):
        raise ValueError("one ranking per ground truth required")
    if not ranked:
        raise ValueError("no cases to score")
    ranks = []
    for lst, truth in zip(ranked, truths):
        try:
            ranks.append(list(lst).index(truth) + 1)  # 1-based rank
        except ValueError:
            raise ValueError(f"ground truth {truth} absent from ranked list") from None
    n = len(ranks)
    top_at = {k: sum(1 for r in ranks if r <= k) / n for k in range(1, 6)}
    avg5 = sum(top_at[k] for k in range(1, 6)) / 5
    return top_at[1], top_at[3], top_at[5], avg5

"""Pair-counting clustering metrics computed from a contingency table."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class ContingencyTable:
    counts: np.ndarray

    @property
    def row_sums(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    @property
    def col_sums(self) -> np.ndarray:
        return self.counts.sum(axis=0)

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def contingency(labels_a, labels_b) -> ContingencyTable:
    a = np.asarray(labels_a).ravel()
    b = np.asarray(labels_b).ravel()
    if a.shape != b.shape:
        raise ValueError(f"label vectors differ in length: {a.size} vs {b.size}")
    if a.size == 0:
        raise ValueError("need at least one labelled instance")
    _, ia = np.unique(a, return_inverse=True)
    _, ib = np.unique(b, return_inverse=True)
    counts = np.zeros((ia.max() + 1, ib.max() + 1), dtype=np.int64)
    np.add.at(counts, (ia, ib), 1)
    return ContingencyTable(counts)


def _pairs(n):
    # Exact integer C(n, 2), elementwise.
    n = np.asarray(n, dtype=np.int64)
    return n * (n - 1) // 2


def _pair_counts(table: ContingencyTable):
    together_both = int(_pairs(table.counts).sum())
    together_a = int(_pairs(table.row_sums).sum())
    together_b = int(_pairs(table.col_sums).sum())
    return together_both, together_a, together_b, int(_pairs(table.total))


def adjusted_rand_index(labels_a, labels_b) -> float:
    """Hubert-Arabie adjusted Rand index.

    Evaluated as a ratio of Python integers, so the result is the correctly
    rounded value of the exact rational index.
    """
    index, sum_a, sum_b, total_pairs = _pair_counts(contingency(labels_a, labels_b))
    if total_pairs == 0:
        return 1.0
    # Both sides of (index - E) / (max - E) scaled by 2 * total_pairs.
    num = 2 * (index * total_pairs - sum_a * sum_b)
    den = (sum_a + sum_b) * total_pairs - 2 * sum_a * sum_b
    if den == 0:
        # Both partitions are all-singletons or all-in-one; agreement is perfect.
        return 1.0
    return num / den


def pairwise_f(pred, truth) -> float:
    """Pairwise F1 over all instance pairs (0/0 conventions map to 0).

    With tp > 0 the harmonic mean of pair precision and recall reduces to
    2 tp / (pairs together in pred + pairs together in truth).
    """
    tp, same_pred, same_truth, _ = _pair_counts(contingency(pred, truth))
    if tp == 0:
        return 0.0
    return 2 * tp / (same_pred + same_truth)

"""Clustering agreement metrics computed from the contingency table.

All three metrics are label-permutation invariant and accept any integer
labelings of equal length.  Accuracy matches predicted clusters to true
classes by optimal bipartite assignment; NMI normalizes mutual information
by the arithmetic mean of the two entropies; ARI is the standard adjusted
index.  Degenerate partitions follow the usual conventions: a zero-entropy
partition scores 0 against a different partition and 1 when both sides are
the same single cluster.
"""

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import ShapeError


def _contingency(pred, true):
    pred = np.asarray(pred, dtype=np.int64).reshape(-1)
    true = np.asarray(true, dtype=np.int64).reshape(-1)
    if pred.shape[0] != true.shape[0]:
        raise ShapeError("label arrays differ in length")
    if pred.shape[0] == 0:
        raise ShapeError("label arrays are empty")
    _, pi = np.unique(pred, return_inverse=True)
    _, ti = np.unique(true, return_inverse=True)
    table = np.zeros((pi.max() + 1, ti.max() + 1), dtype=np.int64)
    np.add.at(table, (pi, ti), 1)
    return table


def accuracy(pred, true):
    """Fraction of samples matched under the best cluster-to-class map."""
    table = _contingency(pred, true)
    rows, cols = linear_sum_assignment(table, maximize=True)
    return float(table[rows, cols].sum()) / float(table.sum())


def nmi(pred, true):
    """Mutual information over the arithmetic mean of the entropies."""
    table = _contingency(pred, true).astype(np.float64)
    n = table.sum()
    a = table.sum(axis=1)
    b = table.sum(axis=0)

    def entropy(counts):
        p = counts[counts > 0] / n
        return float(-(p * np.log(p)).sum())

    h_pred, h_true = entropy(a), entropy(b)
    if h_pred == 0.0 and h_true == 0.0:
        return 1.0          # both single-cluster: identical partitions
    nz = table > 0
    p = table[nz] / n
    outer = (a[:, None] * b[None, :])[nz] / (n * n)
    mi = float((p * np.log(p / outer)).sum())
    denom = 0.5 * (h_pred + h_true)
    value = mi / denom
    return float(min(max(value, 0.0), 1.0))


def ari(pred, true):
    """Adjusted Rand index (chance-corrected pair-counting agreement)."""
    table = _contingency(pred, true).astype(np.float64)
    n = table.sum()

    def comb2(x):
        return x * (x - 1.0) / 2.0

    sum_ij = comb2(table).sum()
    sum_a = comb2(table.sum(axis=1)).sum()
    sum_b = comb2(table.sum(axis=0)).sum()
    total = comb2(n)
    if total == 0.0:
        return 1.0          # a single sample agrees with itself
    expected = sum_a * sum_b / total
    max_index = 0.5 * (sum_a + sum_b)
    if max_index == expected:
        return 1.0          # both partitions trivial and identical
    return float((sum_ij - expected) / (max_index - expected))

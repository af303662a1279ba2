"""Affinity graphs and graph-guided contrastive losses.

Two graph constructions drive the objectives:

* a global cosine-similarity graph over the concatenated contrastive
  features of every view in the batch, from which the most-similar pairs
  per anchor become positives and the least-similar become negatives;
* per view pair, Gaussian kernels on the co-available features whose
  product propagates neighborhood structure across views; its diagonal
  weights the same-sample positive pairs of the local contrastive loss.

The kernel weights are treated as constants (no gradient flows through
them); gradients flow only through the similarity entries that the pair
sets select, never through set membership itself.
"""

import logging
import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NumericError, ShapeError
from . import nn
from .nn import Tensor

logger = logging.getLogger(__name__)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _normalize_rows(t):
    """Scale each row to unit Euclidean norm (differentiable)."""
    sq = nn.tsum(nn.mul(t, t), axis=1, keepdims=True)
    norms = nn.sqrt(sq)
    if np.any(norms.data == 0.0):
        raise NumericError("zero-norm feature row (degenerate embedding)")
    return nn.div(t, norms)


# ---------------------------------------------------------------------------
# global graph and pair selection
# ---------------------------------------------------------------------------

@dataclass
class GlobalAffinityGraph:
    """Cosine similarities over the stacked per-view features.

    ``owners[r]`` records which (view, batch position) produced stacked
    row r.  ``sims`` stays attached to the tape so the contrastive loss
    can differentiate through the selected entries.
    """

    stack: Tensor        # (N_c, head_dim)
    sims: Tensor         # (N_c, N_c), diagonal pinned to 1
    owners: np.ndarray   # (N_c, 2) int: view id, batch position

    @property
    def size(self):
        return self.stack.data.shape[0]


def build_global_graph(view_features, positions=None):
    """Stack every view's features and compute their cosine graph.

    ``positions`` optionally gives, per view, the batch positions of each
    feature row (defaults to 0..rows-1); empty views are skipped.
    """
    parts, owner_rows = [], []
    for v, h in enumerate(view_features):
        h = _as_tensor(h)
        rows = h.data.shape[0]
        if rows == 0:
            continue
        pos = (np.arange(rows) if positions is None
               else np.asarray(positions[v], dtype=np.intp))
        if pos.shape[0] != rows:
            raise ShapeError("positions do not match the feature rows")
        parts.append(h)
        owner_rows.append(np.column_stack([np.full(rows, v, dtype=np.intp), pos]))
    if not parts:
        raise ShapeError("no features available in any view")
    stack = nn.concat_rows(parts) if len(parts) > 1 else parts[0]
    normalized = _normalize_rows(stack)
    sims = nn.matmul(normalized, nn.transpose(normalized))
    # self-similarity is 1 by definition; the entry never reaches a loss
    # (pair selection excludes the diagonal) so pinning it is gradient-safe
    np.fill_diagonal(sims.data, 1.0)
    return GlobalAffinityGraph(stack=stack, sims=sims,
                               owners=np.concatenate(owner_rows, axis=0))


@dataclass
class PairSets:
    """Per-anchor positive and negative partner indices.

    Both matrices have one row per anchor; entry counts are uniform
    because every anchor sees the same number of candidates.
    """

    positives: np.ndarray    # (N_c, n_pos)
    negatives: np.ndarray    # (N_c, n_neg)
    pos_percent: float
    neg_percent: float

    @property
    def anchor_count(self):
        return self.positives.shape[0]

    def positive_pairs(self):
        """Flattened (anchor, partner) index arrays."""
        n, k = self.positives.shape
        return np.repeat(np.arange(n), k), self.positives.reshape(-1)


def select_pairs(graph, pos_percent, neg_percent):
    """Pick each anchor's most/least similar partners by percentage.

    Per anchor the self-index is excluded; the ``ceil(pos% * (N_c - 1))``
    largest remaining similarities become positives and the
    ``ceil(neg% * (N_c - 1))`` smallest become negatives, ties broken by
    lower index.  Positives are taken first and removed from the negative
    candidates, which keeps the sets disjoint; when the two rounded counts
    would overlap (only possible when pos+neg is at the 100 cap on a tiny
    graph) the negative count shrinks to the remaining candidates.
    Selection is discrete: no gradient flows through it.
    """
    if not (0.0 < pos_percent and 0.0 < neg_percent):
        raise ConfigError("pos and neg percentages must be positive")
    if pos_percent + neg_percent > 100.0:
        raise ConfigError("pos + neg must not exceed 100")
    n = graph.size
    candidates = n - 1
    if candidates < 1:
        raise ConfigError("pair selection needs at least 2 stacked features")
    n_pos = math.ceil(pos_percent * candidates / 100.0)
    n_neg = min(math.ceil(neg_percent * candidates / 100.0), candidates - n_pos)
    if n_neg < 1:
        raise ConfigError(
            f"no negative candidates remain ({candidates} candidates, "
            f"{n_pos} positives per anchor)")

    sims = graph.sims.data
    desc_key = -sims
    np.fill_diagonal(desc_key, np.inf)          # push self past every candidate
    order = np.argsort(desc_key, axis=1, kind="stable")
    positives = order[:, :n_pos]

    asc_key = sims.copy()
    rows = np.arange(n)[:, None]
    asc_key[rows, positives] = np.inf           # positives leave the pool
    np.fill_diagonal(asc_key, np.inf)
    order = np.argsort(asc_key, axis=1, kind="stable")
    negatives = order[:, :n_neg]

    return PairSets(positives=positives, negatives=negatives,
                    pos_percent=float(pos_percent),
                    neg_percent=float(neg_percent))


def ggc_loss(graph, pairs, temperature, include_positive_in_denominator=False):
    """Contrastive loss over the global graph's selected pairs.

    For every positive pair (i, j):
    ``-log( exp(G_ij / t) / sum_{k in neg(i)} exp(G_ik / t) )``.
    The denominator runs over the negatives only; the optional flag adds
    the pair's own positive term to it (the conventional variant).
    """
    if temperature <= 0.0:
        raise ConfigError("temperature must be positive")
    if pairs.positives.shape[0] != graph.size:
        raise ShapeError("pair sets do not match the graph")
    if pairs.negatives.shape[1] < 1:
        raise ConfigError("anchors with positives need at least one negative")
    inv_t = 1.0 / temperature
    anchors, partners = pairs.positive_pairs()
    pos_vals = nn.gather_pairs(graph.sims, anchors, partners)

    if include_positive_in_denominator:
        cols = np.concatenate([pairs.negatives[anchors], partners[:, None]],
                              axis=1)
        den = nn.logsumexp_rows(nn.mul(nn.gather_cols(graph.sims, cols,
                                                      rows=anchors), inv_t))
        per_pair_den = den
    else:
        neg_vals = nn.gather_cols(graph.sims, pairs.negatives)
        den = nn.logsumexp_rows(nn.mul(neg_vals, inv_t))       # (N_c,)
        per_pair_den = nn.take_rows(den, anchors)
    return nn.sub(nn.tsum(per_pair_den), nn.tsum(nn.mul(pos_vals, inv_t)))


# ---------------------------------------------------------------------------
# local kernels
# ---------------------------------------------------------------------------

def _sqdist(a, b):
    """Exact pairwise squared distances (broadcasted; symmetric for a is b)."""
    diff = a[:, None, :] - b[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def local_affinity(h_u, h_v, sigma):
    """Gaussian kernel exp(-||h_i - h_j||^2 / sigma) between feature sets."""
    if sigma <= 0.0:
        raise ConfigError("sigma must be positive")
    a = h_u.data if isinstance(h_u, Tensor) else np.asarray(h_u, dtype=np.float64)
    b = h_v.data if isinstance(h_v, Tensor) else np.asarray(h_v, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError("feature sets must be 2-D with equal widths")
    return np.exp(-_sqdist(a, b) / sigma)


def median_sigma(h_u, h_v):
    """Median of all squared cross-view distances; 1.0 if the median is 0."""
    a = h_u.data if isinstance(h_u, Tensor) else np.asarray(h_u, dtype=np.float64)
    b = h_v.data if isinstance(h_v, Tensor) else np.asarray(h_v, dtype=np.float64)
    med = float(np.median(_sqdist(a, b)))
    return med if med > 0.0 else 1.0


def high_order_graph(w_uv, w_vv):
    """Propagated affinities: cross kernel times the within-view kernel."""
    w_uv = np.asarray(w_uv, dtype=np.float64)
    w_vv = np.asarray(w_vv, dtype=np.float64)
    if w_uv.shape != w_vv.shape or w_uv.ndim != 2 or w_uv.shape[0] != w_uv.shape[1]:
        raise ShapeError("kernels must be square matrices of equal shape")
    return w_uv @ w_vv.T


def high_order_diag(w_uv, w_vv):
    """Diagonal of :func:`high_order_graph` without forming the product."""
    w_uv = np.asarray(w_uv, dtype=np.float64)
    w_vv = np.asarray(w_vv, dtype=np.float64)
    if w_uv.shape != w_vv.shape:
        raise ShapeError("kernels must have equal shapes")
    return np.einsum("ij,ij->i", w_uv, w_vv)


# ---------------------------------------------------------------------------
# pairwise / locally weighted contrastive losses
# ---------------------------------------------------------------------------

def _cross_view_contrast(h_u, h_v, temperature, log_weights=None):
    """Shared core of the cross-view losses.

    Anchors are view u's rows.  The positive of anchor i is view v's row i;
    the denominator sums over all other rows of both views (2(n-1) terms).
    ``log_weights`` adds a constant -sum(log w_i) (the weighting term).
    """
    if temperature <= 0.0:
        raise ConfigError("temperature must be positive")
    h_u, h_v = _as_tensor(h_u), _as_tensor(h_v)
    n = h_u.data.shape[0]
    if h_v.data.shape[0] != n:
        raise ShapeError("both views must provide the same co-available rows")
    if n < 2:
        logger.warning("cross-view contrast skipped: %d co-available rows", n)
        return Tensor(0.0)
    inv_t = 1.0 / temperature
    un = _normalize_rows(h_u)
    vn = _normalize_rows(h_v)
    s_uu = nn.matmul(un, nn.transpose(un))
    s_uv = nn.matmul(un, nn.transpose(vn))
    sims = nn.concat_cols([s_uu, s_uv])                   # (n, 2n)

    keep = np.ones((n, 2 * n), dtype=bool)
    idx = np.arange(n)
    keep[idx, idx] = False                                # the anchor itself
    keep[idx, n + idx] = False                            # its positive
    den = nn.logsumexp_rows(nn.mul(sims, inv_t), keep)    # (n,)

    pos = nn.gather_pairs(s_uv, idx, idx)
    loss = nn.sub(nn.tsum(den), nn.tsum(nn.mul(pos, inv_t)))
    if log_weights is not None:
        loss = nn.sub(loss, Tensor(float(np.sum(log_weights))))
    return loss


def pairwise_contrastive_loss(h_u, h_v, temperature):
    """Unweighted cross-view contrastive loss over same-index pairs."""
    return _cross_view_contrast(h_u, h_v, temperature)


def lwc_loss(h_u, h_v, weights, temperature):
    """Cross-view contrastive loss weighted by propagated affinities.

    ``weights`` is the propagated-affinity matrix (its diagonal is used)
    or the diagonal itself; the weights are constants for gradients.
    """
    h_u, h_v = _as_tensor(h_u), _as_tensor(h_v)
    n = h_u.data.shape[0]
    if n < 2:
        logger.warning("lwc_loss skipped: %d co-available rows", n)
        return Tensor(0.0)
    w = np.asarray(weights, dtype=np.float64)
    diag = np.diagonal(w) if w.ndim == 2 else w
    if diag.shape[0] != n:
        raise ShapeError("weights do not match the co-available rows")
    if not np.all(diag > 0.0) or not np.isfinite(diag).all():
        raise NumericError("pair weights must be finite and positive "
                           "(kernel underflow or bad sigma)")
    return _cross_view_contrast(h_u, h_v, temperature, log_weights=np.log(diag))


def lwc_total(h_list, co_available, temperature, sigma="median",
              normalize_weights=False):
    """Sum the weighted loss over all unordered view pairs.

    ``co_available`` maps (u, v) with u < v to the pair's local row
    indices.  Per pair and per batch, the kernels are rebuilt from the
    current features: sigma comes from the median heuristic (or a fixed
    value), the cross- and within-view kernels share it, and only the
    propagated diagonal is materialized.  Pairs with fewer than 2 common
    samples are skipped with a warning.
    """
    total = Tensor(0.0)
    n_views = len(h_list)
    for u in range(n_views):
        for v in range(u + 1, n_views):
            rows_u, rows_v = co_available[(u, v)]
            if len(rows_u) != len(rows_v):
                raise ShapeError("co-availability index lengths differ")
            if len(rows_u) < 2:
                logger.warning("view pair (%d, %d) skipped: %d common samples",
                               u, v, len(rows_u))
                continue
            a = nn.take_rows(_as_tensor(h_list[u]), rows_u)
            b = nn.take_rows(_as_tensor(h_list[v]), rows_v)
            if sigma == "median":
                s = median_sigma(a.data, b.data)
            else:
                s = float(sigma)
            w_uv = local_affinity(a.data, b.data, s)
            w_vv = local_affinity(b.data, b.data, s)
            diag = high_order_diag(w_uv, w_vv)
            if normalize_weights:
                diag = diag / diag.max()
            total = nn.add(total, lwc_loss(a, b, diag, temperature))
    return total

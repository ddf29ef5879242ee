"""Trust scores for pairwise predictions and the edge-weight matrix built from them.

A trust score compares the distance from a query embedding to the nearest
reference point of the closest *other* class with the distance to the
nearest reference point of the *predicted* class.  Reference points are
thinned per class by kNN density so isolated training points do not
vouch for anything.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from archgraph.errors import DimensionMismatch, InsufficientData, MissingEdgeData

DEFAULT_CAP = 1e6
DEFAULT_ALPHA = 0.1
DEFAULT_K = 5


@dataclass(frozen=True)
class ReferenceSet:
    class_points: tuple  # one (n_c, d) array per class
    alpha: float
    k: int

    @property
    def dim(self):
        return self.class_points[0].shape[1]

    def nearest_distance(self, x, c, chunk=4096):
        """Euclidean distance from each row of ``x`` to the nearest point of class ``c``."""
        pts = self.class_points[c]
        pts32 = pts.astype(np.float32)
        sq = (pts32**2).sum(axis=1)
        out = np.empty(len(x))
        for lo in range(0, len(x), chunk):
            q = x[lo : lo + chunk]
            # float32 only picks the neighbour; the distance itself is exact
            d2 = sq[None, :] - 2.0 * (q.astype(np.float32) @ pts32.T)
            nearest = np.argmin(d2, axis=1)
            # recompute exactly so coincident points give a true zero
            out[lo : lo + chunk] = np.linalg.norm(q - pts[nearest], axis=1)
        return out


def _density_filter(points, alpha, k):
    if alpha == 0 or len(points) == 0:
        return points
    # k+1 because each point is its own nearest neighbour
    dist, _ = cKDTree(points).query(points, k=k + 1)
    radius = dist[:, -1]
    n_drop = int(np.floor(alpha * len(points)))
    if n_drop == 0:
        return points
    keep = np.sort(np.argsort(radius, kind="stable")[: len(points) - n_drop])
    return points[keep]


def build_reference_set(embeddings, labels, alpha=DEFAULT_ALPHA, k=DEFAULT_K) -> ReferenceSet:
    """Split labelled embeddings by class and drop the sparsest ``alpha`` fraction.

    Points are ranked by the distance to their k-th nearest same-class
    neighbour; the ``floor(alpha * n_c)`` largest are removed.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    y = np.asarray(labels)
    if x.ndim != 2 or len(x) != len(y):
        raise DimensionMismatch("embeddings must be (n, d) with one label per row")
    if not 0.0 <= alpha < 1.0:
        raise ValueError("alpha must lie in [0, 1)")
    if k < 1:
        raise ValueError("k must be positive")
    if set(np.unique(y).tolist()) - {0, 1}:
        raise ValueError("labels must be binary (0 or 1)")
    classes = []
    for c in (0, 1):
        pts = x[y == c]
        if len(pts) == 0:
            raise InsufficientData(f"class {c} has no reference points")
        if alpha > 0 and len(pts) < k + 1:
            raise InsufficientData(f"class {c} has {len(pts)} points, need at least k+1={k + 1}")
        pts = _density_filter(pts, alpha, k)
        if len(pts) == 0:
            raise InsufficientData(f"filtering emptied class {c}")
        classes.append(pts)
    return ReferenceSet(tuple(classes), alpha, k)


def trust_scores(x, y_pred, ref: ReferenceSet, t_max=DEFAULT_CAP) -> np.ndarray:
    """Vectorised trust score for rows of ``x`` with predicted classes ``y_pred``."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y_pred = np.asarray(y_pred, dtype=np.intp).reshape(-1)
    if x.shape[1] != ref.dim:
        raise DimensionMismatch(f"query dimension {x.shape[1]} != reference dimension {ref.dim}")
    if len(y_pred) != len(x):
        raise DimensionMismatch("one predicted class per query is required")
    d = np.stack([ref.nearest_distance(x, c) for c in (0, 1)], axis=1)
    rows = np.arange(len(x))
    d_pred = d[rows, y_pred]
    d_other = d[rows, 1 - y_pred]
    with np.errstate(divide="ignore", invalid="ignore"):
        score = np.where(d_pred > 0, d_other / np.where(d_pred > 0, d_pred, 1.0), t_max)
    return np.minimum(score, t_max)


def trust_score(x, y_pred, ref: ReferenceSet, t_max=DEFAULT_CAP) -> float:
    """Distance to the nearest other-class point over distance to the nearest predicted-class point.

    Capped at ``t_max``; a query sitting on a predicted-class reference
    point scores exactly ``t_max``.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise DimensionMismatch("trust_score takes a single vector")
    return float(trust_scores(x[None, :], [y_pred], ref, t_max)[0])


def edge_weights(adj, pair_embeddings, preds, ref: ReferenceSet, t_max=DEFAULT_CAP) -> np.ndarray:
    """Edge-weight matrix: the trust score of the decision behind every edge.

    ``pair_embeddings`` and ``preds`` are mappings keyed by ``(i, j)``.
    Scores are clipped below at the smallest positive float so every edge
    keeps a strictly positive weight.
    """
    adj = np.asarray(adj, dtype=bool)
    s = np.zeros(adj.shape)
    edges = list(zip(*np.nonzero(adj)))
    if not edges:
        return s
    missing = [(int(i), int(j)) for i, j in edges if (i, j) not in pair_embeddings or (i, j) not in preds]
    if missing:
        raise MissingEdgeData(f"no embedding/prediction for edges {missing[:5]}")
    x = np.stack([np.asarray(pair_embeddings[e], dtype=np.float64) for e in edges])
    y = np.array([preds[e] for e in edges])
    vals = np.maximum(trust_scores(x, y, ref, t_max), np.finfo(float).tiny)
    ii, jj = zip(*edges)
    s[list(ii), list(jj)] = vals
    return s

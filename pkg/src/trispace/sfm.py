"""kNN relation graph over temporal embeddings and feature diffusion of attributes."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

logger = logging.getLogger(__name__)

DEFAULT_K = 20
DEFAULT_STEPS = 10
WEIGHT_MODES = ("distance", "gaussian")

# pairs whose squared distance is this small relative to their centered norms
# are recomputed from explicit differences
_REFINE_RATIO = 1e-3


def distance_matrix(emb) -> np.ndarray:
    """Pairwise Euclidean distances between flattened rows, in float64.

    Uses the Gram expansion on column-centered data and recomputes
    near-coincident pairs directly to avoid cancellation.
    """
    x = np.asarray(emb, dtype=np.float64)
    x = x.reshape(len(x), -1)
    n = len(x)
    if n < 2:
        raise ValueError("distance_matrix needs at least two rows")
    x = x - x.mean(axis=0)
    sq = np.einsum("ij,ij->i", x, x)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (x @ x.T)
    np.maximum(d2, 0.0, out=d2)
    scale = sq[:, None] + sq[None, :]
    rows, cols = np.nonzero(np.triu(d2 <= _REFINE_RATIO * scale, k=1))
    for i, j in zip(rows, cols):
        diff = x[i] - x[j]
        d2[i, j] = diff @ diff
    iu = np.triu_indices(n, k=1)
    d2[iu[1], iu[0]] = d2[iu]
    np.fill_diagonal(d2, 0.0)
    return np.sqrt(d2)


@dataclass
class RelationGraph:
    W: sp.csr_matrix
    k: int
    symmetrized: bool = True
    weight_mode: str = "distance"

    @property
    def n(self) -> int:
        return self.W.shape[0]

    def edges(self):
        coo = self.W.tocoo()
        order = np.lexsort((coo.col, coo.row))
        return coo.row[order], coo.col[order], coo.data[order]

    def to_csv(self, stream, ids=None) -> None:
        import csv

        w = csv.writer(stream, lineterminator="\n")
        w.writerow(["src", "dst", "weight"])
        for s, d, v in zip(*self.edges()):
            if ids is None:
                w.writerow([int(s), int(d), repr(float(v))])
            else:
                w.writerow([ids[s], ids[d], repr(float(v))])


def knn_graph(dist: np.ndarray, k: int = DEFAULT_K, weight_mode: str = "distance",
              sigma: float | None = None, symmetrize: bool = True) -> RelationGraph:
    """Link each node to its ``k`` nearest other nodes.

    Edge weights are the distances themselves (``"distance"``) or
    ``exp(-d^2 / sigma^2)`` (``"gaussian"``, ``sigma`` defaulting to the median
    neighbor distance).  Ties go to the smaller index.  Symmetrization takes
    the elementwise maximum; nodes left without any weight get a unit self-loop.
    """
    dist = np.asarray(dist, dtype=np.float64)
    n = len(dist)
    if not 1 <= k < n:
        raise ValueError(f"need 1 <= K < N, got K={k}, N={n}")
    if weight_mode not in WEIGHT_MODES:
        raise ValueError(f"unknown weight mode {weight_mode!r}")
    masked = dist.copy()
    np.fill_diagonal(masked, np.inf)
    nbrs = np.argsort(masked, axis=1, kind="stable")[:, :k]
    rows = np.repeat(np.arange(n), k)
    cols = nbrs.ravel()
    d = dist[rows, cols]
    if weight_mode == "distance":
        w = d
    else:
        if sigma is None:
            sigma = float(np.median(d)) or 1.0
        w = np.exp(-(d**2) / sigma**2)
    W = sp.csr_matrix((w, (rows, cols)), shape=(n, n))
    if symmetrize:
        W = W.maximum(W.T).tocsr()
    W.eliminate_zeros()
    deg = np.asarray(W.sum(axis=1)).ravel()
    isolated = np.flatnonzero(deg <= 0)
    if len(isolated):
        logger.debug("adding self-loops to %d isolated nodes", len(isolated))
        W = (W + sp.csr_matrix((np.ones(len(isolated)), (isolated, isolated)), shape=(n, n))).tocsr()
    W.sort_indices()
    return RelationGraph(W, k, symmetrize, weight_mode)


def normalize_adjacency(W) -> sp.csr_matrix:
    """Symmetric degree normalization D^-1/2 W D^-1/2."""
    W = sp.csr_matrix(W, dtype=np.float64)
    deg = np.asarray(W.sum(axis=1)).ravel()
    if np.any(deg <= 0):
        raise ValueError(f"zero-degree rows: {np.flatnonzero(deg <= 0)[:10].tolist()}")
    inv = sp.diags(1.0 / np.sqrt(deg))
    return (inv @ W @ inv).tocsr()


@dataclass
class SpatialEmbedding:
    values: np.ndarray
    iterations: int


def diffuse(W_norm, features: np.ndarray, steps: int = DEFAULT_STEPS) -> SpatialEmbedding:
    """Propagate node features ``steps`` times through the normalized adjacency."""
    if steps < 1:
        raise ValueError("diffusion needs at least one step")
    out = np.asarray(features, dtype=np.float64)
    for _ in range(steps):
        out = W_norm @ out
    return SpatialEmbedding(np.asarray(out), steps)


def spatial_embedding(temporal, attributes: np.ndarray, k: int = DEFAULT_K, steps: int = DEFAULT_STEPS,
                      weight_mode: str = "distance") -> tuple[SpatialEmbedding, RelationGraph]:
    """Graph from temporal embeddings, then diffusion of ``attributes`` over it.

    ``k`` is clipped to ``N - 1`` for small batches.
    """
    n = len(attributes)
    if n < 2:
        return SpatialEmbedding(np.asarray(attributes, dtype=np.float64).copy(), steps), None
    k_eff = min(k, n - 1)
    if k_eff != k:
        logger.info("clipping K from %d to %d for %d nodes", k, k_eff, n)
    graph = knn_graph(distance_matrix(temporal), k_eff, weight_mode)
    return diffuse(normalize_adjacency(graph.W), attributes, steps), graph

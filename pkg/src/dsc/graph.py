"""Exact k-nearest-neighbor graphs and edge features over segment nodes."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class InsufficientNodesError(ValueError):
    """Fewer than ``k + 1`` nodes were supplied for a k-NN graph."""


@dataclass(frozen=True)
class KnnGraph:
    """``neighbors[i]`` lists the ``k`` nearest other nodes of node ``i``, nearest first."""

    neighbors: np.ndarray

    @property
    def k(self) -> int:
        return self.neighbors.shape[1]

    @property
    def n_nodes(self) -> int:
        return self.neighbors.shape[0]


def knn(features: np.ndarray, k: int) -> KnnGraph:
    """Brute-force k-NN by squared Euclidean distance; ties go to the smaller node id."""
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim == 1:
        feats = feats[:, None]
    t = feats.shape[0]
    if k < 1:
        raise ValueError("k must be >= 1")
    if t <= k:
        raise InsufficientNodesError(f"need more than k={k} nodes, got {t}")
    diff = feats[:, None, :] - feats[None, :, :]
    dist = np.einsum("ijd,ijd->ij", diff, diff)
    np.fill_diagonal(dist, np.inf)
    order = np.argsort(dist, axis=1, kind="stable")[:, :k]
    return KnnGraph(order.astype(np.int64))


def edge_features(features: np.ndarray, graph: KnnGraph) -> np.ndarray:
    """``(t, k, 2d)`` array whose entry ``[i, n]`` is ``(f_j - f_i) || f_j`` for the n-th neighbor j."""
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim == 1:
        feats = feats[:, None]
    if feats.shape[0] != graph.n_nodes:
        raise ValueError(f"graph has {graph.n_nodes} nodes but {feats.shape[0]} feature rows were given")
    nbr = feats[graph.neighbors]
    return np.concatenate([nbr - feats[:, None, :], nbr], axis=2)

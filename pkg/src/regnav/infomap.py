"""Two-level map equation and a greedy InfoMap optimizer for undirected graphs.

Flow is the stationary distribution of an unbiased random walk (node visit
rate proportional to strength, no teleportation). Disconnected graphs are
handled per connected component; components never share a module.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

from regnav import kernels

log = logging.getLogger(__name__)


def _plogp(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    out = np.zeros_like(x)
    pos = x > 0
    out[pos] = x[pos] * np.log2(x[pos])
    return out


def _as_csr(graph) -> sp.csr_matrix:
    W = sp.csr_matrix(graph, dtype=np.float64)
    W.setdiag(0.0)
    W.eliminate_zeros()
    if W.shape[0] != W.shape[1]:
        raise ValueError("graph must be square")
    if W.nnz and W.data.min() < 0:
        raise ValueError("edge weights must be non-negative")
    if W.nnz and abs(W - W.T).max() > 1e-12 * max(1.0, W.data.max()):
        raise ValueError("graph must be symmetric (undirected)")
    return W


def dense_labels(labels) -> np.ndarray:
    """Relabel to [0, K) in order of first occurrence."""
    labels = np.asarray(labels)
    _, first, inv = np.unique(labels, return_index=True, return_inverse=True)
    rank = np.empty(len(first), dtype=np.int64)
    rank[np.argsort(first, kind="stable")] = np.arange(len(first))
    return rank[inv.ravel()]


def _codelength_connected(W: sp.csr_matrix, labels: np.ndarray) -> float:
    """Map equation of a connected graph (no self loops) under ``labels``."""
    total = W.sum()
    if total <= 0:
        return 0.0
    strength = np.asarray(W.sum(axis=1)).ravel() / total
    labels = dense_labels(labels)
    K = labels.max() + 1
    coo = W.tocoo()
    cross = labels[coo.row] != labels[coo.col]
    exit_flow = np.bincount(labels[coo.row[cross]], weights=coo.data[cross] / total, minlength=K)
    module_flow = np.bincount(labels, weights=strength, minlength=K)
    q = exit_flow.sum()
    return float(
        _plogp(q) - 2.0 * _plogp(exit_flow).sum() - _plogp(strength).sum() + _plogp(exit_flow + module_flow).sum()
    )


def map_equation(graph, labels) -> float:
    """Two-level map equation codelength in bits (lower is better).

    ``graph`` is a symmetric non-negative weight matrix (dense or sparse);
    the diagonal is ignored. Disconnected graphs are evaluated per connected
    component and summed.
    """
    W = _as_csr(graph)
    labels = np.asarray(labels)
    if len(labels) != W.shape[0]:
        raise ValueError("labels length does not match graph size")
    n_comp, comp = connected_components(W, directed=False)
    if n_comp == 1:
        return _codelength_connected(W, labels)
    total = 0.0
    for c in range(n_comp):
        idx = np.flatnonzero(comp == c)
        if len(idx) > 1:
            total += _codelength_connected(W[idx][:, idx], labels[idx])
    return total


# graph construction ---------------------------------------------------------------------


def mutual_knn_graph(dist: np.ndarray, k: int) -> sp.csr_matrix:
    """Mutual k-nearest-neighbour graph with Gaussian-kernel weights exp(-d / sigma).

    Ties at the k-th distance are included. sigma is the mean distance to
    the k nearest neighbours; identical points get unit weights.
    """
    D = np.asarray(dist, dtype=np.float64)
    n = D.shape[0]
    if D.shape != (n, n):
        raise ValueError("distance matrix must be square")
    if k < 1:
        raise ValueError("k_neighbors must be >= 1")
    if n < 2:
        return sp.csr_matrix((n, n))
    k = min(k, n - 1)
    off = D + np.diag(np.full(n, np.inf))
    nearest = np.sort(off, axis=1)[:, :k]
    kth = nearest[:, -1]
    within = off <= kth[:, None]
    mutual = within & within.T
    sigma = float(nearest.mean())
    rows, cols = np.nonzero(mutual)
    d = D[rows, cols]
    w = np.exp(-d / sigma) if sigma > 0 else np.ones_like(d)
    return sp.csr_matrix((w, (rows, cols)), shape=(n, n))


# optimizer --------------------------------------------------------------------------------


@dataclass
class PseudoLabeling:
    labels: np.ndarray
    K: int
    centroids: np.ndarray | None = None
    codelength: float = float("nan")

    def with_centroids(self, features: np.ndarray) -> "PseudoLabeling":
        return PseudoLabeling(self.labels, self.K, cluster_centroids(features, self.labels, self.K), self.codelength)


def cluster_centroids(features: np.ndarray, labels: np.ndarray, K: int | None = None) -> np.ndarray:
    """L2-normalized mean feature of each cluster."""
    K = int(labels.max()) + 1 if K is None else K
    sums = np.zeros((K, features.shape[1]))
    np.add.at(sums, labels, features)
    norms = np.linalg.norm(sums, axis=1, keepdims=True)
    return sums / np.maximum(norms, 1e-12)


class _FlowGraph:
    """Normalized flow graph in CSR form (no self loops) for the kernels."""

    def __init__(self, W: sp.csr_matrix, node_flow: np.ndarray):
        W = W.tocsr()
        W.sort_indices()
        self.W = W
        self.indptr = W.indptr.astype(np.int64)
        self.indices = W.indices.astype(np.int64)
        self.weights = W.data.astype(np.float64)
        self.flow = np.ascontiguousarray(node_flow, dtype=np.float64)
        self.exit = np.asarray(W.sum(axis=1)).ravel()

    @property
    def n(self) -> int:
        return len(self.flow)

    def module_stats(self, module: np.ndarray):
        n = self.n
        flow = np.bincount(module, weights=self.flow, minlength=n).astype(np.float64)
        coo = self.W.tocoo()
        cross = module[coo.row] != module[coo.col]
        exit_ = np.bincount(module[coo.row[cross]], weights=coo.data[cross], minlength=n).astype(np.float64)
        size = np.bincount(module, minlength=n).astype(np.int64)
        return flow, exit_, size

    def move(self, module: np.ndarray, rng: np.random.Generator, max_sweeps: int) -> int:
        flow, exit_, size = self.module_stats(module)
        order = rng.permutation(self.n).astype(np.int64)
        return kernels.move_nodes(
            self.indptr, self.indices, self.weights, self.flow, self.exit, module, order, flow, exit_, size, max_sweeps
        )

    def aggregate(self, module: np.ndarray) -> "_FlowGraph":
        K = int(module.max()) + 1
        P = sp.csr_matrix((np.ones(self.n), (np.arange(self.n), module)), shape=(self.n, K))
        Wc = (P.T @ self.W @ P).tocsr()
        Wc.setdiag(0.0)
        Wc.eliminate_zeros()
        return _FlowGraph(Wc, np.bincount(module, weights=self.flow, minlength=K))


def _coarse_loop(leaf: _FlowGraph, start: np.ndarray, rng, max_sweeps: int) -> np.ndarray:
    """Repeated node moves + aggregation, starting from partition ``start``."""
    leaf_module = dense_labels(start)
    graph = leaf.aggregate(leaf_module) if leaf_module.max() + 1 < leaf.n else leaf
    while graph.n > 1:
        module = np.arange(graph.n, dtype=np.int64)
        if graph.move(module, rng, max_sweeps) == 0:
            break
        module = dense_labels(module)
        leaf_module = module[leaf_module]
        graph = graph.aggregate(module)
    return leaf_module


def _optimize_connected(W: sp.csr_matrix, rng, trials: int, max_sweeps: int = 50) -> tuple[np.ndarray, float]:
    total = W.sum()
    Wn = (W / total).tocsr()
    leaf = _FlowGraph(Wn, np.asarray(Wn.sum(axis=1)).ravel())
    n = leaf.n
    best = np.zeros(n, dtype=np.int64)
    best_len = _codelength_connected(W, best)
    for _ in range(trials):
        part = _coarse_loop(leaf, np.arange(n), rng, max_sweeps)
        cur = _codelength_connected(W, part)
        for _ in range(20):
            fine = part.copy()
            leaf.move(fine, rng, max_sweeps)
            fine = _coarse_loop(leaf, fine, rng, max_sweeps)
            new = _codelength_connected(W, fine)
            if new < cur - 1e-10:
                part, cur = fine, new
            else:
                break
        if cur < best_len - 1e-10:
            best, best_len = part, cur
    return dense_labels(best), best_len


def infomap_partition(graph, seed: int = 0, trials: int = 4) -> tuple[np.ndarray, float]:
    """Greedy map-equation minimization. Returns (dense labels, codelength)."""
    W = _as_csr(graph)
    n = W.shape[0]
    rng = np.random.default_rng(seed)
    n_comp, comp = connected_components(W, directed=False)
    labels = np.empty(n, dtype=np.int64)
    total = 0.0
    next_label = 0
    for c in range(n_comp):
        idx = np.flatnonzero(comp == c)
        if len(idx) == 1:
            labels[idx] = next_label
            next_label += 1
            continue
        sub, length = _optimize_connected(W[idx][:, idx], rng, trials)
        labels[idx] = sub + next_label
        next_label += int(sub.max()) + 1
        total += length
    return dense_labels(labels), total


def infomap_cluster(refined: np.ndarray, k_neighbors: int = 10, seed: int = 0, trials: int = 4) -> PseudoLabeling:
    """Pseudo-labels from a (refined) distance matrix via mutual-kNN + InfoMap."""
    refined = np.asarray(refined, dtype=np.float64)
    n = refined.shape[0]
    if n < 2:
        raise ValueError("need at least two points to cluster")
    if k_neighbors < 1:
        raise ValueError("k_neighbors must be >= 1")
    W = mutual_knn_graph(refined, k_neighbors)
    if W.nnz == 0:
        log.warning("kNN graph has no edges; every point is its own cluster")
        labels = np.arange(n, dtype=np.int64)
        return PseudoLabeling(labels, n, codelength=0.0)
    labels, length = infomap_partition(W, seed=seed, trials=trials)
    return PseudoLabeling(labels, int(labels.max()) + 1, codelength=length)

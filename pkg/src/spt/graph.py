"""Patch connectivity graphs and their attention-mask realisation.

Single-image builders return a :class:`ConnectivityGraph` with an explicit edge
set. The ``batch_*`` functions compute the same relation as dense boolean
adjacency tensors for whole mini-batches.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

STRATEGIES = ("fcg", "knn", "rag")


@dataclass(frozen=True)
class ConnectivityGraph:
    n_nodes: int
    edges: frozenset  # of (a, b) with a < b
    strategy: str

    def adjacency(self) -> np.ndarray:
        adj = np.zeros((self.n_nodes, self.n_nodes), dtype=bool)
        for a, b in self.edges:
            adj[a, b] = adj[b, a] = True
        return adj

    def sorted_edges(self) -> list[tuple[int, int]]:
        return sorted(self.edges)


def _edge_set(adj: np.ndarray) -> frozenset:
    a, b = np.nonzero(np.triu(adj, k=1))
    return frozenset(zip(a.tolist(), b.tolist()))


def build_fcg(present) -> ConnectivityGraph:
    present = np.asarray(present, dtype=bool)
    adj = present[:, None] & present[None, :]
    return ConnectivityGraph(len(present), _edge_set(adj), "fcg")


def build_knn(centers, present, k: int = 15) -> ConnectivityGraph:
    """Each present node links to its ``k`` nearest present nodes, ties going
    to the smaller index; the edge set is the symmetric union."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    centers = np.asarray(centers, dtype=np.float64)
    present = np.asarray(present, dtype=bool)
    adj = _knn_adjacency(centers[None], present[None], k)[0]
    return ConnectivityGraph(len(present), _edge_set(adj), "knn")


def build_rag(segments, connectivity: int = 4, n_nodes: int | None = None) -> ConnectivityGraph:
    """Region adjacency: segments touching across a 4- (or 8-) neighbour step."""
    labels = np.asarray(getattr(segments, "labels", segments))
    n = int(labels.max()) + 1 if n_nodes is None else n_nodes
    adj = _rag_adjacency(labels[None], n, connectivity)[0]
    return ConnectivityGraph(n, _edge_set(adj), "rag")


def to_attention_mask(graph: ConnectivityGraph, present) -> np.ndarray:
    """Boolean ``(N+1, N+1)`` mask; index 0 is the classification token."""
    present = np.asarray(present, dtype=bool)
    if graph.n_nodes != len(present):
        raise ValueError(f"graph has {graph.n_nodes} nodes but present has {len(present)}")
    return attention_mask_from_adjacency(graph.adjacency()[None], present[None])[0]


def attention_mask_from_adjacency(adj: np.ndarray, present: np.ndarray) -> np.ndarray:
    batch, n, _ = adj.shape
    allowed = np.zeros((batch, n + 1, n + 1), dtype=bool)
    allowed[:, 0, :] = True
    allowed[:, :, 0] = True
    pair = present[:, :, None] & present[:, None, :]
    allowed[:, 1:, 1:] = adj & pair
    idx = np.arange(n + 1)
    allowed[:, idx, idx] = True
    return allowed


def _knn_adjacency(centers: np.ndarray, present: np.ndarray, k: int) -> np.ndarray:
    batch, n, _ = centers.shape
    diff = centers[:, :, None, :] - centers[:, None, :, :]
    d2 = (diff * diff).sum(-1)
    valid = present[:, :, None] & present[:, None, :]
    valid &= ~np.eye(n, dtype=bool)[None]
    d2 = np.where(valid, d2, np.inf)
    order = np.argsort(d2, axis=-1, kind="stable")[..., :k]
    chosen = np.take_along_axis(valid, order, axis=-1)
    adj = np.zeros((batch, n, n), dtype=bool)
    b, i, _ = np.nonzero(chosen)
    adj[b, i, order[chosen]] = True
    return adj | adj.transpose(0, 2, 1)


def _rag_adjacency(labels: np.ndarray, n: int, connectivity: int = 4) -> np.ndarray:
    if connectivity not in (4, 8):
        raise ValueError("connectivity must be 4 or 8")
    batch = labels.shape[0]
    adj = np.zeros((batch, n, n), dtype=bool)
    pairs = [(labels[:, :, :-1], labels[:, :, 1:]), (labels[:, :-1, :], labels[:, 1:, :])]
    if connectivity == 8:
        pairs += [(labels[:, :-1, :-1], labels[:, 1:, 1:]), (labels[:, :-1, 1:], labels[:, 1:, :-1])]
    for a, b in pairs:
        diff = a != b
        bi = np.nonzero(diff)[0]
        adj[bi, a[diff], b[diff]] = True
    return adj | adj.transpose(0, 2, 1)


def batch_adjacency(strategy: str, present, centers=None, labels=None, k: int = 15,
                    connectivity: int = 4) -> np.ndarray:
    """Dense ``(B, M, M)`` adjacency for a batch under ``strategy``."""
    present = np.asarray(present, dtype=bool)
    batch, m = present.shape
    if strategy == "fcg":
        return np.broadcast_to(np.ones((m, m), dtype=bool), (batch, m, m))
    if strategy == "knn":
        return _knn_adjacency(np.asarray(centers, dtype=np.float64), present, k)
    if strategy == "rag":
        return _rag_adjacency(np.asarray(labels), m, connectivity)
    raise ValueError(f"unknown graph strategy {strategy!r}")


def batch_attention_mask(strategy: str, present, centers=None, labels=None, k: int = 15,
                         connectivity: int = 4) -> torch.Tensor:
    adj = batch_adjacency(strategy, present, centers, labels, k, connectivity)
    return torch.from_numpy(attention_mask_from_adjacency(adj, np.asarray(present, dtype=bool)))


def write_edge_list(graph: ConnectivityGraph, path) -> None:
    Path(path).write_text("".join(f"{a} {b}\n" for a, b in graph.sorted_edges()))


def read_edge_list(path) -> list[tuple[int, int]]:
    out = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            a, b = line.split()
            out.append((int(a), int(b)))
    return out

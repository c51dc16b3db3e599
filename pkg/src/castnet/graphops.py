"""Graph operators fed to the multi-graph convolution, and descriptive statistics."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse.csgraph import shortest_path

from . import diffcore as dc
from .exceptions import ContractError, ShapeError

GRAPH_ROLES = ("adjacency", "lag", "intra", "adaptive")
STATS_COLUMNS = ("Graph type", "Number of nodes", "Number of edges", "Graph diameter",
                 "Average shortest path", "Average degree", "Unreachable pairs")


def _square(a, name="matrix"):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"{name} must be square, got shape {a.shape}")
    return a


def laplacian_operator(A):
    """``I - D^{-1/2} A D^{-1/2}``; rows of isolated nodes reduce to the identity."""
    A = _square(A, "adjacency")
    if np.any(A < 0):
        raise ContractError("adjacency weights must be nonnegative")
    if np.any(np.diag(A) != 0):
        raise ContractError("adjacency must have a zero diagonal")
    d = A.sum(axis=1)
    inv_sqrt = np.zeros_like(d)
    inv_sqrt[d > 0] = 1.0 / np.sqrt(d[d > 0])
    return np.eye(A.shape[0]) - inv_sqrt[:, None] * A * inv_sqrt[None, :]


def asymmetric_operator(a):
    """Row normalisation ``D_out^{-1} a`` with out-degree from absolute weights."""
    a = _square(a, "causal matrix")
    d = np.abs(a).sum(axis=1)
    out = np.zeros_like(a)
    nz = d > 0
    out[nz] = a[nz] / d[nz, None]
    return out


def adaptive_graph(emb1, emb2):
    """Row-stochastic ``softmax(relu(emb1 @ emb2^T))`` as a differentiable tensor."""
    emb1, emb2 = dc.constant(emb1), dc.constant(emb2)
    if emb1.ndim != 2 or emb2.ndim != 2 or emb1.shape != emb2.shape:
        raise ShapeError("node embeddings must both be N x d_n")
    if emb1.shape[1] == 0:
        raise ContractError("node embedding width must be positive")
    return dc.softmax_rows(dc.relu(dc.matmul(emb1, dc.transpose(emb2))))


def powers(op, K):
    """``[I, op, op^2, ..., op^K]``; works on arrays and on tensors."""
    if K < 0:
        raise ContractError("K must be nonnegative")
    if isinstance(op, dc.Tensor):
        out = [dc.Tensor(np.eye(op.shape[0]))]
        for _ in range(K):
            out.append(op if len(out) == 1 else dc.matmul(out[-1], op))
        return out
    op = _square(op, "operator")
    out = [np.eye(op.shape[0])]
    for _ in range(K):
        out.append(out[-1] @ op)
    return out


@dataclass
class GraphBundle:
    """Static graphs plus cached operator powers for the multi-graph convolution.

    ``A_lag`` may hold several lag matrices; their normalised operators are
    summed into a single lag operator. The adaptive graph is not cached here;
    the forecaster rebuilds it from its node embeddings on every forward pass.
    """

    A: np.ndarray
    A_lag: list = None
    C: np.ndarray = None
    K: int = 2
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.A = _square(self.A, "adjacency")
        n = self.A.shape[0]
        self.A_lag = [np.zeros((n, n))] if self.A_lag is None else [_square(a) for a in self.A_lag]
        self.C = np.zeros((n, n)) if self.C is None else _square(self.C)
        if any(m.shape != (n, n) for m in [self.C, *self.A_lag]):
            raise ShapeError("all graphs must share the node count of the adjacency")
        if self.K < 0:
            raise ContractError("K must be nonnegative")

    @property
    def n_nodes(self):
        return self.A.shape[0]

    def operator(self, role):
        if role == "adjacency":
            return laplacian_operator(self.A)
        if role == "lag":
            return sum(asymmetric_operator(a) for a in self.A_lag)
        if role == "intra":
            return asymmetric_operator(self.C)
        raise ContractError(f"no static operator for graph role {role!r}")

    def operator_powers(self, role):
        if role not in self._cache:
            self._cache[role] = powers(self.operator(role), self.K)
        return self._cache[role]

    def invalidate(self):
        self._cache.clear()


# ---------------------------------------------------------------- statistics

@dataclass
class GraphStats:
    n_nodes: int
    n_edges: int
    diameter: int
    avg_shortest_path: float
    avg_degree: float
    unreachable_pairs: int
    directed: bool

    def row(self, label):
        return [label, self.n_nodes, self.n_edges, self.diameter,
                f"{self.avg_shortest_path:.6f}", f"{self.avg_degree:.6f}", self.unreachable_pairs]


def graph_stats(g, directed=None):
    """Size, diameter, mean shortest path and mean degree of a graph's support.

    Self-loops count as edges (a lagged effect of a node on itself is an edge)
    but play no part in path lengths. Unreachable ordered pairs are excluded
    from the diameter and the average and reported separately.
    """
    g = _square(g, "graph")
    n = g.shape[0]
    if n == 0:
        raise ContractError("graph has no nodes")
    support = g != 0
    if directed is None:
        directed = not np.array_equal(support, support.T)
    loops = int(np.trace(support))
    off = support & ~np.eye(n, dtype=bool)
    n_edges = int(off.sum() if directed else np.triu(off).sum()) + loops
    dist = shortest_path(off.astype(np.float64), directed=directed, unweighted=True)
    mask = ~np.eye(n, dtype=bool)
    finite = np.isfinite(dist) & mask
    reach = dist[finite]
    return GraphStats(
        n_nodes=n,
        n_edges=n_edges,
        diameter=int(reach.max()) if reach.size else 0,
        avg_shortest_path=float(reach.mean()) if reach.size else 0.0,
        avg_degree=n_edges * (1 if directed else 2) / n,
        unreachable_pairs=int((mask & ~np.isfinite(dist)).sum()),
        directed=bool(directed),
    )


def write_stats_csv(rows, path):
    """``rows`` is a sequence of ``(label, GraphStats)`` pairs."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(STATS_COLUMNS)
        for label, stats in rows:
            w.writerow(stats.row(label))

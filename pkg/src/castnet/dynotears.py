"""Contemporaneous and time-lagged structure learning for multivariate series.

The contemporaneous matrix ``C`` and lag matrices ``A_1..A_P`` of a structural
VAR ``x_t^T = x_t^T C + sum_i x_{t-i}^T A_i + z_t^T`` are fitted by least squares
with L1 penalties, subject to the smooth acyclicity equality
``h(C) = tr(exp(C * C)) - N = 0``. The equality is enforced with an augmented
Lagrangian; each inner problem is solved by bound-constrained L-BFGS on the
positive/negative split of the weights.

Matrix convention: ``C[i, j]`` is the effect of node ``i`` on node ``j``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.optimize as sopt
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .exceptions import ContractError, ConvergenceError, CyclicGraphError, ShapeError

log = logging.getLogger(__name__)


# ---------------------------------------------------------------- containers

@dataclass
class CausalGraphSet:
    """Intra-slice matrix ``C`` plus the list of lag matrices ``A_lag``."""

    C: np.ndarray
    A_lag: list
    threshold: float = 0.0

    def __post_init__(self):
        self.C = np.asarray(self.C, dtype=np.float64)
        self.A_lag = [np.asarray(A, dtype=np.float64) for A in self.A_lag]
        n = self.C.shape[0]
        if self.C.shape != (n, n) or any(A.shape != (n, n) for A in self.A_lag):
            raise ShapeError("all causal matrices must be N x N")

    @property
    def n_nodes(self):
        return self.C.shape[0]

    @property
    def lag(self):
        return len(self.A_lag)

    def n_edges(self):
        """``(intra-slice edges, inter-slice edges)`` counted on nonzero entries."""
        return int(np.count_nonzero(self.C)), int(sum(np.count_nonzero(A) for A in self.A_lag))

    def edges(self):
        """``(src, dst, lag, weight)`` tuples; lag 0 is contemporaneous."""
        out = [(i, j, 0, self.C[i, j]) for i, j in zip(*np.nonzero(self.C))]
        for k, A in enumerate(self.A_lag, start=1):
            out.extend((i, j, k, A[i, j]) for i, j in zip(*np.nonzero(A)))
        return [(int(s), int(d), int(k), float(w)) for s, d, k, w in out]

    def to_text(self):
        n, P = self.n_nodes, self.lag
        lines = [f"{n} {P} {float(self.threshold)!r}", "# C"]
        lines += [" ".join(repr(float(v)) for v in row) for row in self.C]
        for k, A in enumerate(self.A_lag, start=1):
            lines.append(f"# A_{k}")
            lines += [" ".join(repr(float(v)) for v in row) for row in A]
        lines.append("# edges: src dst lag weight")
        lines += [f"{s} {d} {k} {float(w)!r}" for s, d, k, w in self.edges()]
        return "\n".join(lines) + "\n"

    def save(self, path):
        Path(path).write_text(self.to_text())

    @classmethod
    def from_text(cls, text):
        rows = [ln for ln in text.splitlines() if ln.strip() and not ln.startswith("#")]
        head = rows[0].split()
        n, P, thr = int(head[0]), int(head[1]), float(head[2])
        mats = np.array([[float(v) for v in r.split()] for r in rows[1:1 + n * (P + 1)]])
        if mats.shape != (n * (P + 1), n):
            raise ShapeError("graph file does not contain N*(P+1) rows of N values")
        blocks = [mats[i * n:(i + 1) * n] for i in range(P + 1)]
        return cls(C=blocks[0], A_lag=blocks[1:], threshold=thr)

    @classmethod
    def load(cls, path):
        return cls.from_text(Path(path).read_text())


@dataclass
class SvarDataset:
    """Aligned current-slice rows ``X`` (n x N) and lagged design ``S`` (n x N*P)."""

    X: np.ndarray
    S: np.ndarray
    lag: int

    @classmethod
    def from_series(cls, series, lag=1):
        series = np.asarray(series, dtype=np.float64)
        if series.ndim != 2:
            raise ShapeError("series must be (T, N)")
        if lag < 1:
            raise ContractError("lag order must be at least 1")
        T = series.shape[0]
        if T <= lag:
            raise ContractError("series too short for the requested lag order")
        X = series[lag:]
        S = np.hstack([series[lag - i:T - i] for i in range(1, lag + 1)])
        return cls(X=X, S=S, lag=lag)

    @property
    def n(self):
        return self.X.shape[0]

    @property
    def n_nodes(self):
        return self.X.shape[1]


@dataclass
class SolverState:
    """Augmented-Lagrangian bookkeeping for one fit."""

    alpha_L: float = 0.0
    rho: float = 1.0
    lambda_C: float = 0.05
    lambda_A: float = 0.05
    h_tol: float = 1e-8
    rho_max: float = 1e16
    progress: float = 0.25
    escalation: float = 10.0
    max_outer: int = 100
    outer_iterations: int = 0
    history: list = field(default_factory=list)


# ---------------------------------------------------------------- kernels

def matrix_exponential(M):
    """``exp(M)`` by scaling and squaring around a degree-18 Taylor polynomial."""
    M = np.asarray(M, dtype=np.float64)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ShapeError("matrix_exponential expects a square matrix")
    n = M.shape[0]
    norm = np.max(np.sum(np.abs(M), axis=0)) if n else 0.0
    s = max(0, int(np.ceil(np.log2(norm / 0.5)))) if norm > 0.5 else 0
    A = M / (2.0 ** s)
    # Horner form of sum_{k<=18} A^k / k!
    E = np.eye(n)
    for k in range(18, 0, -1):
        E = np.eye(n) + (A @ E) / k
    for _ in range(s):
        E = E @ E
    return E


def acyclicity(C):
    """``h(C) = tr(exp(C * C)) - N`` and its gradient ``exp(C * C)^T * 2C``."""
    C = np.asarray(C, dtype=np.float64)
    if C.ndim != 2 or C.shape[0] != C.shape[1]:
        raise ShapeError("acyclicity expects a square matrix")
    E = matrix_exponential(C * C)
    h = float(np.trace(E) - C.shape[0])
    return max(h, 0.0), E.T * C * 2.0


def svar_loss(C, A_stack, data: SvarDataset, lambda_C=0.0, lambda_A=0.0):
    """Penalised least-squares loss and smooth-part gradients.

    ``A_stack`` is the (N*P x N) vertical stack ``[A_1; ...; A_P]``.
    """
    if data.n == 0:
        raise ContractError("empty dataset")
    C = np.asarray(C, dtype=np.float64)
    A_stack = np.asarray(A_stack, dtype=np.float64)
    R = data.X - data.X @ C - data.S @ A_stack
    n = data.n
    loss = 0.5 / n * np.sum(R * R) + lambda_C * np.abs(C).sum() + lambda_A * np.abs(A_stack).sum()
    return loss, -data.X.T @ R / n, -data.S.T @ R / n


def is_dag(C):
    return find_cycle(C) is None


def find_cycle(C):
    """A directed cycle in the support of ``C`` as a node list, or ``None``."""
    adj = np.asarray(C) != 0
    n = adj.shape[0]
    colour = np.zeros(n, dtype=int)  # 0 new, 1 on stack, 2 done
    parent = [-1] * n
    for root in range(n):
        if colour[root]:
            continue
        stack = [(root, iter(np.nonzero(adj[root])[0]))]
        colour[root] = 1
        while stack:
            node, it = stack[-1]
            nxt = next(it, None)
            if nxt is None:
                colour[node] = 2
                stack.pop()
                continue
            if colour[nxt] == 1:
                cycle = [int(nxt)]
                cur = node
                while cur != nxt:
                    cycle.append(int(cur))
                    cur = parent[cur]
                return cycle[::-1] if len(cycle) > 1 else cycle
            if colour[nxt] == 0:
                colour[nxt] = 1
                parent[nxt] = node
                stack.append((nxt, iter(np.nonzero(adj[nxt])[0])))
    return None


def threshold_graphs(g: CausalGraphSet, tau):
    """Zero every entry with ``|w| < tau`` and check that ``C`` is acyclic."""
    if tau < 0:
        raise ContractError("threshold must be nonnegative")
    C = np.where(np.abs(g.C) < tau, 0.0, g.C)
    A_lag = [np.where(np.abs(A) < tau, 0.0, A) for A in g.A_lag]
    cycle = find_cycle(C)
    if cycle is not None:
        raise CyclicGraphError(f"thresholded C still contains the cycle {cycle}", cycle=cycle)
    out = CausalGraphSet(C=C, A_lag=A_lag, threshold=float(tau) if np.isfinite(tau) else g.threshold)
    log.debug("threshold %.3g keeps %d intra / %d inter edges", tau, *out.n_edges())
    return out


def edge_f1(true, est):
    """F1 of the directed support of ``est`` against ``true``."""
    t = np.asarray(true) != 0
    e = np.asarray(est) != 0
    tp = np.sum(t & e)
    if tp == 0:
        return 1.0 if not t.any() and not e.any() else 0.0
    precision = tp / e.sum()
    recall = tp / t.sum()
    return float(2 * precision * recall / (precision + recall))


# ---------------------------------------------------------------- estimator

class Dynotears(BaseEstimator):
    """Learn intra-slice and lagged causal graphs from a (T, N) series.

    Parameters
    ----------
    lag : int
        Autoregressive order ``P``.
    lambda_c, lambda_a : float
        L1 weights on the contemporaneous and lagged matrices.
    threshold : float
        Entries with smaller magnitude are zeroed after optimisation.
    standardize : bool
        Also divide each variable by its standard deviation (it is always
        centred). Off by default: rescaling hides the noise-variance ordering
        that identifies edge directions and shrinks weights toward the
        threshold.
    max_steps : int or None
        Use only the first ``max_steps`` rows of the series.

    Attributes
    ----------
    graphs_ : CausalGraphSet
        Thresholded result.
    raw_graphs_ : CausalGraphSet
        Unthresholded optimum.
    h_ : float
        Acyclicity residual of the unthresholded ``C``.
    history_ : list of dict
        One record per outer iteration (``rho``, ``alpha``, ``h``).
    """

    def __init__(self, lag=1, lambda_c=0.05, lambda_a=0.05, threshold=0.1, standardize=False,
                 h_tol=1e-8, rho_max=1e16, max_outer=100, max_steps=None):
        self.lag = lag
        self.lambda_c = lambda_c
        self.lambda_a = lambda_a
        self.threshold = threshold
        self.standardize = standardize
        self.h_tol = h_tol
        self.rho_max = rho_max
        self.max_outer = max_outer
        self.max_steps = max_steps

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        if self.lambda_c < 0 or self.lambda_a < 0:
            raise ContractError("L1 weights must be nonnegative")
        if self.max_steps is not None:
            X = X[: self.max_steps]
        X = X - X.mean(axis=0)
        if self.standardize:
            sd = X.std(axis=0)
            X = X / np.where(sd > 0, sd, 1.0)
        data = SvarDataset.from_series(X, self.lag)
        state = SolverState(lambda_C=self.lambda_c, lambda_A=self.lambda_a, h_tol=self.h_tol,
                            rho_max=self.rho_max, max_outer=self.max_outer)
        C, A_stack, h = _solve(data, state)
        P, N = self.lag, data.n_nodes
        raw = CausalGraphSet(C=C, A_lag=[A_stack[i * N:(i + 1) * N] for i in range(P)], threshold=0.0)
        self.raw_graphs_ = raw
        self.h_ = h
        self.history_ = state.history
        self.n_outer_ = state.outer_iterations
        self.rho_ = state.rho
        if h > self.h_tol:
            raise ConvergenceError(
                f"penalty cap rho={state.rho:.3g} reached with h(C)={h:.3g} > {self.h_tol:g}", h=h, rho=state.rho)
        self.graphs_ = threshold_graphs(raw, self.threshold)
        self.n_features_in_ = N
        return self

    @property
    def C_(self):
        check_is_fitted(self, "graphs_")
        return self.graphs_.C

    @property
    def A_lag_(self):
        check_is_fitted(self, "graphs_")
        return self.graphs_.A_lag


def _solve(data: SvarDataset, state: SolverState):
    N, P = data.n_nodes, data.lag
    n = data.n
    Z = np.hstack([data.X, data.S])
    gram = Z.T @ Z / n
    cross = Z.T @ data.X / n
    xx = np.sum(data.X * data.X) / n
    d_c, d_a = N * N, N * N * P
    dim = d_c + d_a

    lam = np.concatenate([np.full(d_c, state.lambda_C), np.full(d_a, state.lambda_A)])
    lam = np.concatenate([lam, lam])
    diag = np.zeros((N, N), dtype=bool)
    np.fill_diagonal(diag, True)
    c_bounds = [(0.0, 0.0) if d else (0.0, None) for d in diag.ravel()]
    a_bounds = [(0.0, None)] * d_a
    bounds = (c_bounds + a_bounds) * 2

    def unpack(w):
        W = (w[:dim] - w[dim:]).reshape(N * (P + 1), N)
        return W[:N], W

    def objective(w):
        C, W = unpack(w)
        GW = gram @ W
        smooth = 0.5 * (xx - 2.0 * np.sum(W * cross) + np.sum(W * GW))
        g_smooth = GW - cross
        h, g_h = acyclicity(C)
        obj = smooth + state.alpha_L * h + 0.5 * state.rho * h * h + lam @ w
        g_smooth[:N] += (state.alpha_L + state.rho * h) * g_h
        g = g_smooth.ravel()
        return obj, np.concatenate([g, -g]) + lam

    w = np.zeros(2 * dim)
    h = np.inf
    while state.outer_iterations < state.max_outer and state.rho < state.rho_max:
        state.outer_iterations += 1
        while state.rho < state.rho_max:
            res = sopt.minimize(objective, w, jac=True, method="L-BFGS-B", bounds=bounds)
            w_new = res.x
            h_new, _ = acyclicity(unpack(w_new)[0])
            if h_new > state.progress * h:
                state.rho *= state.escalation
            else:
                break
        w, h = w_new, h_new
        state.alpha_L += state.rho * h
        state.history.append({"rho": state.rho, "alpha": state.alpha_L, "h": h})
        log.debug("outer %d: h=%.3e rho=%.1e", state.outer_iterations, h, state.rho)
        if h <= state.h_tol:
            break
    C, W = unpack(w)
    return C, W[N:], h

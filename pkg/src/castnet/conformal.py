"""Distribution-free prediction regions for multi-node, multi-step forecasts.

Three schemes share one quantile routine:

* split conformal (one absolute-residual quantile per horizon step),
* a Bonferroni multi-horizon baseline (split conformal at level alpha / H),
* CPST, which scores each node with neighbour- and decay-weighted residuals
  over a rolling calibration window and shifts the queried level per node
  according to where the node ranks cross-sectionally.
"""
from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator

from .exceptions import ConfigError, ContractError

log = logging.getLogger(__name__)

C_ADJ_GRID = (-4.0, -2.0, -1.0, 0.0, 1.0, 2.0, 4.0)
REGION_COLUMNS = ("timestamp", "node", "step", "yhat", "L", "U", "y", "covered")


# ---------------------------------------------------------------- quantiles

def empirical_quantile(scores, level, weights=None):
    """Smallest score r with (weight of scores <= r) / (total weight) >= level.

    Without ``weights`` every score counts once, which is the plain
    finite-sample quantile over the multiset. ``level`` may be an array, in
    which case one quantile per level is returned from a single sort.
    """
    s = np.asarray(scores, dtype=np.float64).ravel()
    if s.size == 0:
        raise ContractError("cannot take a quantile of an empty score set")
    lv = np.asarray(level, dtype=np.float64)
    if np.any(lv <= 0.0) or np.any(lv > 1.0):
        raise ContractError(f"quantile level must lie in (0, 1], got {level}")
    order = np.argsort(s, kind="stable")
    s = s[order]
    if weights is None:
        cum = np.arange(1, s.size + 1, dtype=np.float64)
    else:
        w = np.asarray(weights, dtype=np.float64).ravel()
        if w.shape != order.shape or np.any(w < 0) or w.sum() <= 0:
            raise ContractError("weights must be nonnegative, nonzero and match the scores")
        cum = np.cumsum(w[order])
    frac = cum / cum[-1]
    # the first position reaching the level; ties resolve to the same value.
    # The slack absorbs rounding in the cumulative weights.
    idx = np.minimum(np.searchsorted(frac, lv - 1e-12, side="left"), s.size - 1)
    q = s[idx]
    return float(q) if q.ndim == 0 else q


@dataclass
class PredictionRegion:
    """Symmetric interval ``[yhat - v_hat, yhat + v_hat]`` with CPST diagnostics."""

    yhat: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    v_hat: np.ndarray
    eps_bar: np.ndarray = None
    r_hat: np.ndarray = None
    delta: np.ndarray = None
    alpha_hat: np.ndarray = None
    fallback: bool = False

    @property
    def width(self):
        return self.upper - self.lower

    def covers(self, y):
        y = np.asarray(y, dtype=np.float64)
        return (self.lower <= y) & (y <= self.upper)


def _region(yhat, v):
    yhat = np.asarray(yhat, dtype=np.float64)
    v = np.broadcast_to(np.asarray(v, dtype=np.float64), yhat.shape).copy()
    return PredictionRegion(yhat=yhat, lower=yhat - v, upper=yhat + v, v_hat=v)


def _check_alpha(alpha):
    if not 0.0 < alpha < 1.0:
        raise ConfigError(f"alpha must lie in (0, 1), got {alpha}")


def scp_region(yhat, calib_residuals, alpha):
    """Split conformal region: ``yhat +/- Q(1 - alpha)`` of the absolute residuals."""
    _check_alpha(alpha)
    q = empirical_quantile(np.abs(calib_residuals), 1.0 - alpha)
    return _region(yhat, q)


def bonferroni_region(yhat, calib_residuals, alpha, H=None):
    """Split conformal per horizon step at miscoverage ``alpha / H``.

    ``yhat`` has the horizon on its last axis; ``calib_residuals`` likewise
    (any leading shape, e.g. (n, H) or (n, N, H)).
    """
    _check_alpha(alpha)
    yhat = np.asarray(yhat, dtype=np.float64)
    res = np.abs(np.asarray(calib_residuals, dtype=np.float64))
    H = yhat.shape[-1] if H is None else H
    if res.shape[-1] != H or yhat.shape[-1] != H:
        raise ContractError("residuals and forecasts must both carry H steps on the last axis")
    step_alpha = alpha / H
    n = res.reshape(-1, H).shape[0]
    if step_alpha < 1.0 / (n + 1):
        warnings.warn(f"per-step level alpha/H={step_alpha:.4g} is below 1/(n+1) with n={n}; "
                      "the finite-sample guarantee is unattainable", RuntimeWarning, stacklevel=2)
    q = np.array([empirical_quantile(res[..., h], 1.0 - step_alpha) for h in range(H)])
    return _region(yhat, q)


# ---------------------------------------------------------------- CPST pieces

def neighbour_lists(A):
    """Off-diagonal support of the adjacency as per-node index arrays."""
    A = np.asarray(A)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ContractError("adjacency must be square")
    support = (A != 0) & ~np.eye(A.shape[0], dtype=bool)
    return [np.flatnonzero(row) for row in support]


def _neighbour_matrix(neighbours, n):
    m = np.zeros((n, n))
    for i, nb in enumerate(neighbours):
        m[i, nb] = 1.0
    return m


def node_scores(abs_residuals, neighbours, eta, zeta):
    """Per-(time, node) score ``eta |r_i| + zeta sum_{k in nb(i)} |r_k|``."""
    r = np.asarray(abs_residuals, dtype=np.float64)
    if r.ndim != 2:
        raise ContractError("residuals must be a (T_c, N) matrix")
    if len(neighbours) != r.shape[1]:
        raise ContractError("one neighbour list per node required")
    return eta * r + zeta * r @ _neighbour_matrix(neighbours, r.shape[1]).T


def decay_weights(T_c, beta):
    """``beta ** (T_c - t')`` for t' = 1..T_c, oldest first."""
    return beta ** np.arange(T_c - 1, -1, -1, dtype=np.float64)


def weighted_score(abs_residuals, neighbours, eta=0.95, zeta=0.05, beta=0.9, node=None):
    """Nonconformity score of every node (or of ``node``) over a window.

    ``abs_residuals`` is (T_c, N), oldest row first. The score is the
    decay-weighted sum of per-step scores divided by T_c.
    """
    s = node_scores(abs_residuals, neighbours, eta, zeta)
    T_c = s.shape[0]
    if T_c == 0:
        raise ContractError("calibration window is empty")
    eps = decay_weights(T_c, beta) @ s / T_c
    return eps if node is None else float(eps[node])


def rank_quantile(eps_bar, node=None):
    """``|{j : eps_j <= eps_i}| / (N + 1)`` for every node (or for ``node``)."""
    e = np.asarray(eps_bar, dtype=np.float64).ravel()
    if e.size == 0:
        raise ContractError("need at least one score")
    ranks = np.searchsorted(np.sort(e), e, side="right") / (e.size + 1)
    return ranks if node is None else float(ranks[node])


def adjust(r_hat, alpha, c_adj, n_calib=None):
    """Level shift ``delta`` and the adjusted miscoverage ``alpha - delta``.

    Below the target rank the shift is ``c_adj * (r - (1 - alpha))``; at or
    above it the shift is ``r - (1 - alpha)``. With ``n_calib`` the adjusted
    level is clamped to ``[1/(n+1), 1 - 1/(n+1)]`` so a quantile exists.
    """
    _check_alpha(alpha)
    r = np.asarray(r_hat, dtype=np.float64)
    gap = r - (1.0 - alpha)
    delta = np.where(gap < 0, c_adj * gap, gap)
    alpha_hat = alpha - delta
    if n_calib is not None:
        lo, hi = 1.0 / (n_calib + 1), 1.0 - 1.0 / (n_calib + 1)
        clipped = np.clip(alpha_hat, lo, hi)
        if np.any(clipped != alpha_hat):
            log.debug("clamped %d adjusted levels to [%g, %g]", int(np.sum(clipped != alpha_hat)), lo, hi)
        alpha_hat = clipped
    if np.ndim(r_hat) == 0:
        return float(delta), float(alpha_hat)
    return delta, alpha_hat


class CalibrationWindow:
    """Rolling (y, yhat) buffers, one per horizon step, each holding N nodes.

    The buffer for a step keeps at most ``n_calib`` time rows; pushing into a
    full buffer evicts the oldest row.
    """

    def __init__(self, n_nodes, n_calib, adjacency=None, horizon=1, eta=0.95, zeta=0.05,
                 beta=0.9, c_adj=0.0, alpha=0.1):
        if n_calib < 1:
            raise ConfigError("n_calib must be positive")
        if not np.isclose(eta + zeta, 1.0) or eta < 0 or zeta < 0:
            raise ConfigError("eta and zeta must be nonnegative and sum to 1")
        if not 0.0 < beta <= 1.0:
            raise ConfigError("beta must lie in (0, 1]")
        _check_alpha(alpha)
        self.n_nodes, self.n_calib, self.horizon = n_nodes, n_calib, horizon
        self.eta, self.zeta, self.beta, self.c_adj, self.alpha = eta, zeta, beta, c_adj, alpha
        A = np.zeros((n_nodes, n_nodes)) if adjacency is None else np.asarray(adjacency)
        if A.shape != (n_nodes, n_nodes):
            raise ContractError("adjacency does not match the node count")
        self.neighbours = neighbour_lists(A)
        self._y = np.zeros((horizon, n_calib, n_nodes))
        self._yhat = np.zeros((horizon, n_calib, n_nodes))
        self._count = np.zeros(horizon, dtype=int)
        self._head = np.zeros(horizon, dtype=int)

    def __len__(self):
        return int(self._count.min())

    def size(self, step=0):
        return int(self._count[step])

    def is_warm(self, step=0):
        return self._count[step] > 0

    def push(self, y, yhat, step=0):
        """Append one time row (N values) for ``step``, evicting the oldest if full."""
        y = np.asarray(y, dtype=np.float64).reshape(self.n_nodes)
        yhat = np.asarray(yhat, dtype=np.float64).reshape(self.n_nodes)
        h = self._head[step]
        self._y[step, h] = y
        self._yhat[step, h] = yhat
        self._head[step] = (h + 1) % self.n_calib
        self._count[step] = min(self._count[step] + 1, self.n_calib)

    def extend(self, y, yhat, step=0):
        for yr, pr in zip(np.asarray(y), np.asarray(yhat)):
            self.push(yr, pr, step)

    def residuals(self, step=0):
        """Absolute residuals (T_c, N), oldest row first."""
        n = self._count[step]
        if n < self.n_calib:
            idx = np.arange(n)
        else:
            idx = (self._head[step] + np.arange(self.n_calib)) % self.n_calib
        return np.abs(self._y[step, idx] - self._yhat[step, idx])


def cpst_step(yhat, window: CalibrationWindow, step=0, fallback_residuals=None):
    """CPST region for the N forecasts of one horizon step at the next time.

    The per-node score is the decay-weighted window score; the node's rank
    among all nodes sets the adjusted level, and the radius is the
    decay-weighted quantile of the pooled per-(time, node) scores in the
    window at that level. A cold window falls back to split conformal on
    ``fallback_residuals``.
    """
    yhat = np.asarray(yhat, dtype=np.float64).reshape(window.n_nodes)
    if not window.is_warm(step):
        if fallback_residuals is None:
            raise ContractError("calibration window is cold and no fallback residuals were given")
        warnings.warn("calibration window is cold; falling back to split conformal", RuntimeWarning, stacklevel=2)
        reg = scp_region(yhat, fallback_residuals, window.alpha)
        reg.fallback = True
        return reg
    res = window.residuals(step)
    T_c = res.shape[0]
    s = node_scores(res, window.neighbours, window.eta, window.zeta)
    w_t = decay_weights(T_c, window.beta)
    eps = w_t @ s / T_c
    r_hat = rank_quantile(eps)
    delta, alpha_hat = adjust(r_hat, window.alpha, window.c_adj, n_calib=window.n_calib)
    flat_w = np.repeat(w_t, window.n_nodes) if window.beta != 1.0 else None
    v = empirical_quantile(s, 1.0 - alpha_hat, flat_w)
    reg = _region(yhat, v)
    reg.eps_bar, reg.r_hat, reg.delta, reg.alpha_hat = eps, r_hat, delta, alpha_hat
    return reg


# ---------------------------------------------------------------- estimators

class SplitConformal(BaseEstimator):
    """Static split conformal regions, one residual quantile per horizon step.

    ``fit`` takes calibration truths and forecasts shaped (n, N, H) (or
    (n, N) for one step); ``bonferroni=True`` spends alpha / H per step.
    """

    def __init__(self, alpha=0.1, bonferroni=False):
        self.alpha = alpha
        self.bonferroni = bonferroni

    def fit(self, y, yhat):
        _check_alpha(self.alpha)
        res = np.abs(np.asarray(y, dtype=np.float64) - np.asarray(yhat, dtype=np.float64))
        if res.ndim == 2:
            res = res[..., None]
        H = res.shape[-1]
        level = self.alpha / H if self.bonferroni else self.alpha
        n = res.reshape(-1, H).shape[0]
        if self.bonferroni and level < 1.0 / (n + 1):
            warnings.warn("per-step Bonferroni level below 1/(n+1)", RuntimeWarning, stacklevel=2)
        self.quantiles_ = np.array([empirical_quantile(res[..., h], 1.0 - level) for h in range(H)])
        self.n_calib_ = res.shape[0]
        return self

    def predict(self, yhat):
        yhat = np.asarray(yhat, dtype=np.float64)
        q = self.quantiles_ if yhat.ndim > 2 or self.quantiles_.size > 1 else self.quantiles_[0]
        lower, upper = yhat - q, yhat + q
        return lower, upper


class CPST(BaseEstimator):
    """Rolling spatio-temporal conformal regions with per-node level shifts.

    ``fit`` seeds the calibration window with the most recent ``n_calib``
    rows of (y, yhat); :meth:`stream` then emits a region for every new
    forecast row before its truth is pushed into the window.
    """

    def __init__(self, alpha=0.1, eta=0.95, zeta=0.05, beta=0.9, c_adj=0.0, n_calib=None):
        self.alpha = alpha
        self.eta = eta
        self.zeta = zeta
        self.beta = beta
        self.c_adj = c_adj
        self.n_calib = n_calib

    def fit(self, y, yhat, adjacency=None):
        y = np.asarray(y, dtype=np.float64)
        yhat = np.asarray(yhat, dtype=np.float64)
        if y.ndim == 2:
            y, yhat = y[..., None], yhat[..., None]
        n, N, H = y.shape
        cap = n if self.n_calib is None else self.n_calib
        self.window_ = CalibrationWindow(N, cap, adjacency, H, self.eta, self.zeta, self.beta,
                                         self.c_adj, self.alpha)
        for h in range(H):
            self.window_.extend(y[-cap:, :, h], yhat[-cap:, :, h], step=h)
        self.fallback_ = np.abs(y - yhat)
        return self

    def predict(self, yhat):
        """Regions for one forecast row (N, H) without updating the window."""
        yhat = np.asarray(yhat, dtype=np.float64).reshape(self.window_.n_nodes, -1)
        regs = [cpst_step(yhat[:, h], self.window_, h, self.fallback_[..., h]) for h in range(yhat.shape[1])]
        lower = np.stack([r.lower for r in regs], axis=-1)
        upper = np.stack([r.upper for r in regs], axis=-1)
        return lower, upper

    def stream(self, y, yhat, delay=None):
        """Regions for a sequence of forecasts (T, N, H), updating as truths arrive.

        The truth of a step-h forecast (h = 1..H) issued at row t is known
        only h rows later, so it enters the window just before row t + h is
        scored. ``delay=k`` uses a fixed lag of k rows for every step and
        ``delay=0`` pushes each truth right after its own row.
        """
        y = np.asarray(y, dtype=np.float64)
        yhat = np.asarray(yhat, dtype=np.float64)
        squeeze = y.ndim == 2
        if squeeze:
            y, yhat = y[..., None], yhat[..., None]
        T, N, H = y.shape
        lower = np.empty_like(yhat)
        upper = np.empty_like(yhat)
        lags = [0] * H if delay == 0 else [h + 1 for h in range(H)] if delay is None else [delay] * H
        for t in range(T):
            for h in range(H):
                src = t - lags[h]
                if lags[h] and src >= 0:
                    self.window_.push(y[src, :, h], yhat[src, :, h], h)
                reg = cpst_step(yhat[t, :, h], self.window_, h, self.fallback_[..., h])
                lower[t, :, h], upper[t, :, h] = reg.lower, reg.upper
                if not lags[h]:
                    self.window_.push(y[t, :, h], yhat[t, :, h], h)
        if squeeze:
            return lower[..., 0], upper[..., 0]
        return lower, upper


# ---------------------------------------------------------------- synthetic streams

def residual_stream(n_steps, n_nodes, rng, phi=0.5, sigma=1.0, drift=0.0, drift_start=None,
                    node_scale=None):
    """Forecast errors with AR(1) dynamics and an optional mean drift.

    Returns ``(y, yhat)`` with ``yhat = 0`` so the residuals are ``y``. The
    drift ramps linearly from ``drift_start`` to reach ``drift`` (in units of
    the stationary standard deviation) at the last step.
    """
    e = np.empty((n_steps, n_nodes))
    innov = rng.normal(scale=sigma * np.sqrt(1.0 - phi ** 2), size=(n_steps, n_nodes))
    e[0] = rng.normal(scale=sigma, size=n_nodes)
    for t in range(1, n_steps):
        e[t] = phi * e[t - 1] + innov[t]
    if node_scale is not None:
        e = e * np.asarray(node_scale)
    if drift and drift_start is not None:
        ramp = np.clip((np.arange(n_steps) - drift_start) / max(n_steps - 1 - drift_start, 1), 0.0, None)
        e = e + drift * sigma * ramp[:, None]
    return e, np.zeros_like(e)


def select_c_adj(y, yhat, n_calib, adjacency=None, alpha=0.1, grid=C_ADJ_GRID, **cpst_kw):
    """Grid-search the adjustment constant on a validation stream.

    The first ``n_calib`` rows seed the window and the rest are streamed.
    Returns the value with the smallest mean width among those reaching
    coverage ``>= 1 - alpha`` (the widest-covering value if none do), and
    the per-value ``(coverage, width)`` table.
    """
    y = np.asarray(y, dtype=np.float64)
    yhat = np.asarray(yhat, dtype=np.float64)
    table = {}
    for c in grid:
        est = CPST(alpha=alpha, c_adj=c, n_calib=n_calib, **cpst_kw).fit(y[:n_calib], yhat[:n_calib], adjacency)
        lo, hi = est.stream(y[n_calib:], yhat[n_calib:], delay=0)
        tgt = y[n_calib:]
        table[c] = (float(np.mean((lo <= tgt) & (tgt <= hi))), float(np.mean(hi - lo)))
    ok = [c for c in grid if table[c][0] >= 1.0 - alpha]
    best = min(ok, key=lambda c: table[c][1]) if ok else max(grid, key=lambda c: table[c][0])
    return best, table


# ---------------------------------------------------------------- output

def write_regions_csv(path, timestamps, node_ids, yhat, lower, upper, y, alpha, method="cpst"):
    """Long-format region table; arrays are (T, N, H), timestamps are per row t.

    The first line is a comment recording the method and alpha.
    """
    yhat, lower, upper, y = (np.asarray(a, dtype=np.float64) for a in (yhat, lower, upper, y))
    T, N, H = yhat.shape
    with open(path, "w", newline="") as fh:
        fh.write(f"# method={method} alpha={float(alpha)!r}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REGION_COLUMNS)
        for t in range(T):
            ts = str(timestamps[t])
            for i in range(N):
                for h in range(H):
                    cov = int(lower[t, i, h] <= y[t, i, h] <= upper[t, i, h])
                    w.writerow([ts, node_ids[i], h + 1, f"{yhat[t, i, h]:.6f}", f"{lower[t, i, h]:.6f}",
                                f"{upper[t, i, h]:.6f}", f"{y[t, i, h]:.6f}", cov])


def read_regions_csv(path):
    """Inverse of :func:`write_regions_csv`: (alpha, method, list of row dicts)."""
    with open(path) as fh:
        head = fh.readline().strip()
        if not head.startswith("#"):
            raise ContractError(f"{path}: missing region header")
        meta = dict(kv.split("=", 1) for kv in head[1:].split())
        rows = list(csv.DictReader(fh))
    return float(meta["alpha"]), meta.get("method"), rows

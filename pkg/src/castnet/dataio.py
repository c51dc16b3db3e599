"""Series containers, synthetic SVAR generation, CSV ingestion and windowing."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from sklearn.preprocessing import StandardScaler

from .exceptions import ContractError, IngestionError

log = logging.getLogger(__name__)

STEP = np.timedelta64(5, "m")
DEFAULT_START = np.datetime64("2024-01-01T00:00")  # a Monday
N_TIME_FEATURES = 12 + 24 + 7
MAX_FILL = 3


@dataclass
class SeriesTable:
    """Uniformly sampled multivariate series, one column per node."""

    timestamps: np.ndarray
    values: np.ndarray
    node_ids: list = None
    missing: np.ndarray = None

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype="datetime64[m]")
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ContractError("values must be a (T, N) matrix")
        if len(self.timestamps) != self.values.shape[0]:
            raise ContractError("one timestamp per row required")
        if self.node_ids is None:
            self.node_ids = [f"node_{i}" for i in range(self.values.shape[1])]
        if self.missing is None:
            self.missing = ~np.isfinite(self.values)
        if len(self.timestamps) > 1:
            d = np.diff(self.timestamps)
            if np.any(d <= np.timedelta64(0, "m")) or np.any(d != d[0]):
                raise ContractError("timestamps must be strictly increasing with a constant step")

    @property
    def n_steps(self):
        return self.values.shape[0]

    @property
    def n_nodes(self):
        return self.values.shape[1]

    def slice(self, start, stop):
        return SeriesTable(self.timestamps[start:stop], self.values[start:stop],
                           list(self.node_ids), self.missing[start:stop])


@dataclass
class SyntheticSpec:
    """Parameters of a synthetic structural VAR with known ground truth.

    ``self_lag`` puts a fixed autoregressive weight on the diagonal of the first
    lag matrix; ``daily_amplitude`` adds a per-node time-of-day profile on top of
    the SVAR state (0 disables it). ``geo_radius`` controls the extra
    random-geometric edges of the physical adjacency.
    """

    n_nodes: int = 30
    lag: int = 1
    density: float = 0.1
    weight_low: float = 0.3
    weight_high: float = 0.8
    noise: float = 0.5
    n_steps: int = 4000
    seed: int = 7
    self_lag: float = 0.6
    daily_amplitude: float = 2.0
    level: float = 10.0
    geo_radius: float = 0.2
    burn_in: int = 200
    max_radius: float = 0.95

    def validate(self):
        if self.n_nodes < 1 or self.lag < 1 or self.n_steps < 1:
            raise ContractError("n_nodes, lag and n_steps must be positive")
        if not 0.0 <= self.density <= 1.0:
            raise ContractError("density must lie in [0, 1]")
        if not 0.0 <= self.weight_low <= self.weight_high:
            raise ContractError("need 0 <= weight_low <= weight_high")
        if self.noise < 0:
            raise ContractError("noise must be nonnegative")


@dataclass
class TrafficWindow:
    """One supervised sample: ``x`` is (N, M) history, ``y`` is (N, H) targets."""

    x: np.ndarray
    y: np.ndarray
    time_features: np.ndarray
    start: int
    timestamp: np.datetime64


@dataclass
class WindowBatch:
    """Stacked windows: ``x`` (B, N, M), ``y`` (B, N, H), ``time_features`` (B, M, 43)."""

    x: np.ndarray
    y: np.ndarray
    time_features: np.ndarray
    starts: np.ndarray
    timestamps: np.ndarray = field(default=None)

    def __len__(self):
        return self.x.shape[0]

    def subset(self, idx):
        return WindowBatch(self.x[idx], self.y[idx], self.time_features[idx],
                           self.starts[idx], None if self.timestamps is None else self.timestamps[idx])


# ------------------------------------------------------------ time features

def time_features(timestamps):
    """One-hot (slot-in-hour | hour-of-day | day-of-week) rows, shape (T, 43)."""
    ts = np.asarray(timestamps, dtype="datetime64[m]")
    minutes = (ts - ts.astype("datetime64[D]")).astype(int)
    slot = (minutes % 60) // 5
    hour = minutes // 60
    # 1970-01-01 was a Thursday; shift so Monday == 0
    day = (ts.astype("datetime64[D]").astype(int) + 3) % 7
    out = np.zeros((len(ts), N_TIME_FEATURES))
    rows = np.arange(len(ts))
    out[rows, slot] = 1.0
    out[rows, 12 + hour] = 1.0
    out[rows, 36 + day] = 1.0
    return out


# ---------------------------------------------------------------- synthetic

def _random_dag(n, density, rng, low, high):
    order = rng.permutation(n)
    C = np.zeros((n, n))
    for a in range(n):
        for b in range(a + 1, n):
            if rng.random() < density:
                sign = rng.choice([-1.0, 1.0])
                C[order[a], order[b]] = sign * rng.uniform(low, high)
    return C


def _random_lag(n, density, rng, low, high):
    mask = rng.random((n, n)) < density
    signs = rng.choice([-1.0, 1.0], size=(n, n))
    return np.where(mask, signs * rng.uniform(low, high, size=(n, n)), 0.0)


def companion_radius(C, A_lag):
    """Spectral radius of the reduced-form companion matrix."""
    n = C.shape[0]
    inv = np.linalg.inv(np.eye(n) - C)
    P = len(A_lag)
    comp = np.zeros((n * P, n * P))
    for i, A in enumerate(A_lag):
        comp[i * n:(i + 1) * n, :n] = A @ inv
    if P > 1:
        comp[:n * (P - 1), n:] = np.eye(n * (P - 1))
    return float(np.max(np.abs(np.linalg.eigvals(comp))))


def _geometric_edges(n, radius, rng):
    pts = rng.random((n, 2))
    d = np.linalg.norm(pts[:, None, :] - pts[None, :, :], axis=-1)
    E = (d < radius).astype(np.float64)
    np.fill_diagonal(E, 0.0)
    return E


def simulate_svar(C, A_lag, n_steps, noise, rng, burn_in=200):
    """Draw ``x_t^T (I - C) = sum_i x_{t-i}^T A_i + z_t^T`` for ``n_steps`` rows."""
    from .dynotears import is_dag  # local import: dynotears imports this module

    C = np.asarray(C, dtype=np.float64)
    if not is_dag(C):
        raise ContractError("ground-truth contemporaneous matrix must be acyclic")
    n = C.shape[0]
    P = len(A_lag)
    inv = np.linalg.inv(np.eye(n) - C)
    total = n_steps + burn_in
    X = np.zeros((total + P, n))
    Z = rng.normal(scale=noise, size=(total, n))
    for t in range(total):
        drive = Z[t].copy()
        for i, A in enumerate(A_lag, start=1):
            drive += X[P + t - i] @ A
        X[P + t] = drive @ inv
    return X[P + burn_in:]


def generate_svar(spec: SyntheticSpec):
    """Simulate a series with known causal graphs.

    Returns ``(table, truth, adjacency)`` where ``truth`` is a
    :class:`~castnet.dynotears.CausalGraphSet` and ``adjacency`` is the
    symmetric physical graph (symmetrised support of ``C`` plus random
    geometric edges).
    """
    from .dynotears import CausalGraphSet

    spec.validate()
    rng = np.random.default_rng(spec.seed)
    n = spec.n_nodes
    C = _random_dag(n, spec.density, rng, spec.weight_low, spec.weight_high)
    A_lag = [_random_lag(n, spec.density, rng, spec.weight_low, spec.weight_high)
             for _ in range(spec.lag)]
    if spec.self_lag:
        np.fill_diagonal(A_lag[0], spec.self_lag)
    while companion_radius(C, A_lag) >= spec.max_radius:
        A_lag = [0.9 * A for A in A_lag]

    X = simulate_svar(C, A_lag, spec.n_steps, spec.noise, rng, spec.burn_in)
    timestamps = DEFAULT_START + np.arange(spec.n_steps) * STEP
    if spec.daily_amplitude:
        minutes = (timestamps - timestamps.astype("datetime64[D]")).astype(int)
        phase = 2 * np.pi * minutes / 1440.0
        shift = rng.uniform(0, 2 * np.pi, size=n)
        gain = spec.daily_amplitude * rng.uniform(0.5, 1.5, size=n)
        profile = np.sin(phase[:, None] - shift[None, :]) + 0.5 * np.sin(2 * phase[:, None] - shift[None, :])
        X = X + gain * profile
    X = X + spec.level

    support = (C != 0).astype(np.float64)
    adjacency = np.maximum(support, support.T)
    adjacency = np.maximum(adjacency, _geometric_edges(n, spec.geo_radius, rng))
    truth = CausalGraphSet(C=C, A_lag=A_lag, threshold=0.0)
    return SeriesTable(timestamps, X), truth, adjacency


def save_spec(spec: SyntheticSpec, path):
    Path(path).write_text(json.dumps(asdict(spec), indent=2, sort_keys=True) + "\n")


def load_spec(path):
    return SyntheticSpec(**json.loads(Path(path).read_text()))


# ---------------------------------------------------------------- CSV files

def _fmt(v):
    return "" if not np.isfinite(v) else repr(float(v))


def save_csv(table: SeriesTable, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["timestamp", *table.node_ids])
        for ts, row, miss in zip(table.timestamps, table.values, table.missing):
            w.writerow([str(ts), *("" if m else _fmt(v) for v, m in zip(row, miss))])


def _forward_fill(values):
    """Fill runs of at most ``MAX_FILL`` missing cells with the last observation."""
    values = values.copy()
    missing = ~np.isfinite(values)
    T, N = values.shape
    for j in range(N):
        t = 0
        while t < T:
            if not missing[t, j]:
                t += 1
                continue
            end = t
            while end < T and missing[end, j]:
                end += 1
            if t > 0 and end - t <= MAX_FILL:
                values[t:end, j] = values[t - 1, j]
                missing[t:end, j] = False
            t = end
    return values, missing


def load_csv(path, adjacency_path=None):
    """Read a ``timestamp,node_0,...`` CSV (and optional edge list)."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][0] != "timestamp":
        raise IngestionError(f"{path}: header must start with 'timestamp'")
    node_ids = rows[0][1:]
    stamps, values = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != len(node_ids) + 1:
            raise IngestionError(f"{path}:{lineno}: expected {len(node_ids) + 1} fields")
        stamps.append(np.datetime64(row[0], "m"))
        values.append([float(v) if v.strip() else np.nan for v in row[1:]])
    stamps = np.array(stamps, dtype="datetime64[m]")
    if len(stamps) > 1:
        d = np.diff(stamps)
        steps, counts = np.unique(d, return_counts=True)
        step = steps[np.argmax(counts)]
        bad = np.nonzero((d != step) | (d <= np.timedelta64(0, "m")))[0]
        if len(bad):
            # data rows start on file line 2; gap i sits between lines i+2 and i+3
            offenders = ", ".join(f"line {i + 3} ({stamps[i]} -> {stamps[i + 1]})" for i in bad)
            raise IngestionError(f"{path}: non-uniform timestamps at {offenders}")
    vals, missing = _forward_fill(np.array(values, dtype=np.float64).reshape(len(stamps), len(node_ids)))
    if missing.any():
        log.warning("%s: %d cells missing after forward fill", path, int(missing.sum()))
    table = SeriesTable(stamps, vals, node_ids, missing)
    if adjacency_path is None:
        return table, None
    return table, load_edge_list(adjacency_path, len(node_ids))


def load_edge_list(path, n_nodes, symmetric=True):
    """Parse ``src dst weight`` lines (0-indexed, ``#`` comments) into a matrix."""
    A = np.zeros((n_nodes, n_nodes))
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) not in (2, 3):
            raise IngestionError(f"{path}:{lineno}: expected 'src dst [weight]'")
        s, d = int(parts[0]), int(parts[1])
        w = float(parts[2]) if len(parts) == 3 else 1.0
        A[s, d] = w
        if symmetric:
            A[d, s] = w
    return A


def save_edge_list(A, path, symmetric=True):
    lines = ["# src dst weight"]
    n = A.shape[0]
    for s in range(n):
        for d in range(n):
            if A[s, d] != 0 and (not symmetric or s <= d):
                lines.append(f"{s} {d} {float(A[s, d])!r}")
    Path(path).write_text("\n".join(lines) + "\n")


# -------------------------------------------------------- splitting/windows

def split(table: SeriesTable, ratios=(0.6, 0.2, 0.2), min_length=None):
    """Chronological contiguous train/validation/test slices."""
    ratios = np.asarray(ratios, dtype=np.float64)
    if len(ratios) != 3 or np.any(ratios < 0) or not np.isclose(ratios.sum(), 1.0):
        raise ContractError("ratios must be three nonnegative numbers summing to 1")
    T = table.n_steps
    n_train = int(round(T * ratios[0]))
    n_val = int(round(T * ratios[1]))
    cuts = [0, n_train, n_train + n_val, T]
    parts = [table.slice(a, b) for a, b in zip(cuts[:-1], cuts[1:])]
    if min_length is not None:
        for name, p in zip(("train", "validation", "test"), parts):
            if p.n_steps < min_length:
                raise ContractError(f"{name} split has {p.n_steps} steps, need at least {min_length}")
    return tuple(parts)


def iter_windows(table: SeriesTable, M=12, H=12):
    """Yield stride-1 windows whose inputs and targets are fully observed."""
    if M < 1 or H < 1:
        raise ContractError("M and H must be positive")
    if table.n_steps < M + H:
        raise ContractError(f"series of length {table.n_steps} shorter than M+H={M + H}")
    feats = time_features(table.timestamps)
    bad = table.missing.any(axis=1)
    for s in range(table.n_steps - M - H + 1):
        if bad[s:s + M + H].any():
            continue
        yield TrafficWindow(x=table.values[s:s + M].T.copy(), y=table.values[s + M:s + M + H].T.copy(),
                            time_features=feats[s:s + M], start=s, timestamp=table.timestamps[s + M - 1])


def make_windows(table: SeriesTable, M=12, H=12) -> WindowBatch:
    """All windows of ``table`` stacked into arrays."""
    if M < 1 or H < 1:
        raise ContractError("M and H must be positive")
    if table.n_steps < M + H:
        raise ContractError(f"series of length {table.n_steps} shorter than M+H={M + H}")
    n = table.n_steps - M - H + 1
    bad = table.missing.any(axis=1).astype(int)
    span_bad = np.convolve(bad, np.ones(M + H, dtype=int), mode="valid")[:n] > 0
    starts = np.nonzero(~span_bad)[0]
    V = table.values
    idx_x = starts[:, None] + np.arange(M)[None, :]
    idx_y = starts[:, None] + M + np.arange(H)[None, :]
    feats = time_features(table.timestamps)
    return WindowBatch(
        x=np.transpose(V[idx_x], (0, 2, 1)),
        y=np.transpose(V[idx_y], (0, 2, 1)),
        time_features=feats[idx_x],
        starts=starts,
        timestamps=table.timestamps[starts + M - 1],
    )


class NodeScaler(StandardScaler):
    """Per-node z-score fitted on a (T, N) training block.

    Works on any array whose last axis is nodes, or whose node axis is given
    by ``axis`` (e.g. ``axis=1`` for (B, N, M) window tensors).
    """

    def transform_nodes(self, a, axis=-1):
        a = np.moveaxis(np.asarray(a, dtype=np.float64), axis, -1)
        return np.moveaxis((a - self.mean_) / self.scale_, -1, axis)

    def inverse_nodes(self, a, axis=-1):
        a = np.moveaxis(np.asarray(a, dtype=np.float64), axis, -1)
        return np.moveaxis(a * self.scale_ + self.mean_, -1, axis)

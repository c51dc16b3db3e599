"""Causally-aware spatio-temporal multi-graph convolution forecaster.

The network is written as plain functions over a parameter dictionary (so the
pieces can be probed and gradient-checked individually) and wrapped by
:class:`CastMGCNForecaster`, an sklearn-style estimator.

Tensor layout inside the network is ``(batch, nodes, time, channels)``.
"""
from __future__ import annotations

import base64
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import diffcore as dc
from .dataio import N_TIME_FEATURES, NodeScaler, SeriesTable, WindowBatch, make_windows
from .exceptions import ConfigError, ContractError, TrainingDivergenceError
from .graphops import GRAPH_ROLES, GraphBundle, adaptive_graph, powers

log = logging.getLogger(__name__)

FUSIONS = ("weighted_sum", "sum", "mean", "max", "min")

# graph subsets of the ablation variants (Model 1 .. Model 6)
ABLATION_VARIANTS = {
    1: ("adjacency",),
    2: ("adjacency", "adaptive"),
    3: ("adjacency", "intra", "adaptive"),
    4: ("adjacency", "lag", "adaptive"),
    5: ("adjacency", "lag", "intra"),
    6: ("adjacency", "lag", "intra", "adaptive"),
}


@dataclass
class ModelConfig:
    d: int = 16
    n_blocks: int = 2
    K: int = 2
    dilations: tuple = (1, 2, 4)
    kernel_size: int = 2
    head_widths: tuple = (64, 32, 12)
    history: int = 12
    fusion: str = "weighted_sum"
    graph_subset: tuple = GRAPH_ROLES
    node_emb_dim: int = 10
    n_features: int = 1
    dropout: float = 0.3
    lr: float = 1e-3
    weight_decay: float = 1e-4
    epochs: int = 20
    batch: int = 32
    patience: int = 15
    window_stride: int = 4
    monitor_windows: int = 128
    seed: int = 0

    def __post_init__(self):
        self.dilations = tuple(int(v) for v in self.dilations)
        self.head_widths = tuple(int(v) for v in self.head_widths)
        self.graph_subset = tuple(self.graph_subset)
        self.validate()

    @property
    def horizon(self):
        return self.head_widths[-1]

    def validate(self):
        if self.fusion not in FUSIONS:
            raise ConfigError(f"unknown fusion {self.fusion!r}; choose from {FUSIONS}")
        if not self.graph_subset:
            raise ConfigError("graph_subset must name at least one graph")
        bad = [g for g in self.graph_subset if g not in GRAPH_ROLES]
        if bad:
            raise ConfigError(f"unknown graph roles {bad}; choose from {GRAPH_ROLES}")
        if not self.head_widths:
            raise ConfigError("head_widths must end with the horizon H")
        if self.n_features != 1:
            raise ConfigError("only single-feature targets are supported")
        if min(self.d, self.n_blocks, self.kernel_size, self.history, self.node_emb_dim) < 1 or self.K < 0:
            raise ConfigError("widths, block count, kernel size and history must be positive")
        if self.window_stride < 1 or self.monitor_windows < 1:
            raise ConfigError("window_stride and monitor_windows must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")

    @classmethod
    def paper_scale(cls, **overrides):
        """Widths of the tuned full-size model (embedding 32, four blocks)."""
        base = dict(d=32, n_blocks=4, head_widths=(512, 256, 12), epochs=100, batch=64, window_stride=1)
        base.update(overrides)
        return cls(**base)

    def to_dict(self):
        out = asdict(self)
        out["dilations"] = list(self.dilations)
        out["head_widths"] = list(self.head_widths)
        out["graph_subset"] = list(self.graph_subset)
        return out


# ---------------------------------------------------------------- parameters

def _uniform(rng, fan_in, shape):
    bound = 1.0 / np.sqrt(fan_in)
    return dc.Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def init_params(config: ModelConfig, n_nodes, rng=None):
    """Fresh parameter dictionary; names are stable and sorted by construction."""
    rng = np.random.default_rng(config.seed) if rng is None else rng
    d, k = config.d, config.kernel_size
    f_in = config.n_features + N_TIME_FEATURES
    p = {"embed.W": _uniform(rng, f_in, (f_in, d)), "embed.b": _uniform(rng, f_in, (d,))}
    for b in range(config.n_blocks):
        pre = f"block{b}."
        for name in ("W_Q", "W_K", "W_V"):
            p[pre + name] = _uniform(rng, d, (d, d))
        for li, _ in enumerate(config.dilations):
            p[pre + f"tcn{li}.W_g"] = _uniform(rng, k * d, (k, d, d))
            p[pre + f"tcn{li}.b_g"] = _uniform(rng, k * d, (d,))
            p[pre + f"tcn{li}.W_s"] = _uniform(rng, k * d, (k, d, d))
            p[pre + f"tcn{li}.b_s"] = _uniform(rng, k * d, (d,))
        for role in config.graph_subset:
            for kk in range(config.K + 1):
                p[pre + f"gcn.{role}.W{kk}"] = _uniform(rng, d, (d, d))
        if config.fusion == "weighted_sum":
            p[pre + "fusion"] = dc.Tensor(np.zeros(len(config.graph_subset)), requires_grad=True)
    if "adaptive" in config.graph_subset:
        p["adaptive.emb1"] = dc.Tensor(rng.normal(size=(n_nodes, config.node_emb_dim)), requires_grad=True)
        p["adaptive.emb2"] = dc.Tensor(rng.normal(size=(n_nodes, config.node_emb_dim)), requires_grad=True)
    width = config.history * d
    for i, w in enumerate(config.head_widths):
        p[f"head{i}.W"] = _uniform(rng, width, (width, w))
        p[f"head{i}.b"] = _uniform(rng, width, (w,))
        width = w
    return p


def count_parameters(config: ModelConfig, n_nodes):
    """Number of scalar parameters, computed from the configuration alone."""
    d, k = config.d, config.kernel_size
    f_in = config.n_features + N_TIME_FEATURES
    G = len(config.graph_subset)
    per_block = 3 * d * d + len(config.dilations) * 2 * (k * d * d + d) + G * (config.K + 1) * d * d
    per_block += G if config.fusion == "weighted_sum" else 0
    total = f_in * d + d + config.n_blocks * per_block
    if "adaptive" in config.graph_subset:
        total += 2 * n_nodes * config.node_emb_dim
    width = config.history * d
    for w in config.head_widths:
        total += width * w + w
        width = w
    return total


# ---------------------------------------------------------------- components

def embed(x, tf, W, b):
    """Concatenate node values with calendar one-hots and map them to width d.

    ``x`` is (B, N, M) or (B, N, M, F); ``tf`` is (B, M, 43), shared by nodes.
    """
    x = np.asarray(x, dtype=np.float64)
    tf = np.asarray(tf, dtype=np.float64)
    if x.ndim == 3:
        x = x[..., None]
    B, N, M, _ = x.shape
    if tf.shape != (B, M, N_TIME_FEATURES):
        raise ContractError(f"time features {tf.shape} not aligned with windows (B={B}, M={M})")
    xbar = np.concatenate([x, np.broadcast_to(tf[:, None], (B, N, M, tf.shape[-1]))], axis=-1)
    return dc.add(dc.matmul(dc.Tensor(xbar), W), b)


def causal_mask(M):
    """Additive mask: ``-inf`` strictly above the diagonal (future positions)."""
    mask = np.zeros((M, M))
    mask[np.triu_indices(M, k=1)] = -np.inf
    return mask


def masked_attention(X, W_Q, W_K, W_V):
    """Single-head self-attention over time where position t sees only <= t."""
    X = dc.constant(X)
    M, d_k = X.shape[-2], W_K.shape[-1]
    Q = dc.matmul(X, W_Q)
    K = dc.matmul(X, W_K)
    V = dc.matmul(X, W_V)
    axes = tuple(range(K.ndim - 2)) + (K.ndim - 1, K.ndim - 2)
    scores = dc.add(dc.matmul(Q, dc.transpose(K, axes)), causal_mask(M))
    att = dc.softmax(dc.div(scores, np.sqrt(d_k)), axis=-1)
    return dc.matmul(att, V)


def gated_tcn(X, layers, dilations):
    """Stack of gated causal convolutions, one per dilation rate.

    ``layers`` is a list of ``(W_g, b_g, W_s, b_s)`` tuples.
    """
    z = X
    for (W_g, b_g, W_s, b_s), dil in zip(layers, dilations):
        # filter and gate share their input, so both run as one convolution
        width = W_g.shape[-1]
        both = dc.dilated_conv1d(z, dc.concat([W_g, W_s], axis=-1), dil, bias=dc.concat([b_g, b_s], axis=-1))
        filt = dc.tanh(dc.take(both, (Ellipsis, slice(0, width))))
        gate = dc.sigmoid(dc.take(both, (Ellipsis, slice(width, 2 * width))))
        z = dc.mul(filt, gate)
    return z


def _block_layers(params, pre, n_layers):
    return [tuple(params[pre + f"tcn{i}.{n}"] for n in ("W_g", "b_g", "W_s", "b_s")) for i in range(n_layers)]


def gated_atcn(X, params, block, config, training=False, rng=None):
    """Masked attention, then the gated dilated convolutions, plus a residual."""
    pre = f"block{block}."
    a = masked_attention(X, params[pre + "W_Q"], params[pre + "W_K"], params[pre + "W_V"])
    a = dc.dropout(a, config.dropout, rng, training)
    z = gated_tcn(a, _block_layers(params, pre, len(config.dilations)), config.dilations)
    return dc.add(z, X)


def apply_operator(op, X):
    """Mix the node axis of ``X`` (B, N, M, d) with an N x N operator."""
    B, N, M, d = X.shape
    flat = dc.reshape(X, (B, N, M * d))
    return dc.reshape(dc.matmul(op, flat), (B, N, M, d))


def mgcn(X, operator_powers, weights, fusion, fusion_logits=None):
    """Multi-graph convolution ``fuse_a sum_k g(a)^k X W_k^a`` plus a residual.

    ``operator_powers`` maps each role to ``[I, g, g^2, ...]`` (arrays, or
    tensors for the adaptive graph); ``weights`` maps each role to its
    ``[W_0, ..., W_K]``.
    """
    if fusion not in FUSIONS:
        raise ConfigError(f"unknown fusion {fusion!r}")
    roles = list(operator_powers)
    branches = []
    for role in roles:
        ops, Ws = operator_powers[role], weights[role]
        acc = dc.matmul(X, Ws[0])
        for k in range(1, len(Ws)):
            acc = dc.add(acc, apply_operator(ops[k], dc.matmul(X, Ws[k])))
        branches.append(acc)
    if len(branches) == 1 and fusion != "weighted_sum":
        fused = branches[0]
    else:
        stacked = dc.stack(branches, axis=0)
        if fusion == "weighted_sum":
            w = dc.softmax(fusion_logits, axis=0)
            fused = dc.sum(dc.mul(stacked, dc.reshape(w, (len(roles), 1, 1, 1, 1))), axis=0)
        elif fusion == "sum":
            fused = dc.sum(stacked, axis=0)
        elif fusion == "mean":
            fused = dc.mean(stacked, axis=0)
        elif fusion == "max":
            fused = dc.reduce_max(stacked, axis=0)
        else:
            fused = dc.reduce_min(stacked, axis=0)
    return dc.add(fused, X)


def graph_operators(params, bundle: GraphBundle, config: ModelConfig):
    """Operator powers for every role in the configured subset."""
    out = {}
    for role in config.graph_subset:
        if role == "adaptive":
            A_hat = adaptive_graph(params["adaptive.emb1"], params["adaptive.emb2"])
            out[role] = powers(A_hat, config.K)
        else:
            out[role] = bundle.operator_powers(role)
    return out


def forward(params, x, tf, bundle: GraphBundle, config: ModelConfig, training=False, rng=None):
    """Predictions (B, N, H) for normalised inputs ``x`` (B, N, M)."""
    h = embed(x, tf, params["embed.W"], params["embed.b"])
    ops = graph_operators(params, bundle, config)
    outs = []
    for b in range(config.n_blocks):
        pre = f"block{b}."
        xc = gated_atcn(h, params, b, config, training, rng)
        weights = {r: [params[pre + f"gcn.{r}.W{k}"] for k in range(config.K + 1)] for r in config.graph_subset}
        xs = mgcn(xc, ops, weights, config.fusion, params.get(pre + "fusion"))
        xs = dc.dropout(xs, config.dropout, rng, training)
        outs.append(xs)
        h = xs
    final = dc.add(outs[-1], outs[-2]) if len(outs) > 1 else outs[-1]
    B, N, M, d = final.shape
    z = dc.reshape(final, (B, N, M * d))
    n_head = len(config.head_widths)
    for i in range(n_head):
        z = dc.add(dc.matmul(z, params[f"head{i}.W"]), params[f"head{i}.b"])
        if i < n_head - 1:
            z = dc.relu(z)
    return z


def mae_loss(pred, y):
    """Mean absolute error over batch, nodes and horizon."""
    return dc.mean(dc.absolute(dc.sub(pred, y)))


# ---------------------------------------------------------------- estimator

def _encode(a):
    return base64.b64encode(np.ascontiguousarray(a, dtype="<f8").tobytes()).decode("ascii")


def _decode(s, shape):
    return np.frombuffer(base64.b64decode(s), dtype="<f8").reshape(shape).copy()


class CastMGCNForecaster(BaseEstimator):
    """Multi-graph spatio-temporal forecaster with an sklearn-style interface.

    ``fit`` takes the training :class:`~castnet.dataio.SeriesTable`, a
    :class:`~castnet.graphops.GraphBundle` and optionally a validation table;
    ``predict`` maps a :class:`~castnet.dataio.WindowBatch` (or a table, which
    is windowed first) to denormalised forecasts of shape (B, N, H).
    """

    def __init__(self, d=16, n_blocks=2, K=2, dilations=(1, 2, 4), kernel_size=2,
                 head_widths=(64, 32, 12), history=12, fusion="weighted_sum",
                 graph_subset=GRAPH_ROLES, node_emb_dim=10, dropout=0.3, lr=1e-3,
                 weight_decay=1e-4, epochs=20, batch=32, patience=15, window_stride=4,
                 monitor_windows=128, seed=0, verbose=False):
        self.d = d
        self.n_blocks = n_blocks
        self.K = K
        self.dilations = dilations
        self.kernel_size = kernel_size
        self.head_widths = head_widths
        self.history = history
        self.fusion = fusion
        self.graph_subset = graph_subset
        self.node_emb_dim = node_emb_dim
        self.dropout = dropout
        self.lr = lr
        self.weight_decay = weight_decay
        self.epochs = epochs
        self.batch = batch
        self.patience = patience
        self.window_stride = window_stride
        self.monitor_windows = monitor_windows
        self.seed = seed
        self.verbose = verbose

    @classmethod
    def from_config(cls, config: ModelConfig, **kw):
        # n_features is fixed at one for the estimator, so it is not a parameter
        params = {f.name: getattr(config, f.name) for f in fields(ModelConfig) if f.name != "n_features"}
        return cls(**params, **kw)

    def config(self):
        names = {f.name for f in fields(ModelConfig)}
        return ModelConfig(**{k: v for k, v in self.get_params().items() if k in names})

    @property
    def horizon(self):
        return int(self.head_widths[-1])

    # -- training -----------------------------------------------------------

    def _windows(self, data):
        if isinstance(data, WindowBatch):
            return data
        if isinstance(data, SeriesTable):
            return make_windows(data, self.history, self.horizon)
        raise ContractError("expected a SeriesTable or WindowBatch")

    def _normalised(self, batch):
        return self.scaler_.transform_nodes(batch.x, axis=1), self.scaler_.transform_nodes(batch.y, axis=1)

    def _evaluate_mae(self, x, y, tf):
        pred = self._predict_normalised(x, tf)
        err = np.abs(pred - y) * self.scaler_.scale_[None, :, None]
        return float(err.mean())

    def fit(self, train, graphs: GraphBundle, val=None):
        cfg = self.config()
        if graphs.n_nodes != (train.n_nodes if isinstance(train, SeriesTable) else train.x.shape[1]):
            raise ContractError("graph bundle and series disagree on the number of nodes")
        if graphs.K != cfg.K:
            graphs = GraphBundle(A=graphs.A, A_lag=graphs.A_lag, C=graphs.C, K=cfg.K)
        self.bundle_ = graphs
        train_table = train if isinstance(train, SeriesTable) else None
        tr = self._windows(train)
        self.scaler_ = NodeScaler()
        if train_table is not None:
            self.scaler_.fit(train_table.values)
        else:
            self.scaler_.fit(np.concatenate([tr.x[:, :, 0], tr.x[-1].T[1:]], axis=0))
        rng = np.random.default_rng(cfg.seed)
        self.params_ = init_params(cfg, graphs.n_nodes, rng)
        self.n_nodes_ = graphs.n_nodes
        # overlapping windows are thinned to bound the cost of an epoch
        tr = tr.subset(np.arange(0, len(tr), cfg.window_stride))
        xs, ys = self._normalised(tr)
        mon = np.sort(rng.choice(len(xs), size=min(cfg.monitor_windows, len(xs)), replace=False))
        va = self._windows(val) if val is not None else None
        if va is not None:
            va = va.subset(np.arange(0, len(va), cfg.window_stride))
            vx, vy = self._normalised(va)

        opt = dc.Adam(self.params_.values(), lr=cfg.lr, weight_decay=cfg.weight_decay)
        history = []

        def record(epoch, seconds):
            row = {"epoch": epoch, "train_mae": self._evaluate_mae(xs[mon], ys[mon], tr.time_features[mon]),
                   "seconds": seconds}
            row["val_mae"] = self._evaluate_mae(vx, vy, va.time_features) if va is not None else float("nan")
            if not np.isfinite(row["train_mae"]) or (va is not None and not np.isfinite(row["val_mae"])):
                raise TrainingDivergenceError(f"non-finite MAE at epoch {epoch}: {row}")
            history.append(row)
            if self.verbose:
                log.info("epoch %d train %.4f val %.4f", epoch, row["train_mae"], row["val_mae"])
            return row

        best = record(0, 0.0)
        best_params = {k: v.data.copy() for k, v in self.params_.items()}
        stale = 0
        for epoch in range(1, cfg.epochs + 1):
            t0 = time.perf_counter()
            order = rng.permutation(len(xs))
            for s in range(0, len(order), cfg.batch):
                idx = order[s:s + cfg.batch]
                pred = forward(self.params_, xs[idx], tr.time_features[idx], self.bundle_, cfg,
                               training=True, rng=rng)
                loss = mae_loss(pred, ys[idx])
                if not np.isfinite(loss.item()):
                    raise TrainingDivergenceError(f"non-finite loss in epoch {epoch}")
                dc.backward(loss)
                opt.step()
            row = record(epoch, time.perf_counter() - t0)
            key = "val_mae" if va is not None else "train_mae"
            if row[key] < best[key]:
                best, stale = row, 0
                best_params = {k: v.data.copy() for k, v in self.params_.items()}
            else:
                stale += 1
                if stale >= cfg.patience:
                    break
        for k, v in best_params.items():
            self.params_[k].data[...] = v
        self.history_ = history
        self.best_epoch_ = best["epoch"]
        return self

    # -- inference ----------------------------------------------------------

    def _predict_normalised(self, x, tf, chunk=256):
        cfg = self.config()
        out = []
        for s in range(0, len(x), chunk):
            out.append(forward(self.params_, x[s:s + chunk], tf[s:s + chunk], self.bundle_, cfg).data)
        return np.concatenate(out, axis=0) if out else np.zeros((0, self.n_nodes_, self.horizon))

    def predict(self, data):
        check_is_fitted(self, "params_")
        batch = self._windows(data)
        x = self.scaler_.transform_nodes(batch.x, axis=1)
        pred = self._predict_normalised(x, batch.time_features)
        return self.scaler_.inverse_nodes(pred, axis=1)

    # -- checkpoints --------------------------------------------------------

    def save(self, path):
        check_is_fitted(self, "params_")
        doc = {
            "format": "castnet-checkpoint/1",
            "config": self.config().to_dict(),
            "seed": self.seed,
            "n_nodes": self.n_nodes_,
            "best_epoch": self.best_epoch_,
            "history": self.history_,
            "scaler": {"mean": _encode(self.scaler_.mean_), "scale": _encode(self.scaler_.scale_)},
            "graphs": {
                "K": self.bundle_.K,
                "A": _encode(self.bundle_.A),
                "A_lag": [_encode(a) for a in self.bundle_.A_lag],
                "C": _encode(self.bundle_.C),
            },
            "params": {k: {"shape": list(v.shape), "data": _encode(v.data)} for k, v in sorted(self.params_.items())},
        }
        with open(path, "w") as fh:
            json.dump(doc, fh, indent=1, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            doc = json.load(fh)
        if doc.get("format") != "castnet-checkpoint/1":
            raise ContractError(f"{path}: not a castnet checkpoint")
        est = cls.from_config(ModelConfig(**doc["config"]))
        n = doc["n_nodes"]
        g = doc["graphs"]
        est.bundle_ = GraphBundle(A=_decode(g["A"], (n, n)), A_lag=[_decode(a, (n, n)) for a in g["A_lag"]],
                                  C=_decode(g["C"], (n, n)), K=g["K"])
        est.scaler_ = NodeScaler()
        est.scaler_.mean_ = _decode(doc["scaler"]["mean"], (n,))
        est.scaler_.scale_ = _decode(doc["scaler"]["scale"], (n,))
        est.scaler_.n_features_in_ = n
        est.params_ = {k: dc.Tensor(_decode(v["data"], tuple(v["shape"])), requires_grad=True)
                       for k, v in doc["params"].items()}
        est.n_nodes_ = n
        est.history_ = doc["history"]
        est.best_epoch_ = doc["best_epoch"]
        return est


def ablation_forecaster(variant, **kw):
    """Forecaster restricted to the graph subset of ablation ``variant`` (1..6)."""
    if variant not in ABLATION_VARIANTS:
        raise ConfigError(f"ablation variant must be one of {sorted(ABLATION_VARIANTS)}")
    return CastMGCNForecaster(graph_subset=ABLATION_VARIANTS[variant], **kw)

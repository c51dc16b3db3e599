"""Command-line driver: each pipeline stage as a subcommand, plus ``pipeline``.

All artifacts live under ``--out``. Every command writes the resolved
configuration next to its outputs and refreshes ``manifest.json`` with the
SHA-256 of every artifact in the directory.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import time
import warnings
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np
import yaml

from . import conformal as cp
from . import dataio
from .dynotears import CausalGraphSet, Dynotears, edge_f1
from .exceptions import CastnetError, ConfigError, MissingArtifactError
from .graphops import GraphBundle, graph_stats, write_stats_csv
from .metrics import EvalReport, coverage_efficiency
from .model import CastMGCNForecaster, ModelConfig

log = logging.getLogger("castnet")

SERIES = "series.csv"
TRUTH = "truth_graphs.txt"
ADJACENCY = "adjacency.txt"
SPEC = "synthetic_spec.json"
GRAPHS = "learned_graphs.txt"
STATS = "graph_stats.csv"
DISCOVERY = "discovery.json"
CHECKPOINT = "model.json"
HISTORY = "training_history.csv"
PREDICTIONS = {"val": "predictions_val.csv", "test": "predictions_test.csv"}
REGIONS = {"scp": "regions_scp.csv", "bonferroni": "regions_bonferroni.csv", "cpst": "regions_cpst.csv"}
POINT_METRICS = "metrics_point.csv"
INTERVAL_METRICS = "metrics_intervals.csv"
NODE_COVERAGE = "coverage_nodes.csv"
REPORT_TEXT = "report.txt"
RESOLVED = "config.resolved.yaml"
MANIFEST = "manifest.json"

# which command produces each artifact, for missing-prerequisite errors
PRODUCER = {SERIES: "generate", ADJACENCY: "generate", GRAPHS: "discover", CHECKPOINT: "train",
            PREDICTIONS["val"]: "predict", PREDICTIONS["test"]: "predict",
            REGIONS["scp"]: "conformal", REGIONS["bonferroni"]: "conformal", REGIONS["cpst"]: "conformal",
            POINT_METRICS: "evaluate", INTERVAL_METRICS: "evaluate"}


# ---------------------------------------------------------------- config

def _section_defaults():
    spec = asdict(dataio.SyntheticSpec())
    model = ModelConfig().to_dict()
    return {
        "seed": 7,
        "alpha": 0.1,
        "out": "castnet_out",
        "data": spec,
        "split": [0.6, 0.2, 0.2],
        "discovery": {"lag": 1, "lambda_c": 0.05, "lambda_a": 0.05, "threshold": 0.3, "standardize": False,
                      "h_tol": 1e-8, "rho_max": 1e16, "max_outer": 100, "max_steps": None},
        "model": model,
        "conformal": {"eta": 0.95, "zeta": 0.05, "beta": 0.9, "c_adj": 0.0, "n_calib": None},
        "report": {"nodes": [0, 1, 2], "step": 1, "points": 288},
    }


def _merge(base, update, where="config"):
    for key, value in update.items():
        if key not in base:
            raise ConfigError(f"unknown key {where}.{key}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{where}.{key} must be a mapping")
            _merge(base[key], value, f"{where}.{key}")
        else:
            base[key] = value
    return base


def _env_overrides(environ):
    """``CASTNET_ALPHA=0.05`` or ``CASTNET_MODEL__EPOCHS=5`` style overrides."""
    out = {}
    for name, raw in sorted(environ.items()):
        if not name.startswith("CASTNET_"):
            continue
        path = name[len("CASTNET_"):].lower().split("__")
        node = out
        for part in path[:-1]:
            node = node.setdefault(part, {})
        node[path[-1]] = yaml.safe_load(raw)
    return out


def resolve_config(config_path=None, seed=None, alpha=None, paper_scale=False, out=None, environ=None):
    """Defaults, then the config file, then environment, then flags."""
    cfg = _section_defaults()
    explicit_seeds = set()
    if config_path is not None:
        with open(config_path) as fh:
            loaded = yaml.safe_load(fh) or {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"{config_path}: top level must be a mapping")
        explicit_seeds = {s for s in ("data", "model") if "seed" in (loaded.get(s) or {})}
        _merge(cfg, loaded)
    env = _env_overrides(os.environ if environ is None else environ)
    explicit_seeds |= {s for s in ("data", "model") if "seed" in (env.get(s) or {})}
    _merge(cfg, env, "CASTNET")
    if paper_scale:
        keep = {k: cfg["model"][k] for k in ("seed", "graph_subset", "fusion")}
        cfg["model"] = ModelConfig.paper_scale(**keep).to_dict()
    if seed is not None:
        cfg["seed"] = seed
        explicit_seeds = set()
    if alpha is not None:
        cfg["alpha"] = alpha
    if out is not None:
        cfg["out"] = str(out)
    for section in ("data", "model"):
        if section not in explicit_seeds:
            cfg[section]["seed"] = cfg["seed"]
    _validate(cfg)
    return cfg


def _validate(cfg):
    if not 0.0 < float(cfg["alpha"]) < 1.0:
        raise ConfigError("alpha must lie in (0, 1)")
    dataio.SyntheticSpec(**cfg["data"]).validate()
    ModelConfig(**cfg["model"])
    c = cfg["conformal"]
    if not np.isclose(c["eta"] + c["zeta"], 1.0):
        raise ConfigError("conformal.eta + conformal.zeta must equal 1")


# ---------------------------------------------------------------- helpers

class Run:
    """Output directory bookkeeping shared by the commands."""

    def __init__(self, cfg, force=False):
        self.cfg = cfg
        self.out = Path(cfg["out"])
        self.force = force
        self.written = []

    def path(self, name):
        return self.out / name

    def need(self, *names):
        for name in names:
            if not self.path(name).exists():
                producer = PRODUCER.get(name, "an earlier stage")
                raise MissingArtifactError(f"{self.path(name)} not found; run `castnet {producer}` first")

    def wrote(self, *names):
        for name in names:
            p = self.path(name)
            if not p.exists() or p.stat().st_size == 0:
                raise CastnetError(f"declared output {p} was not written")
        self.written.extend(names)

    def finish(self):
        self.out.mkdir(parents=True, exist_ok=True)
        with open(self.path(RESOLVED), "w") as fh:
            yaml.safe_dump(self.cfg, fh, sort_keys=True)
        hashes = {}
        for p in sorted(self.out.iterdir()):
            if p.is_file() and p.name != MANIFEST:
                hashes[p.name] = hashlib.sha256(p.read_bytes()).hexdigest()
        with open(self.path(MANIFEST), "w") as fh:
            json.dump({"artifacts": hashes}, fh, indent=2, sort_keys=True)
            fh.write("\n")


def _load_series(run):
    run.need(SERIES)
    table, _ = dataio.load_csv(run.path(SERIES))
    return table


def _splits(run, table):
    m = run.cfg["model"]
    return dataio.split(table, run.cfg["split"], min_length=m["history"] + m["head_widths"][-1])


def _write_predictions(path, batch: dataio.WindowBatch, yhat, node_ids):
    T, N, H = yhat.shape
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["timestamp", "node", "step", "yhat", "y"])
        for t in range(T):
            ts = str(batch.timestamps[t])
            for i in range(N):
                for h in range(H):
                    w.writerow([ts, node_ids[i], h + 1, f"{yhat[t, i, h]:.6f}", f"{batch.y[t, i, h]:.6f}"])


def _read_long(path, columns):
    """Read a (timestamp, node, step, ...) long table back into (T, N, H) arrays."""
    with open(path) as fh:
        first = fh.readline()
        if not first.startswith("#"):
            fh.seek(0)
        rows = list(csv.DictReader(fh))
    stamps = list(dict.fromkeys(r["timestamp"] for r in rows))
    nodes = list(dict.fromkeys(r["node"] for r in rows))
    H = max(int(r["step"]) for r in rows)
    out = {c: np.array([float(r[c]) for r in rows]).reshape(len(stamps), len(nodes), H) for c in columns}
    return stamps, nodes, out


# ---------------------------------------------------------------- commands

def cmd_generate(run: Run):
    existing = [n for n in (SERIES, TRUTH, ADJACENCY) if run.path(n).exists()]
    if existing and not run.force:
        raise CastnetError(f"{run.out} already holds {', '.join(existing)}; pass --force to overwrite")
    run.out.mkdir(parents=True, exist_ok=True)
    spec = dataio.SyntheticSpec(**run.cfg["data"])
    table, truth, adjacency = dataio.generate_svar(spec)
    dataio.save_csv(table, run.path(SERIES))
    truth.save(run.path(TRUTH))
    dataio.save_edge_list(adjacency, run.path(ADJACENCY))
    dataio.save_spec(spec, run.path(SPEC))
    run.wrote(SERIES, TRUTH, ADJACENCY, SPEC)
    print(f"generated {table.n_steps} steps x {table.n_nodes} nodes into {run.out}")


def cmd_discover(run: Run):
    table = _load_series(run)
    train, _, _ = _splits(run, table)
    d = run.cfg["discovery"]
    est = Dynotears(**d).fit(train.values)
    g = est.graphs_
    g.save(run.path(GRAPHS))
    rows = []
    if run.path(ADJACENCY).exists():
        A = dataio.load_edge_list(run.path(ADJACENCY), table.n_nodes)
        rows.append(("Adjacency", graph_stats(A, directed=False)))
    rows.append(("Intra-slice", graph_stats(g.C, directed=True)))
    for k, A_k in enumerate(g.A_lag, start=1):
        rows.append((f"Inter-slice lag {k}", graph_stats(A_k, directed=True)))
    write_stats_csv(rows, run.path(STATS))
    intra, inter = g.n_edges()
    summary = {"intra_edges": intra, "inter_edges": inter, "h": est.h_, "outer_iterations": est.n_outer_}
    if run.path(TRUTH).exists():
        truth = CausalGraphSet.load(run.path(TRUTH))
        summary["f1_intra"] = edge_f1(truth.C, g.C)
        summary["f1_inter"] = float(np.mean([edge_f1(t, e) for t, e in zip(truth.A_lag, g.A_lag)]))
    with open(run.path(DISCOVERY), "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    run.wrote(GRAPHS, STATS, DISCOVERY)
    msg = f"discovered {intra} intra-slice and {inter} inter-slice edges"
    if "f1_intra" in summary:
        msg += f" (F1 intra {summary['f1_intra']:.3f}, inter {summary['f1_inter']:.3f})"
    print(msg)


def _bundle(run, n_nodes):
    run.need(ADJACENCY, GRAPHS)
    A = dataio.load_edge_list(run.path(ADJACENCY), n_nodes)
    g = CausalGraphSet.load(run.path(GRAPHS))
    return GraphBundle(A=A, A_lag=list(g.A_lag), C=g.C, K=run.cfg["model"]["K"])


def cmd_train(run: Run):
    table = _load_series(run)
    train, val, _ = _splits(run, table)
    bundle = _bundle(run, table.n_nodes)
    est = CastMGCNForecaster.from_config(ModelConfig(**run.cfg["model"]))
    t0 = time.perf_counter()
    est.fit(train, bundle, val)
    est.save(run.path(CHECKPOINT))
    with open(run.path(HISTORY), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_mae", "val_mae"])
        for r in est.history_:
            w.writerow([r["epoch"], f"{r['train_mae']:.6f}", f"{r['val_mae']:.6f}"])
    run.wrote(CHECKPOINT, HISTORY)
    h = est.history_
    print(f"trained {len(h) - 1} epochs in {time.perf_counter() - t0:.1f}s; "
          f"train MAE {h[0]['train_mae']:.4f} -> {h[-1]['train_mae']:.4f}, best epoch {est.best_epoch_}")


def cmd_predict(run: Run):
    table = _load_series(run)
    run.need(CHECKPOINT)
    est = CastMGCNForecaster.load(run.path(CHECKPOINT))
    _, val, test = _splits(run, table)
    for name, part in (("val", val), ("test", test)):
        batch = dataio.make_windows(part, est.history, est.horizon)
        _write_predictions(run.path(PREDICTIONS[name]), batch, est.predict(batch), table.node_ids)
    run.wrote(*PREDICTIONS.values())
    print(f"wrote forecasts for validation and test windows to {run.out}")


def cmd_conformal(run: Run):
    run.need(PREDICTIONS["val"], PREDICTIONS["test"], ADJACENCY)
    alpha = float(run.cfg["alpha"])
    _, nodes, cal = _read_long(run.path(PREDICTIONS["val"]), ("yhat", "y"))
    stamps, _, tst = _read_long(run.path(PREDICTIONS["test"]), ("yhat", "y"))
    A = dataio.load_edge_list(run.path(ADJACENCY), len(nodes))
    yhat, y = tst["yhat"], tst["y"]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        scp = cp.SplitConformal(alpha=alpha).fit(cal["y"], cal["yhat"])
        bon = cp.SplitConformal(alpha=alpha, bonferroni=True).fit(cal["y"], cal["yhat"])
    c = run.cfg["conformal"]
    cpst = cp.CPST(alpha=alpha, eta=c["eta"], zeta=c["zeta"], beta=c["beta"], c_adj=c["c_adj"],
                   n_calib=c["n_calib"]).fit(cal["y"], cal["yhat"], A)
    regions = {"scp": scp.predict(yhat), "bonferroni": bon.predict(yhat), "cpst": cpst.stream(y, yhat)}
    for method, (lo, hi) in regions.items():
        cp.write_regions_csv(run.path(REGIONS[method]), stamps, nodes, yhat, lo, hi, y, alpha, method)
    run.wrote(*REGIONS.values())
    parts = []
    for method, (lo, hi) in regions.items():
        q = coverage_efficiency(lo, hi, y)
        parts.append(f"{method} coverage {q.coverage.mean():.3f} width {q.efficiency.mean():.3f}")
    print("; ".join(parts))


def cmd_evaluate(run: Run):
    run.need(PREDICTIONS["test"], *REGIONS.values())
    _, nodes, tst = _read_long(run.path(PREDICTIONS["test"]), ("yhat", "y"))
    report = EvalReport.from_forecasts(tst["y"], tst["yhat"])
    per_node = []
    for method, name in REGIONS.items():
        _, _, reg = _read_long(run.path(name), ("L", "U", "y"))
        report.add_intervals(method, reg["L"], reg["U"], reg["y"])
        q = report.intervals[method]
        per_node.extend((method, nodes[i], q.coverage[i], q.efficiency[i]) for i in range(len(nodes)))
    report.write_csv(run.path(POINT_METRICS), run.path(INTERVAL_METRICS))
    with open(run.path(NODE_COVERAGE), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "node", "coverage", "efficiency"])
        w.writerows([m, n, f"{c:.6f}", f"{e:.6f}"] for m, n, c, e in per_node)
    run.path(REPORT_TEXT).write_text(report.to_text())
    run.wrote(POINT_METRICS, INTERVAL_METRICS, NODE_COVERAGE, REPORT_TEXT)
    print(report.to_text(), end="")


def cmd_report(run: Run):
    run.need(POINT_METRICS, INTERVAL_METRICS, REGIONS["cpst"])
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "castnet"
    rep = run.cfg["report"]
    stamps, nodes, reg = _read_long(run.path(REGIONS["cpst"]), ("yhat", "L", "U", "y"))
    step = int(rep["step"]) - 1
    span = slice(0, min(int(rep["points"]), len(stamps)))
    x = np.arange(len(stamps))[span]
    names = []
    for i in rep["nodes"]:
        if i >= len(nodes):
            continue
        fig, ax = plt.subplots(figsize=(8, 3))
        ax.fill_between(x, reg["L"][span, i, step], reg["U"][span, i, step], color="tab:blue", alpha=0.25,
                        label="CPST region")
        ax.plot(x, reg["y"][span, i, step], color="black", lw=1, label="truth")
        ax.plot(x, reg["yhat"][span, i, step], color="tab:red", lw=1, label="forecast")
        ax.set_xlabel(f"test window (step {step + 1} ahead)")
        ax.set_ylabel(nodes[i])
        ax.legend(loc="upper right", fontsize=8)
        fig.tight_layout()
        name = f"forecast_{nodes[i]}.svg"
        fig.savefig(run.path(name), format="svg", metadata={"Date": None})
        plt.close(fig)
        names.append(name)
    # one combined table of everything evaluate produced
    with open(run.path("report_tables.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for src in (POINT_METRICS, INTERVAL_METRICS):
            with open(run.path(src)) as sf:
                rows = list(csv.reader(sf))
            w.writerow([f"# {src}"])
            w.writerows(rows)
    run.wrote(*names, "report_tables.csv")
    print(f"wrote {len(names)} plots and report_tables.csv")


def cmd_pipeline(run: Run):
    if run.out.exists() and any(run.out.iterdir()) and not run.force:
        raise CastnetError(f"{run.out} is not empty; pass --force to overwrite")
    run.force = True
    t0 = time.perf_counter()
    for name, fn in STAGES[:-1]:
        t = time.perf_counter()
        fn(run)
        print(f"[{name}] {time.perf_counter() - t:.1f}s")
    print(f"pipeline finished in {time.perf_counter() - t0:.1f}s")


STAGES = [("generate", cmd_generate), ("discover", cmd_discover), ("train", cmd_train),
          ("predict", cmd_predict), ("conformal", cmd_conformal), ("evaluate", cmd_evaluate),
          ("report", cmd_report), ("pipeline", cmd_pipeline)]


def build_parser():
    p = argparse.ArgumentParser(prog="castnet", description="Causal multi-graph forecasting with conformal regions.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML config file")
    common.add_argument("--seed", type=int, help="master seed for data and model")
    common.add_argument("--alpha", type=float, help="miscoverage level of the regions")
    common.add_argument("--paper-scale", action="store_true", help="use the full-size model widths")
    common.add_argument("--force", action="store_true", help="overwrite existing outputs")
    common.add_argument("--out", type=Path, help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name, _ in STAGES:
        sub.add_parser(name, parents=[common])
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = resolve_config(args.config, args.seed, args.alpha, args.paper_scale, args.out)
        run = Run(cfg, force=args.force)
        dict(STAGES)[args.command](run)
        run.finish()
    except MissingArtifactError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except CastnetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

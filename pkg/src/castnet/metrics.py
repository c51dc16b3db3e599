"""Point-forecast errors and interval quality."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .exceptions import ContractError

MAPE_EPS = 1e-6
REPORT_STEPS = (3, 6, 12)


@dataclass
class PointErrors:
    mae: float
    rmse: float
    mape: float  # percent; nan when every entry was guarded
    guarded: int = 0
    mape_defined: bool = True


def _pair(y, yhat):
    y = np.asarray(y, dtype=np.float64)
    yhat = np.asarray(yhat, dtype=np.float64)
    if y.shape != yhat.shape:
        raise ContractError(f"truth {y.shape} and forecast {yhat.shape} differ in shape")
    if y.size == 0:
        raise ContractError("no entries to score")
    return y, yhat


def mae_rmse_mape(y, yhat, mask_zero=True, eps=MAPE_EPS):
    """MAE, RMSE and MAPE (percent) averaged over every entry.

    With ``mask_zero`` the MAPE skips entries with ``|y| < eps`` and reports
    how many were skipped; if all are skipped the MAPE is undefined (nan).
    """
    y, yhat = _pair(y, yhat)
    err = yhat - y
    mae = float(np.mean(np.abs(err)))
    rmse = float(np.sqrt(np.mean(err ** 2)))
    keep = np.abs(y) >= eps if mask_zero else np.ones(y.shape, dtype=bool)
    guarded = int(y.size - keep.sum())
    if not keep.any():
        return PointErrors(mae, rmse, float("nan"), guarded, False)
    mape = float(np.mean(np.abs(err[keep] / y[keep])) * 100.0)
    return PointErrors(mae, rmse, mape, guarded, True)


@dataclass
class IntervalQuality:
    coverage: np.ndarray  # per node
    efficiency: np.ndarray  # per node mean width

    def summary(self):
        out = {}
        for name, v in (("coverage", self.coverage), ("efficiency", self.efficiency)):
            out[name] = {"mean": float(v.mean()), "std": float(v.std()), "max": float(v.max()), "min": float(v.min())}
        return out


def coverage_efficiency(lower, upper, y, node_axis=1):
    """Per-node share of truths inside ``[L, U]`` and mean width ``U - L``.

    Arrays share a shape; every axis but ``node_axis`` is averaged over.
    """
    lower, upper, y = (np.asarray(a, dtype=np.float64) for a in (lower, upper, y))
    if not (lower.shape == upper.shape == y.shape):
        raise ContractError("regions and truths must share a shape")
    if np.any(lower > upper):
        raise ContractError("region lower bounds exceed upper bounds")
    inside = ((lower <= y) & (y <= upper)).astype(np.float64)
    if y.ndim == 1:
        return IntervalQuality(np.atleast_1d(inside.mean()), np.atleast_1d((upper - lower).mean()))
    axes = tuple(a for a in range(y.ndim) if a != node_axis % y.ndim)
    return IntervalQuality(inside.mean(axis=axes), (upper - lower).mean(axis=axes))


@dataclass
class EvalReport:
    """Errors per reported horizon step plus the all-step average."""

    rows: dict = field(default_factory=dict)  # label -> PointErrors
    intervals: dict = field(default_factory=dict)  # method -> IntervalQuality

    @classmethod
    def from_forecasts(cls, y, yhat, steps=REPORT_STEPS, mask_zero=True):
        """``y`` and ``yhat`` are (B, N, H); steps are 1-based horizon indices."""
        y, yhat = _pair(y, yhat)
        H = y.shape[-1]
        rows = {}
        for s in steps:
            if 1 <= s <= H:
                rows[f"step {s}"] = mae_rmse_mape(y[..., s - 1], yhat[..., s - 1], mask_zero)
        rows["average"] = mae_rmse_mape(y, yhat, mask_zero)
        return cls(rows=rows)

    def add_intervals(self, method, lower, upper, y):
        self.intervals[method] = coverage_efficiency(lower, upper, y)
        return self

    def point_table(self):
        header = ["horizon", "MAE", "RMSE", "MAPE(%)", "MAPE guarded"]
        body = [[k, _num(v.mae), _num(v.rmse), _num(v.mape), v.guarded] for k, v in self.rows.items()]
        return header, body

    def interval_table(self):
        header = ["method", "statistic", "coverage", "efficiency"]
        body = []
        for method, q in self.intervals.items():
            s = q.summary()
            for stat in ("mean", "std", "max", "min"):
                body.append([method, stat, _num(s["coverage"][stat]), _num(s["efficiency"][stat])])
        return header, body

    def write_csv(self, point_path, interval_path=None):
        for path, (header, body) in ((point_path, self.point_table()),
                                     (interval_path, self.interval_table() if interval_path else None)):
            if path is None:
                continue
            with open(path, "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(header)
                w.writerows(body)

    def to_text(self):
        parts = [_format(*self.point_table())]
        if self.intervals:
            parts.append(_format(*self.interval_table()))
        return "\n\n".join(parts) + "\n"


def _num(v):
    return "nan" if isinstance(v, float) and math.isnan(v) else f"{v:.6f}"


def _format(header, body):
    cells = [list(map(str, header))] + [list(map(str, r)) for r in body]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    lines = ["  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)

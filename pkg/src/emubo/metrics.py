"""Regret metrics, cross-seed aggregation and fidelity allocation."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import t as student_t

from .multiobjective import log_hv_difference
from .problems import Problem

REGRET_FLOOR = 1e-8
OPTIMUM_TOL = 1e-9


class MetricError(ValueError):
    pass


def _last_rows(rec) -> np.ndarray:
    """Index of the last row of each iteration (iteration 0 is the initial design)."""
    it = rec.iterations
    if it.size == 0:
        raise MetricError("empty record")
    return np.flatnonzero(np.r_[it[1:] != it[:-1], True])


def _check_optimum(best: np.ndarray, f_star: float) -> None:
    if np.nanmax(best) > f_star + OPTIMUM_TOL * max(1.0, abs(f_star)):
        raise MetricError(f"observed noiseless value {np.nanmax(best):.6g} exceeds f* = {f_star:.6g}; "
                          "the optimum estimate is inconsistent")


def simple_regret(rec, f_star: float) -> np.ndarray:
    """``f* - max noiseless value so far``, one entry per iteration."""
    best = np.maximum.accumulate(rec.noiseless[:, 0])
    _check_optimum(best, f_star)
    return (f_star - best)[_last_rows(rec)]


def log_simple_regret(rec, f_star: float) -> np.ndarray:
    """Log simple regret with the argument floored at ``1e-8``."""
    return np.log(np.maximum(simple_regret(rec, f_star), REGRET_FLOOR))


def per_step_simple_regret(rec, f_star: float) -> np.ndarray:
    """``f* - f(x)`` at the point with the best noisy observation so far (not monotone)."""
    y = rec.values[:, 0]
    f = rec.noiseless[:, 0]
    _check_optimum(f, f_star)
    best_idx = np.zeros(len(y), dtype=int)
    b = 0
    for i in range(len(y)):
        if y[i] > y[b]:
            b = i
        best_idx[i] = b
    return (f_star - f[best_idx])[_last_rows(rec)]


def inference_regret(rec, problem: Problem, f_star: float) -> np.ndarray:
    """``f* - f(x_hat)`` with ``x_hat`` the recorded posterior-mean maximizer per iteration."""
    last = _last_rows(rec)
    pts = [rec.rows[i].incumbent_mean_point for i in last]
    if any(p is None for p in pts):
        raise MetricError(f"{rec.method} has no posterior-mean points recorded "
                          "(model-free method, or output.inference disabled)")
    if problem.is_tabular:
        vals = problem.table.scores[np.asarray(pts, dtype=int)]
    else:
        vals = problem.noiseless(problem.at_target_fidelity(np.array(pts, dtype=float)))[:, 0]
    return f_star - vals


def log_hv_regret(rec, hv_star: float, ref: np.ndarray) -> np.ndarray:
    """Log hypervolume difference of the noiseless observed front, per iteration."""
    series, _ = log_hv_difference(rec.noiseless, hv_star, ref)
    return np.asarray(series)[_last_rows(rec)]


# --- aggregation --------------------------------------------------------------------

@dataclass(frozen=True)
class Summary:
    """Per-x mean with a two-sided 95% t interval across seeds."""

    x: np.ndarray
    mean: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    n: int
    x_label: str = "iteration"

    @property
    def half_width(self) -> np.ndarray:
        return self.upper - self.mean


def t_multiplier(n: int, level: float = 0.95) -> float:
    return float(student_t.ppf(0.5 + level / 2, n - 1))


def aggregate(series: list[np.ndarray], x: np.ndarray | None = None,
              x_label: str = "iteration") -> Summary:
    """Mean and ``mean +/- t_{0.975, n-1} * sd / sqrt(n)`` across equal-length series."""
    if len(series) < 2:
        raise MetricError("aggregation needs at least 2 seeds")
    lens = {len(s) for s in series}
    if len(lens) != 1:
        raise MetricError(f"series lengths differ ({sorted(lens)}); align them on a common grid first")
    A = np.vstack([np.asarray(s, dtype=float) for s in series])
    n = A.shape[0]
    m = A.mean(axis=0)
    hw = t_multiplier(n) * A.std(axis=0, ddof=1) / math.sqrt(n)
    xs = np.arange(A.shape[1]) if x is None else np.asarray(x, dtype=float)
    return Summary(xs, m, m - hw, m + hw, n, x_label)


def staircase(cost: np.ndarray, values: np.ndarray, grid: np.ndarray) -> np.ndarray:
    """Previous-value interpolation of ``values`` (at cumulative ``cost``) onto ``grid``.

    Grid points before the first cost get the first value.
    """
    idx = np.searchsorted(cost, grid, side="right") - 1
    return np.asarray(values)[np.clip(idx, 0, len(values) - 1)]


def cost_series(rec, per_row: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Pair a per-iteration series with the cumulative cost at each iteration's end."""
    return rec.cum_cost[_last_rows(rec)], per_row


def aggregate_by_cost(records, series: list[np.ndarray], points: int = 100) -> Summary:
    """Align multi-fidelity runs on a uniform cost grid, then aggregate."""
    pairs = [cost_series(r, s) for r, s in zip(records, series)]
    hi = min(c[-1] for c, _ in pairs)
    lo = max(c[0] for c, _ in pairs)
    grid = np.linspace(lo, hi, points)
    return aggregate([staircase(c, v, grid) for c, v in pairs], grid, "cumulative cost")


# --- fidelity allocation ------------------------------------------------------------

@dataclass(frozen=True)
class FidelityAllocation:
    """Fidelity per query, and per query the running share of queries in each bin."""

    fidelity: np.ndarray
    edges: np.ndarray
    proportions: np.ndarray  # (n_queries, n_bins)


def fidelity_allocation(rec, bins: int | np.ndarray = 4, skip_initial: bool = True) -> FidelityAllocation:
    """Histogram the queried fidelities over ``bins`` equal bins on [0, 1].

    The last bin is closed so fidelity 1 lands in the top bin. Discrete
    fidelities (codes 0 and 1) should use ``bins=2``.
    """
    rows = [r for r in rec.rows if not (skip_initial and r.iteration == 0)]
    if not rows or rows[0].fidelity is None:
        raise MetricError("fidelity allocation needs a multi-fidelity record")
    fid = np.array([r.fidelity for r in rows], dtype=float)
    edges = np.linspace(0, 1, bins + 1) if np.isscalar(bins) else np.asarray(bins, dtype=float)
    k = np.clip(np.searchsorted(edges, fid, side="right") - 1, 0, len(edges) - 2)
    onehot = np.zeros((len(fid), len(edges) - 1))
    onehot[np.arange(len(fid)), k] = 1.0
    props = np.cumsum(onehot, axis=0) / np.arange(1, len(fid) + 1)[:, None]
    return FidelityAllocation(fid, edges, props)

"""Pareto utilities, exact hypervolume for two and three objectives, NSGA-II,
ParEGO scalarization and a Monte Carlo noisy expected hypervolume improvement.

All objectives are maximized.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.linalg import solve_triangular

from .acquisition import sobol_normal
from .gp import GpModel, robust_cholesky
from .spaces import SearchSpace, project_simplex, round_points

HV_FLOOR = 1e-8


class ParetoError(ValueError):
    pass


def dominates(a: np.ndarray, b: np.ndarray) -> bool:
    return bool(np.all(a >= b) and np.any(a > b))


def nondominated(Y: np.ndarray) -> np.ndarray:
    """Sorted indices of rows not dominated by any other row.

    Duplicate rows do not dominate each other, so all copies are kept.
    """
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    n = Y.shape[0]
    if n == 0:
        return np.zeros(0, dtype=int)
    # a dominator has a larger coordinate sum and dominance is transitive,
    # so each point is checked only against the front built so far
    order = np.argsort(-Y.sum(axis=1), kind="stable")
    front: list[int] = []
    F = np.empty((0, Y.shape[1]))
    for i in order:
        y = Y[i]
        if F.shape[0] and np.any(np.all(F >= y, axis=1) & np.any(F > y, axis=1)):
            continue
        if F.shape[0]:
            # guards against sum ties from rounding
            beaten = np.all(y >= F, axis=1) & np.any(y > F, axis=1)
            front = [j for j, b in zip(front, beaten) if not b]
        front.append(i)
        F = Y[front]
    return np.sort(np.array(front, dtype=int))


def _hv2(P: np.ndarray, ref: np.ndarray) -> float:
    P = P[np.argsort(-P[:, 0], kind="stable")]
    vol, best_y = 0.0, ref[1]
    for x, y in P:
        if y > best_y:
            vol += (x - ref[0]) * (y - best_y)
            best_y = y
    return float(vol)


def _hv3(P: np.ndarray, ref: np.ndarray) -> float:
    # Slice along the third objective; each slab is a 2-D problem.
    P = P[np.argsort(-P[:, 2], kind="stable")]
    zs = np.append(P[:, 2], ref[2])
    vol = 0.0
    for i in range(len(P)):
        depth = zs[i] - zs[i + 1]
        if depth > 0:
            vol += depth * _hv2(P[: i + 1, :2], ref[:2])
    return float(vol)


def hypervolume(front: np.ndarray, ref: Sequence[float]) -> float:
    """Exact dominated volume above ``ref`` for two or three objectives."""
    ref = np.asarray(ref, dtype=float)
    P = np.asarray(front, dtype=float).reshape(-1, ref.size)
    if P.shape[0] == 0:
        return 0.0
    if np.any(P <= ref):
        raise ParetoError("every front point must strictly dominate the reference point")
    P = P[nondominated(P)]
    if ref.size == 1:
        return float(P.max() - ref[0])
    if ref.size == 2:
        return _hv2(P, ref)
    if ref.size == 3:
        return _hv3(P, ref)
    raise ParetoError("hypervolume is implemented for at most three objectives")


def hypervolume_clipped(Y: np.ndarray, ref: np.ndarray) -> float:
    """HV of the points that dominate ``ref``; the rest contribute nothing."""
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    keep = np.all(Y > ref, axis=1)
    return hypervolume(Y[keep], ref) if keep.any() else 0.0


def log_hv_difference(Y_noiseless: np.ndarray, hv_star: float, ref: np.ndarray
                      ) -> tuple[np.ndarray, np.ndarray]:
    """Per-prefix ``log(hv_star - HV)`` with the argument floored at ``HV_FLOOR``.

    Returns the series and a boolean mask marking floored entries.
    """
    Y = np.atleast_2d(np.asarray(Y_noiseless, dtype=float))
    out, flags = [], []
    for t in range(1, Y.shape[0] + 1):
        gap = hv_star - hypervolume_clipped(Y[:t], ref)
        flags.append(gap < HV_FLOOR)
        out.append(math.log(max(gap, HV_FLOOR)))
    return np.array(out), np.array(flags, dtype=bool)


# --- NSGA-II ----------------------------------------------------------------

def nondominated_sort(Y: np.ndarray) -> np.ndarray:
    """Front rank per row, 0 for the first front."""
    Y = np.asarray(Y, dtype=float)
    n = Y.shape[0]
    ge = np.all(Y[:, None, :] >= Y[None, :, :], axis=2)
    gt = np.any(Y[:, None, :] > Y[None, :, :], axis=2)
    dom = ge & gt  # dom[i, j]: i dominates j
    count = dom.sum(axis=0)
    rank = np.full(n, -1)
    r = 0
    current = np.flatnonzero(count == 0)
    while current.size:
        rank[current] = r
        count = count - dom[current].sum(axis=0)
        count[rank >= 0] = -1
        current = np.flatnonzero(count == 0)
        r += 1
    return rank


def crowding_distance(Y: np.ndarray) -> np.ndarray:
    """Normalized cuboid perimeter; boundary points get ``inf``."""
    Y = np.asarray(Y, dtype=float)
    n, m = Y.shape
    d = np.zeros(n)
    if n <= 2:
        return np.full(n, np.inf)
    for j in range(m):
        o = np.argsort(Y[:, j], kind="stable")
        span = Y[o[-1], j] - Y[o[0], j]
        d[o[0]] = d[o[-1]] = np.inf
        if span > 0:
            d[o[1:-1]] += (Y[o[2:], j] - Y[o[:-2], j]) / span
    return d


@dataclass
class Population:
    X: np.ndarray
    Y: np.ndarray
    rank: np.ndarray
    crowding: np.ndarray

    @property
    def size(self) -> int:
        return self.X.shape[0]


def _rank_and_crowd(Y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    rank = nondominated_sort(Y)
    crowd = np.zeros(len(Y))
    for r in np.unique(rank):
        idx = np.flatnonzero(rank == r)
        crowd[idx] = crowding_distance(Y[idx])
    return rank, crowd


def make_population(X: np.ndarray, Y: np.ndarray) -> Population:
    rank, crowd = _rank_and_crowd(Y)
    return Population(np.asarray(X, float), np.asarray(Y, float), rank, crowd)


def _better(pop: Population, i: int, j: int) -> int:
    if pop.rank[i] != pop.rank[j]:
        return i if pop.rank[i] < pop.rank[j] else j
    return i if pop.crowding[i] >= pop.crowding[j] else j


def sbx(p1: np.ndarray, p2: np.ndarray, lo: np.ndarray, hi: np.ndarray, eta: float,
        rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Simulated binary crossover per coordinate with probability 0.5, bounded."""
    c1, c2 = p1.copy(), p2.copy()
    for i in range(p1.size):
        if rng.random() > 0.5 or abs(p1[i] - p2[i]) < 1e-14 or hi[i] <= lo[i]:
            continue
        u = rng.random()
        beta = (2 * u) ** (1 / (eta + 1)) if u <= 0.5 else (1 / (2 * (1 - u))) ** (1 / (eta + 1))
        a, b = 0.5 * ((1 + beta) * p1[i] + (1 - beta) * p2[i]), 0.5 * ((1 - beta) * p1[i] + (1 + beta) * p2[i])
        c1[i], c2[i] = np.clip(a, lo[i], hi[i]), np.clip(b, lo[i], hi[i])
    return c1, c2


def polynomial_mutation(x: np.ndarray, lo: np.ndarray, hi: np.ndarray, eta: float, rate: float,
                        rng: np.random.Generator) -> np.ndarray:
    y = x.copy()
    for i in range(x.size):
        if rng.random() >= rate or hi[i] <= lo[i]:
            continue
        u = rng.random()
        span = hi[i] - lo[i]
        if u < 0.5:
            delta = (2 * u) ** (1 / (eta + 1)) - 1
        else:
            delta = 1 - (2 * (1 - u)) ** (1 / (eta + 1))
        y[i] = np.clip(y[i] + delta * span, lo[i], hi[i])
    return y


def repair(space: SearchSpace, X: np.ndarray) -> np.ndarray:
    """Round discrete coordinates and renormalize simplex groups.

    A simplex group that clamps to all zeros is replaced by its Euclidean
    projection, which is always a valid point.
    """
    X = np.array(X, dtype=float, copy=True, ndmin=2)
    for g in space.simplex_groups:
        cols = list(g)
        bad = np.maximum(X[:, cols], 0).sum(axis=1) <= 0
        if bad.any():
            X[np.ix_(bad, cols)] = project_simplex(X[np.ix_(bad, cols)])
    return round_points(space, X)


def nsga2_generation(pop: Population, space: SearchSpace, evaluate: Callable[[np.ndarray], np.ndarray],
                     rng: np.random.Generator, eta_c: float = 15.0, eta_m: float = 20.0
                     ) -> Population:
    """One generation: tournament, SBX, polynomial mutation, repair, elitist truncation."""
    n = pop.size
    lo, hi = space.bounds
    rate = 1.0 / space.dim
    kids = []
    while len(kids) < n:
        a = _better(pop, *rng.integers(n, size=2))
        b = _better(pop, *rng.integers(n, size=2))
        c1, c2 = sbx(pop.X[a], pop.X[b], lo, hi, eta_c, rng)
        kids.append(polynomial_mutation(c1, lo, hi, eta_m, rate, rng))
        kids.append(polynomial_mutation(c2, lo, hi, eta_m, rate, rng))
    K = repair(space, np.array(kids[:n]))
    KY = np.atleast_2d(evaluate(K))
    return environmental_selection(np.vstack([pop.X, K]), np.vstack([pop.Y, KY]), n)


def environmental_selection(X: np.ndarray, Y: np.ndarray, n: int) -> Population:
    rank, crowd = _rank_and_crowd(Y)
    order = np.lexsort((-crowd, rank))
    keep = order[:n]
    return make_population(X[keep], Y[keep])


# --- ParEGO -------------------------------------------------------------------

def parego_scalarize(Y_norm: np.ndarray, weights: Sequence[float], rho: float = 0.05) -> np.ndarray:
    """Augmented Chebyshev: ``max_j w_j y_j + rho * sum_j w_j y_j``."""
    w = np.asarray(weights, dtype=float)
    if np.any(w < -1e-12) or abs(w.sum() - 1.0) > 1e-9:
        raise ParetoError("weights must lie on the simplex")
    Wy = np.atleast_2d(Y_norm) * w
    return Wy.max(axis=1) + rho * Wy.sum(axis=1)


def normalize_objectives(Y: np.ndarray) -> np.ndarray:
    """Running min/max scaling to [0, 1]; constant columns map to 0."""
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    lo, hi = Y.min(axis=0), Y.max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)
    return (Y - lo) / span


# --- NEHVI --------------------------------------------------------------------

def _grid_cells(F: np.ndarray, ref: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Lower and upper corners of grid cells above ``ref`` not dominated by ``F``.

    Cells come from the grid of front coordinates; upper corners may be inf.
    """
    m = ref.size
    axes = [np.concatenate([[ref[j]], np.unique(F[:, j][F[:, j] > ref[j]]), [np.inf]]) for j in range(m)]
    grids = np.meshgrid(*[np.arange(len(a) - 1) for a in axes], indexing="ij")
    idx = np.stack([g.ravel() for g in grids], axis=1)
    lo = np.stack([axes[j][idx[:, j]] for j in range(m)], axis=1)
    hi = np.stack([axes[j][idx[:, j] + 1] for j in range(m)], axis=1)
    if F.shape[0]:
        dom = np.zeros(len(lo), dtype=bool)
        for f in F:
            dom |= np.all(hi <= f, axis=1)
        lo, hi = lo[~dom], hi[~dom]
    return lo, hi


def improvement_cells(F: np.ndarray, ref: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Boxes tiling the region a new point can add to ``HV(F)``."""
    F = F[np.all(F > ref, axis=1)] if F.size else F.reshape(0, ref.size)
    F = F[nondominated(F)] if len(F) else F
    return _grid_cells(F, ref)


def _cells_improvement(P: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    vol = np.ones((P.shape[0], lo.shape[0]))
    for j in range(lo.shape[1]):
        vol *= np.clip(np.minimum(hi[:, j], P[:, j, None]) - lo[:, j], 0.0, None)
    return vol.sum(axis=1)


def hv_improvement(P: np.ndarray, F: np.ndarray, ref: np.ndarray) -> np.ndarray:
    """``HV(F + {p}) - HV(F)`` for every row ``p`` of ``P``."""
    return _cells_improvement(np.atleast_2d(P), *improvement_cells(F, ref))


class NEHVI:
    """Noisy expected HV improvement by QMC over joint draws at observed and query points.

    Objectives are modeled by independent GPs. Each draw forms the Pareto front
    of the observed points under that draw; the query's value is the mean
    HV improvement over draws. Observed points that are never on a draw's
    front are pruned before queries are scored.
    """

    def __init__(self, gps: Sequence[GpModel], X_obs: np.ndarray | None, ref: np.ndarray,
                 mc_samples: int = 128, seed: int | None = 0):
        self.gps = list(gps)
        self.ref = np.asarray(ref, dtype=float)
        m = len(self.gps)
        self.m = m
        n = 0 if X_obs is None else len(X_obs)
        base = sobol_normal(mc_samples, m * (n + 1), seed).reshape(mc_samples, m, n + 1)
        self.zx = base[:, :, -1]
        self.cond = []
        fronts_draws = np.zeros((mc_samples, n, m))
        for j, g in enumerate(self.gps):
            if n == 0:
                self.cond.append(None)
                continue
            mu, S = g.posterior(X_obs)
            L, _ = robust_cholesky(S + 1e-10 * max(g.signal_var, 1e-12) * np.eye(n), jitter=1e-8)
            fronts_draws[:, :, j] = mu + base[:, j, :n] @ L.T
            self.cond.append((X_obs, L, base[:, j, :n]))
        self.fronts, self.cells = [], []
        for s in range(mc_samples):
            F = fronts_draws[s]
            self.fronts.append(F[nondominated(F)] if n else F)
            self.cells.append(improvement_cells(self.fronts[-1], self.ref))
        self.mc = mc_samples

    def _query_draws(self, X: np.ndarray) -> np.ndarray:
        out = np.empty((self.mc, X.shape[0], self.m))
        for j, g in enumerate(self.gps):
            mu, var = g.mean_var(X)
            if self.cond[j] is None:
                out[:, :, j] = mu + np.sqrt(var) * self.zx[:, j][:, None]
                continue
            Xo, L, zb = self.cond[j]
            C = g.cross_cov(Xo, X)
            A = solve_triangular(L, C, lower=True, check_finite=False)
            cvar = np.maximum(var - (A * A).sum(0), 0.0)
            out[:, :, j] = mu + zb @ A + np.sqrt(cvar) * self.zx[:, j][:, None]
        return out

    def __call__(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(X)
        D = self._query_draws(X)
        tot = np.zeros(X.shape[0])
        for s in range(self.mc):
            tot += _cells_improvement(D[s], *self.cells[s])
        return tot / self.mc


def nehvi_mc(gps: Sequence[GpModel], X_obs: np.ndarray | None, ref: np.ndarray, x: np.ndarray,
             mc_samples: int = 128, seed: int | None = 0) -> float:
    return float(NEHVI(gps, X_obs, ref, mc_samples, seed)(np.atleast_2d(x))[0])


def export_front(path: str | Path, Y: np.ndarray, names: Sequence[str] | None = None,
                 ids: Sequence[int] | None = None) -> None:
    """CSV with one row per nondominated observation."""
    Y = np.atleast_2d(Y)
    idx = nondominated(Y)
    names = list(names) if names else [f"objective_{j}" for j in range(Y.shape[1])]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["observation"] + names)
        for i in idx:
            w.writerow([int(ids[i]) if ids is not None else int(i)] + [repr(float(v)) for v in Y[i]])


def random_simplex_weight(m: int, rng: np.random.Generator) -> np.ndarray:
    return rng.dirichlet(np.ones(m))


"""Acquisition maximization over mixed, simplex-constrained, and tabular spaces."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .gp import GpModel, condition_on_fantasy
from .spaces import CATEGORICAL, SearchSpace, project_simplex, round_points, uniform_sample

_ETAS = np.array([0.3, 0.1, 0.03, 0.01, 3e-3, 1e-3, 3e-4])


@dataclass(frozen=True)
class AcqOptConfig:
    """Multi-start optimizer settings.

    Attributes:
        restarts: Number of local searches started from the best raw samples.
        raw_samples: Uniform (Dirichlet on simplex groups) seed pool size.
        cont_iters: Finite-difference ascent iterations per continuous phase.
        discrete_passes: 1-swap neighborhood passes per discrete phase.
        alternations: Continuous/discrete phase rounds.
        fd_step: Central-difference step on unit-normalized coordinates.
        relax_threshold: Integers with more codes than this are relaxed.
        candidate_pool: Finite set to scan instead of optimizing.
    """

    restarts: int = 4
    raw_samples: int = 512
    cont_iters: int = 30
    discrete_passes: int = 3
    alternations: int = 2
    fd_step: float = 1e-3
    relax_threshold: int = 10
    candidate_pool: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self) -> None:
        if self.restarts < 1:
            raise ValueError("restarts must be >= 1")


def _safe(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    return np.where(np.isfinite(v), v, -np.inf)


def pool_argmax(acq: Callable, pool: np.ndarray, exclude: np.ndarray | None = None,
                chunk: int = 4096) -> tuple[int, float]:
    """Index and value of the best pool row; ties go to the lowest index."""
    vals = np.concatenate([_safe(acq(pool[s:s + chunk])) for s in range(0, len(pool), chunk)])
    if exclude is not None:
        vals = np.where(exclude, -np.inf, vals)
        if np.all(exclude):
            raise ValueError("every pool candidate is excluded")
    i = int(np.argmax(vals))
    return i, float(vals[i])


class _Layout:
    def __init__(self, space: SearchSpace, relax_threshold: int):
        self.space = space
        lo, hi = space.bounds
        self.lo, self.hi = lo, hi
        self.rng_width = np.where(hi > lo, hi - lo, 1.0)
        in_group = set(space.simplex_inds)
        self.cont, self.disc = [], []
        for i, p in enumerate(space.params):
            if i in in_group:
                self.cont.append(i)
            elif p.kind == CATEGORICAL:
                self.disc.append(i)
            elif p.kind == "integer" and p.cardinality <= relax_threshold:
                self.disc.append(i)
            else:
                self.cont.append(i)
        self.relaxed = [i for i in self.cont if space.params[i].kind == "integer"]
        self.groups = [list(g) for g in space.simplex_groups]

    def project(self, X: np.ndarray) -> np.ndarray:
        X = np.clip(X, self.lo, self.hi)
        for g in self.groups:
            X[:, g] = project_simplex(X[:, g])
        return X


def _continuous_phase(acq, X, fX, lay: _Layout, cfg: AcqOptConfig):
    dims = lay.cont
    if not dims:
        return X, fX
    R, nd = X.shape[0], len(dims)
    active = np.ones(R, dtype=bool)
    col_of = {d: j for j, d in enumerate(dims)}
    for _ in range(cfg.cont_iters):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        Xa = X[idx]
        h = cfg.fd_step * lay.rng_width[dims]
        P = np.repeat(Xa, 2 * nd, axis=0).reshape(len(idx), 2 * nd, -1)
        for j, d in enumerate(dims):
            P[:, 2 * j, d] += h[j]
            P[:, 2 * j + 1, d] -= h[j]
        P[..., dims] = np.clip(P[..., dims], lay.lo[dims], lay.hi[dims])
        v = _safe(acq(P.reshape(-1, X.shape[1]))).reshape(len(idx), 2 * nd)
        dx = P[:, 0::2, dims][:, np.arange(nd), np.arange(nd)] - P[:, 1::2, dims][:, np.arange(nd), np.arange(nd)]
        with np.errstate(invalid="ignore"):
            g = (v[:, 0::2] - v[:, 1::2]) / np.where(dx > 0, dx, 1.0)
        g = np.where(np.isfinite(g), g, 0.0)
        gu = g * lay.rng_width[dims]
        for grp in lay.groups:
            cols = [col_of[d] for d in grp]
            gu[:, cols] -= gu[:, cols].mean(axis=1, keepdims=True)
        norm = np.linalg.norm(gu, axis=1)
        moving = norm > 0
        dirn = np.where(moving[:, None], gu / np.where(moving, norm, 1.0)[:, None], 0.0)
        C = np.repeat(Xa, len(_ETAS), axis=0).reshape(len(idx), len(_ETAS), -1)
        C[..., dims] += _ETAS[None, :, None] * dirn[:, None, :] * lay.rng_width[dims]
        C = lay.project(C.reshape(-1, X.shape[1])).reshape(C.shape)
        vc = _safe(acq(C.reshape(-1, X.shape[1]))).reshape(len(idx), len(_ETAS))
        b = np.argmax(vc, axis=1)
        vb = vc[np.arange(len(idx)), b]
        improve = (vb > fX[idx]) & moving
        X[idx[improve]] = C[improve, b[improve]]
        fX[idx[improve]] = vb[improve]
        active[idx[~improve]] = False
    if lay.relaxed:
        Xr = round_points(lay.space, X)
        fr = _safe(acq(Xr))
        X, fX = Xr, fr
    return X, fX


def _neighbors(x: np.ndarray, lay: _Layout) -> np.ndarray:
    out = []
    for d in lay.disc:
        p = lay.space.params[d]
        for c in range(int(p.lower), int(p.upper) + 1):
            if c != x[d]:
                y = x.copy()
                y[d] = c
                out.append(y)
    for d in lay.relaxed:
        for s in (-1, 1):
            v = x[d] + s
            if lay.lo[d] <= v <= lay.hi[d]:
                y = x.copy()
                y[d] = v
                out.append(y)
    return np.array(out) if out else np.zeros((0, x.size))


def _discrete_phase(acq, X, fX, lay: _Layout, cfg: AcqOptConfig):
    if not lay.disc and not lay.relaxed:
        return X, fX
    for _ in range(cfg.discrete_passes):
        nbrs = [_neighbors(x, lay) for x in X]
        sizes = [len(n) for n in nbrs]
        if sum(sizes) == 0:
            break
        v = _safe(acq(np.vstack(nbrs)))
        moved = False
        s = 0
        for r, k in enumerate(sizes):
            if k:
                j = int(np.argmax(v[s:s + k]))
                if v[s + j] > fX[r]:
                    X[r], fX[r] = nbrs[r][j], v[s + j]
                    moved = True
            s += k
        if not moved:
            break
    return X, fX


def optimize_acq(acq: Callable, space: SearchSpace, cfg: AcqOptConfig = AcqOptConfig(),
                 rng: np.random.Generator | int | None = None,
                 seeds: np.ndarray | None = None) -> tuple[np.ndarray, float]:
    """Maximize ``acq`` over ``space``; returns ``(point, value)``.

    Starts are the best raw samples plus every row of ``seeds``. Each start
    alternates projected finite-difference ascent over continuous, simplex,
    and relaxed-integer coordinates with 1-swap search over the discrete ones.
    """
    if cfg.candidate_pool is not None:
        i, v = pool_argmax(acq, cfg.candidate_pool)
        return cfg.candidate_pool[i].copy(), v
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    lay = _Layout(space, cfg.relax_threshold)
    raw = uniform_sample(space, cfg.raw_samples, rng)
    rv = _safe(acq(raw))
    n_raw = max(cfg.restarts - (0 if seeds is None else len(np.atleast_2d(seeds))), 1)
    top = np.argsort(-rv, kind="stable")[:n_raw]
    X, fX = raw[top].copy(), rv[top].copy()
    if seeds is not None and len(seeds):
        S = round_points(space, np.atleast_2d(seeds))
        X = np.vstack([X, S])
        fX = np.concatenate([fX, _safe(acq(S))])
    for _ in range(cfg.alternations):
        X, fX = _continuous_phase(acq, X, fX, lay, cfg)
        X, fX = _discrete_phase(acq, X, fX, lay, cfg)
    X = round_points(space, X)
    fX = _safe(acq(X))
    b = int(np.argmax(fX))
    return X[b].copy(), float(fX[b])


@dataclass
class BatchResult:
    points: list[np.ndarray]
    indices: list[int] | None
    values: list[float]


def batch_select(make_acq: Callable[[GpModel, np.ndarray | None], Callable], gp: GpModel, q: int,
                 space: SearchSpace | None, cfg: AcqOptConfig = AcqOptConfig(),
                 rng: np.random.Generator | int | None = None, *, fantasize: bool = True,
                 exclude: np.ndarray | None = None, seeds: np.ndarray | None = None,
                 distinct: bool | None = None) -> BatchResult:
    """Sequential greedy batch: optimize, condition on the posterior-mean fantasy, repeat.

    ``make_acq(model, pending)`` rebuilds the acquisition on the conditioned
    model. With a candidate pool, chosen rows are masked out so the batch has
    distinct members (``distinct`` defaults to ``fantasize``). ``fantasize=False``
    skips conditioning.
    """
    if q < 1:
        raise ValueError("q must be >= 1")
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    pool = cfg.candidate_pool
    mask = None
    if pool is not None:
        mask = np.zeros(len(pool), dtype=bool) if exclude is None else np.asarray(exclude, dtype=bool).copy()
        if (~mask).sum() < q:
            raise ValueError(f"pool has {(~mask).sum()} available candidates, fewer than q={q}")
    pts: list[np.ndarray] = []
    idxs: list[int] = []
    vals: list[float] = []
    g = gp
    for _ in range(q):
        acq = make_acq(g, np.array(pts) if pts else None)
        if pool is not None:
            i, v = pool_argmax(acq, pool, mask)
            x = pool[i].copy()
            if distinct if distinct is not None else fantasize:
                mask[i] = True
            idxs.append(i)
        else:
            x, v = optimize_acq(acq, space, cfg, rng, seeds)
        pts.append(x)
        vals.append(v)
        if fantasize and len(pts) < q:
            g = condition_on_fantasy(g, x, g.mean_var(x[None])[0])
    return BatchResult(pts, idxs if pool is not None else None, vals)

"""Model-free baselines: uniform random search and a tree-structured Parzen estimator."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln, logsumexp, ndtr
from scipy.stats import norm

from .spaces import CATEGORICAL, SearchSpace, round_point, uniform_sample


def random_step(space: SearchSpace, rng: np.random.Generator) -> np.ndarray:
    return uniform_sample(space, 1, rng)[0]


@dataclass
class TpeState:
    """Settings and history for :func:`tpe_suggest`.

    Attributes:
        gamma: Fraction of the history treated as good.
        n_candidates: Draws from the good density scored per suggestion.
        X: Observed points, one row each.
        y: Observed values (maximized).
        bandwidth_rule: Only ``scott`` is implemented.
        min_history: Below this many observations the suggestion is random.
    """

    gamma: float = 0.25
    n_candidates: int = 24
    X: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    y: np.ndarray = field(default_factory=lambda: np.zeros(0))
    bandwidth_rule: str = "scott"
    min_history: int = 10
    last_fallback: str | None = None

    def __post_init__(self) -> None:
        if not 0 < self.gamma < 1:
            raise ValueError("gamma must be in (0, 1)")
        if self.n_candidates < 1:
            raise ValueError("n_candidates must be >= 1")


class _Kde1d:
    """Gaussian KDE truncated to ``[lo, hi]`` with Scott bandwidth."""

    def __init__(self, pts: np.ndarray, lo: float, hi: float):
        self.pts, self.lo, self.hi = pts, lo, hi
        span = max(hi - lo, 1e-12)
        sd = float(np.std(pts)) if pts.size > 1 else 0.0
        bw = sd * pts.size ** (-1.0 / 5.0)
        self.bw = float(np.clip(bw, 0.01 * span, span)) if bw > 0 else 0.1 * span
        self.log_mass = np.log(np.maximum(ndtr((hi - pts) / self.bw) - ndtr((lo - pts) / self.bw), 1e-300))

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        c = self.pts[rng.integers(self.pts.size, size=n)]
        out = np.empty(n)
        for i in range(n):
            # rejection from the truncated component
            while True:
                v = c[i] + self.bw * rng.standard_normal()
                if self.lo <= v <= self.hi:
                    out[i] = v
                    break
        return out

    def logpdf(self, x: np.ndarray) -> np.ndarray:
        z = (x[:, None] - self.pts[None, :]) / self.bw
        comp = norm.logpdf(z) - math.log(self.bw) - self.log_mass[None, :]
        return logsumexp(comp, axis=1) - math.log(self.pts.size)


class _Cat:
    def __init__(self, codes: np.ndarray, lo: int, k: int):
        counts = np.bincount((codes - lo).astype(int), minlength=k).astype(float)
        self.lo = lo
        self.p = (counts + 1.0) / (counts.sum() + k)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return self.lo + rng.choice(self.p.size, size=n, p=self.p)

    def logpdf(self, x: np.ndarray) -> np.ndarray:
        return np.log(self.p[(x - self.lo).astype(int)])


class _Dirichlet:
    """Dirichlet fitted by moment matching on the group's proportions."""

    def __init__(self, P: np.ndarray):
        m = P.mean(axis=0)
        v = P.var(axis=0)
        ok = (v > 1e-12) & (m > 0) & (m < 1)
        a0 = float(np.mean(m[ok] * (1 - m[ok]) / v[ok] - 1)) if ok.any() else 10.0
        a0 = float(np.clip(a0, 0.5, 1e3))
        self.alpha = np.maximum(m * a0, 0.05)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return rng.dirichlet(self.alpha, size=n)

    def logpdf(self, P: np.ndarray) -> np.ndarray:
        Q = np.clip(P, 1e-9, None)
        Q = Q / Q.sum(axis=1, keepdims=True)
        a = self.alpha
        return gammaln(a.sum()) - gammaln(a).sum() + ((a - 1) * np.log(Q)).sum(axis=1)


def _fit_density(space: SearchSpace, X: np.ndarray):
    parts = []
    in_group = set(space.simplex_inds)
    for i, p in enumerate(space.params):
        if i in in_group:
            continue
        if p.kind == CATEGORICAL:
            parts.append(([i], _Cat(X[:, i], int(p.lower), p.cardinality)))
        else:
            parts.append(([i], _Kde1d(X[:, i], p.lower, p.upper)))
    for g in space.simplex_groups:
        parts.append((list(g), _Dirichlet(X[:, list(g)])))
    return parts


def _logpdf(parts, X: np.ndarray) -> np.ndarray:
    tot = np.zeros(X.shape[0])
    for cols, d in parts:
        tot += d.logpdf(X[:, cols[0]] if len(cols) == 1 else X[:, cols])
    return tot


def _sample(parts, space: SearchSpace, n: int, rng: np.random.Generator) -> np.ndarray:
    out = np.zeros((n, space.dim))
    for cols, d in parts:
        s = d.sample(n, rng)
        if len(cols) == 1:
            out[:, cols[0]] = s
        else:
            out[:, cols] = s
    return out


def argmax_random_ties(scores: np.ndarray, rng: np.random.Generator, tol: float = 1e-12) -> int:
    best = np.max(scores)
    return int(rng.choice(np.flatnonzero(scores >= best - tol)))


def tpe_suggest(state: TpeState, space: SearchSpace, rng: np.random.Generator) -> np.ndarray:
    """Sample candidates from the good-set density and return the best ``l(x) / g(x)``."""
    X, y = np.atleast_2d(state.X), np.asarray(state.y, dtype=float)
    state.last_fallback = None
    if y.size < state.min_history:
        state.last_fallback = "short-history"
        return random_step(space, rng)
    if np.ptp(y) == 0:
        state.last_fallback = "degenerate-history"
        return random_step(space, rng)
    n_good = int(min(max(1, math.ceil(state.gamma * y.size)), y.size - 1))
    order = np.argsort(-y, kind="stable")
    good, bad = X[order[:n_good]], X[order[n_good:]]
    lpart, gpart = _fit_density(space, good), _fit_density(space, bad)
    C = _sample(lpart, space, state.n_candidates, rng)
    C = np.array([round_point(space, c) for c in C])
    score = _logpdf(lpart, C) - _logpdf(gpart, C)
    return C[argmax_random_ties(score, rng)]

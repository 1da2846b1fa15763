"""Search spaces, point validity, and samplers.

A point is a flat float vector with one coordinate per parameter. Integer and
categorical coordinates hold whole numbers (categorical codes are ``0..C-1``),
and every simplex group holds a full set of nonnegative proportions summing to
one. Batches of points are ``(n, dim)`` arrays.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np
from scipy.stats import qmc

SIMPLEX_TOL = 1e-9

CONTINUOUS = "continuous"
INTEGER = "integer"
CATEGORICAL = "categorical"
KINDS = (CONTINUOUS, INTEGER, CATEGORICAL)


class SpaceError(ValueError):
    """Raised for malformed spaces or operations a space cannot support."""


class DegenerateSimplexError(SpaceError):
    """A simplex group clamped to all zeros and cannot be renormalized."""


@dataclass(frozen=True)
class ParamSpec:
    """One dimension of a search space.

    For categorical parameters ``lower``/``upper`` are ``0`` and ``C - 1``;
    use :meth:`categorical` to build one from a cardinality.
    """

    name: str
    kind: str
    lower: float
    upper: float
    log_scaled: bool = False
    labels: tuple[str, ...] | None = None

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise SpaceError(f"unknown parameter kind {self.kind!r}")
        if self.kind == CATEGORICAL:
            if self.lower != 0 or self.upper < 1 or self.upper != int(self.upper):
                raise SpaceError(f"{self.name}: categorical needs codes 0..C-1 with C >= 2")
        elif not self.lower < self.upper:
            raise SpaceError(f"{self.name}: lower must be < upper")
        if self.kind == INTEGER and (self.lower != int(self.lower) or self.upper != int(self.upper)):
            raise SpaceError(f"{self.name}: integer bounds must be whole numbers")

    @classmethod
    def categorical(cls, name: str, cardinality: int, labels: Sequence[str] | None = None) -> ParamSpec:
        return cls(name, CATEGORICAL, 0.0, float(cardinality - 1),
                   labels=tuple(labels) if labels is not None else None)

    @property
    def cardinality(self) -> int:
        """Number of valid codes for discrete kinds; ``0`` for continuous."""
        if self.kind == CONTINUOUS:
            return 0
        return int(self.upper - self.lower) + 1

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {"name": self.name, "kind": self.kind, "lower": self.lower,
                             "upper": self.upper, "log_scaled": self.log_scaled}
        if self.labels is not None:
            d["labels"] = list(self.labels)
        return d


@dataclass(frozen=True)
class Violation:
    index: int
    kind: str  # "bounds", "integrality", "simplex-group-<g>", "dimension"
    message: str


@dataclass(frozen=True)
class SearchSpace:
    params: tuple[ParamSpec, ...]
    simplex_groups: tuple[tuple[int, ...], ...] = ()
    fidelity_index: int | None = None
    continuous_inds: tuple[int, ...] = field(init=False)
    discrete_inds: tuple[int, ...] = field(init=False)
    categorical_inds: tuple[int, ...] = field(init=False)

    def __post_init__(self) -> None:
        params = tuple(self.params)
        groups = tuple(tuple(int(i) for i in g) for g in self.simplex_groups)
        object.__setattr__(self, "params", params)
        object.__setattr__(self, "simplex_groups", groups)
        by_kind = {k: tuple(i for i, p in enumerate(params) if p.kind == k) for k in KINDS}
        object.__setattr__(self, "continuous_inds", by_kind[CONTINUOUS])
        object.__setattr__(self, "discrete_inds", by_kind[INTEGER])
        object.__setattr__(self, "categorical_inds", by_kind[CATEGORICAL])

        seen: set[int] = set()
        for g in groups:
            if len(g) < 2:
                raise SpaceError("simplex groups need at least two coordinates")
            for i in g:
                if not 0 <= i < len(params):
                    raise SpaceError(f"simplex index {i} out of range")
                if i in seen:
                    raise SpaceError("simplex groups must be disjoint")
                if params[i].kind != CONTINUOUS:
                    raise SpaceError("simplex groups may only reference continuous params")
                if params[i].lower > 0 or params[i].upper < 1:
                    raise SpaceError("simplex coordinates need bounds covering [0, 1]")
                seen.add(i)
        if self.fidelity_index is not None and not 0 <= self.fidelity_index < len(params):
            raise SpaceError("fidelity_index out of range")

    @property
    def dim(self) -> int:
        return len(self.params)

    @property
    def effective_dim(self) -> int:
        """Free parameters once each simplex group loses one degree of freedom."""
        return self.dim - len(self.simplex_groups)

    @property
    def names(self) -> list[str]:
        return [p.name for p in self.params]

    @property
    def bounds(self) -> np.ndarray:
        """``(2, dim)`` array of lower and upper bounds."""
        return np.array([[p.lower for p in self.params], [p.upper for p in self.params]], dtype=float)

    @property
    def simplex_inds(self) -> tuple[int, ...]:
        return tuple(i for g in self.simplex_groups for i in g)

    @property
    def free_continuous_inds(self) -> tuple[int, ...]:
        """Continuous indices not tied to a simplex group."""
        s = set(self.simplex_inds)
        return tuple(i for i in self.continuous_inds if i not in s)

    def to_dict(self) -> dict[str, Any]:
        return {
            "params": [p.to_dict() for p in self.params],
            "simplex_groups": [list(g) for g in self.simplex_groups],
            "fidelity_index": self.fidelity_index,
        }

    def to_json(self, path: str | Path | None = None) -> str:
        text = json.dumps(self.to_dict(), indent=2)
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> SearchSpace:
        params = []
        for p in d["params"]:
            labels = p.get("labels")
            params.append(ParamSpec(p["name"], p["kind"], float(p["lower"]), float(p["upper"]),
                                    bool(p.get("log_scaled", False)),
                                    tuple(labels) if labels is not None else None))
        return cls(tuple(params), tuple(tuple(g) for g in d.get("simplex_groups", [])),
                   d.get("fidelity_index"))

    @classmethod
    def from_json(cls, text_or_path: str | Path) -> SearchSpace:
        p = Path(text_or_path)
        text = p.read_text() if p.suffix == ".json" and p.exists() else str(text_or_path)
        return cls.from_dict(json.loads(text))


def unit_box(dim: int) -> SearchSpace:
    return SearchSpace(tuple(ParamSpec(f"x{i}", CONTINUOUS, 0.0, 1.0) for i in range(dim)))


def _as_rng(rng: np.random.Generator | int | None) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def dirichlet_sample(group_size: int, alpha: float, n: int,
                     rng: np.random.Generator | int | None) -> np.ndarray:
    """``(n, group_size)`` draws from a symmetric Dirichlet(alpha)."""
    if group_size < 2 or alpha <= 0:
        raise SpaceError("dirichlet_sample needs group_size >= 2 and alpha > 0")
    rng = _as_rng(rng)
    g = rng.gamma(alpha, 1.0, size=(n, group_size))
    s = g.sum(axis=1, keepdims=True)
    # All-zero gamma rows only happen for tiny alpha; fall back to a vertex.
    bad = s[:, 0] <= 0
    if bad.any():
        g[bad] = 0.0
        g[bad, rng.integers(group_size, size=bad.sum())] = 1.0
        s = g.sum(axis=1, keepdims=True)
    return g / s


def uniform_sample(space: SearchSpace, n: int, rng: np.random.Generator | int | None,
                   alpha: float = 1.0) -> np.ndarray:
    """Independent uniform points; simplex groups are Dirichlet(alpha) draws."""
    if n < 1:
        raise SpaceError("n must be >= 1")
    rng = _as_rng(rng)
    lo, hi = space.bounds
    X = np.empty((n, space.dim))
    for i, p in enumerate(space.params):
        if p.kind == CONTINUOUS:
            X[:, i] = rng.uniform(lo[i], hi[i], size=n)
        else:
            X[:, i] = rng.integers(int(lo[i]), int(hi[i]) + 1, size=n)
    for g in space.simplex_groups:
        X[:, list(g)] = dirichlet_sample(len(g), alpha, n, rng)
    return X


def sobol_sample(space: SearchSpace, n: int) -> np.ndarray:
    """First ``n`` points of the unscrambled Sobol sequence, leading zero dropped.

    Discrete coordinates are mapped by flooring ``lower + u * cardinality``
    so every code gets an equal share of the unit interval.
    """
    if space.simplex_groups:
        raise SpaceError("sobol_sample does not support simplex-constrained spaces")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)
        eng = qmc.Sobol(space.dim, scramble=False)
        eng.fast_forward(1)
        U = eng.random(n)
    lo, hi = space.bounds
    X = np.empty_like(U)
    for i, p in enumerate(space.params):
        if p.kind == CONTINUOUS:
            X[:, i] = lo[i] + U[:, i] * (hi[i] - lo[i])
        else:
            X[:, i] = np.minimum(lo[i] + np.floor(U[:, i] * p.cardinality), hi[i])
    return X


def project_simplex(v: np.ndarray) -> np.ndarray:
    """Euclidean projection of each row of ``v`` onto the probability simplex."""
    v = np.atleast_2d(v)
    n, k = v.shape
    u = -np.sort(-v, axis=1)
    css = np.cumsum(u, axis=1) - 1.0
    idx = np.arange(1, k + 1)
    cond = u - css / idx > 0
    rho = k - 1 - np.argmax(cond[:, ::-1], axis=1)
    theta = css[np.arange(n), rho] / (rho + 1)
    return np.maximum(v - theta[:, None], 0.0)


def round_points(space: SearchSpace, X: np.ndarray) -> np.ndarray:
    """Vectorized :func:`round_point` over the rows of ``X``."""
    X = np.array(X, dtype=float, copy=True, ndmin=2)
    lo, hi = space.bounds
    X = np.clip(X, lo, hi)
    d_inds = list(space.discrete_inds) + list(space.categorical_inds)
    if d_inds:
        X[:, d_inds] = np.clip(np.floor(X[:, d_inds] + 0.5), lo[d_inds], hi[d_inds])
    for g in space.simplex_groups:
        cols = list(g)
        block = np.maximum(X[:, cols], 0.0)
        s = block.sum(axis=1)
        if np.any(s <= 0):
            raise DegenerateSimplexError(f"simplex group {g} is all zero after clamping")
        X[:, cols] = block / s[:, None]
    return X


def round_point(space: SearchSpace, point: Sequence[float] | np.ndarray) -> np.ndarray:
    """Snap a relaxed point onto the space.

    Discrete coordinates go to the nearest valid code, continuous ones are
    clamped, and simplex groups are renormalized after clamping negatives.
    """
    return round_points(space, np.asarray(point, dtype=float)[None, :])[0]


def validate(space: SearchSpace, point: Sequence[float] | np.ndarray) -> list[Violation]:
    """Every invariant ``point`` violates; an empty list means valid."""
    x = np.asarray(point, dtype=float)
    if x.shape != (space.dim,):
        return [Violation(-1, "dimension", f"expected {space.dim} coordinates, got {x.shape}")]
    out: list[Violation] = []
    for i, p in enumerate(space.params):
        v = x[i]
        if not np.isfinite(v) or v < p.lower - SIMPLEX_TOL or v > p.upper + SIMPLEX_TOL:
            out.append(Violation(i, "bounds", f"{p.name}={v} outside [{p.lower}, {p.upper}]"))
        elif p.kind != CONTINUOUS and v != np.floor(v):
            out.append(Violation(i, "integrality", f"{p.name}={v} is not a whole number"))
    for gi, g in enumerate(space.simplex_groups):
        vals = x[list(g)]
        if np.any(vals < 0) or abs(vals.sum() - 1.0) > SIMPLEX_TOL:
            out.append(Violation(g[0], f"simplex-group-{gi}",
                                 f"group {gi} sums to {vals.sum():.12g}"))
    return out


def is_valid(space: SearchSpace, point: Sequence[float] | np.ndarray) -> bool:
    return not validate(space, point)


def to_unit(space: SearchSpace, X: np.ndarray) -> np.ndarray:
    """Map non-categorical coordinates to ``[0, 1]``; categorical codes pass through."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    lo, hi = space.bounds
    U = X.copy()
    cols = [i for i in range(space.dim) if i not in set(space.categorical_inds)]
    U[:, cols] = (X[:, cols] - lo[cols]) / (hi[cols] - lo[cols])
    return U


def simplex_grid(group_size: int, step: float) -> np.ndarray:
    """All points of the barycentric grid with spacing ``step`` on a simplex."""
    m = int(round(1.0 / step))

    def rec(k: int, remaining: int) -> list[list[int]]:
        if k == 1:
            return [[remaining]]
        return [[i] + rest for i in range(remaining + 1) for rest in rec(k - 1, remaining - i)]

    return np.array(rec(group_size, m), dtype=float) / m


def grid_points(space: SearchSpace, levels: int = 17, simplex_step: float = 1 / 16,
                max_points: int = 2_000_000) -> np.ndarray:
    """Dense product grid over the space.

    Free continuous dims get ``levels`` equispaced values, discrete dims every
    valid code, and simplex groups a barycentric grid.
    """
    axes: list[np.ndarray] = []
    blocks: list[list[int]] = []
    in_group = {i for g in space.simplex_groups for i in g}
    for i, p in enumerate(space.params):
        if i in in_group:
            continue
        if p.kind == CONTINUOUS:
            axes.append(np.linspace(p.lower, p.upper, levels)[:, None])
        else:
            axes.append(np.arange(p.lower, p.upper + 1)[:, None])
        blocks.append([i])
    for g in space.simplex_groups:
        axes.append(simplex_grid(len(g), simplex_step))
        blocks.append(list(g))
    total = int(np.prod([a.shape[0] for a in axes]))
    if total > max_points:
        raise SpaceError(f"grid has {total} points, above max_points={max_points}")
    idx = np.indices([a.shape[0] for a in axes]).reshape(len(axes), -1)
    X = np.empty((total, space.dim))
    for a, cols, ix in zip(axes, blocks, idx):
        X[:, cols] = a[ix]
    return X

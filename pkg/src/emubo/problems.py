"""Benchmark problems: spaces, backends, noise, costs and optimum estimates."""

from __future__ import annotations

import json
import os
import time
import warnings
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Callable

import numpy as np

from .emulator import EmulatorError, MlpEmulator, TabularObjective, truncate_embedding
from .multiobjective import hypervolume, nondominated
from .noise import NoiseModel, noise_sigma
from .spaces import (CONTINUOUS, ParamSpec, SearchSpace, grid_points, project_simplex,
                     validate)
from .synthetic import DMO_OUTPUTS, po_table

NAMES = ("HPO", "HPO-MF-Cont", "HPO-MF-Disc", "DMO", "DMO-MO", "DMO-Het",
         "PO-128", "PO-256", "PO-512", "PO-768")
SYNTHETIC_SUFFIX = "-synthetic"
ASSET_ENV = "BOLT_ASSETS"
DEFAULT_NOISE_STD = 0.001
TOKEN_FIDELITY_RAW = (1e5, 9.1e6)
PO_CANDIDATES = 5014


class ProblemError(ValueError):
    pass


# --- spaces -------------------------------------------------------------------

TARGET_MODULES = ("q_proj,v_proj", "q_proj,v_proj,k_proj,o_proj", "gate_proj,up_proj,down_proj",
                  "all-linear")


def hpo_space(fidelity: str | None = None) -> SearchSpace:
    """Seven tuning knobs; ``fidelity`` adds a token (continuous) or model-size (categorical) knob."""
    params = [
        ParamSpec("learning_rate", CONTINUOUS, 0.0, 1.0, log_scaled=True),
        ParamSpec("batch_size_log2", "integer", 2, 4),
        ParamSpec("lora_rank_log2", "integer", 2, 5),
        ParamSpec("lora_alpha_log2", "integer", 2, 5),
        ParamSpec("lora_dropout", CONTINUOUS, 0.0, 1.0),
        ParamSpec("lora_layers", "integer", 1, 30),
        ParamSpec.categorical("target_modules", 4, TARGET_MODULES),
    ]
    fid = None
    if fidelity == "continuous":
        params.append(ParamSpec("token_fidelity", CONTINUOUS, 0.0, 1.0))
        fid = 7
    elif fidelity == "discrete":
        params.append(ParamSpec.categorical("model_fidelity", 2, ("4B", "8B")))
        fid = 7
    return SearchSpace(tuple(params), fidelity_index=fid)


def dmo_space() -> SearchSpace:
    names = ("if_prop1", "math_prop1", "code_prop1", "if_prop2", "math_prop2", "code_prop2")
    return SearchSpace(tuple(ParamSpec(n, CONTINUOUS, 0.0, 1.0) for n in names),
                       simplex_groups=((0, 1, 2), (3, 4, 5)))


def token_fidelity_raw(fid: float) -> float:
    lo, hi = TOKEN_FIDELITY_RAW
    return lo + fid * (hi - lo)


# --- problem -----------------------------------------------------------------------

@dataclass(frozen=True)
class Observation:
    point: np.ndarray
    values: np.ndarray
    cost: float
    fidelity: float | None = None
    iteration: int = 0
    wall_time: float = 0.0


@dataclass(frozen=True)
class Problem:
    """A black-box problem with a deterministic backend and a noise model.

    ``backend`` maps raw points ``(n, p)`` to noiseless values
    ``(n, objective_dim)``. Tabular problems carry their ``table`` and their
    points are embedding rows.
    """

    name: str
    space: SearchSpace
    backend: Callable[[np.ndarray], np.ndarray]
    objective_dim: int = 1
    noise_std: float = DEFAULT_NOISE_STD
    noise_model: NoiseModel | None = None
    noise_output: int = 0
    table: TabularObjective | None = None
    output_names: tuple[str, ...] = ("score",)
    meta: dict = field(default_factory=dict)
    _row_index: dict = field(default_factory=dict, repr=False, compare=False)
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self) -> None:
        if self.objective_dim < 1:
            raise ProblemError("objective_dim must be >= 1")
        if self.noise_std < 0:
            raise ProblemError("noise_std must be >= 0")
        if self.table is not None and not self._row_index:
            self._row_index.update({row.tobytes(): i for i, row in
                                    enumerate(np.ascontiguousarray(self.table.embeddings))})

    @property
    def is_multi_fidelity(self) -> bool:
        return self.space.fidelity_index is not None

    @property
    def is_tabular(self) -> bool:
        return self.table is not None

    @property
    def is_multi_objective(self) -> bool:
        return self.objective_dim > 1

    @property
    def heteroscedastic(self) -> bool:
        return self.noise_model is not None

    def noiseless(self, X: np.ndarray) -> np.ndarray:
        return np.atleast_2d(self.backend(np.atleast_2d(np.asarray(X, dtype=float))))

    def at_target_fidelity(self, X: np.ndarray) -> np.ndarray:
        X = np.array(X, dtype=float, copy=True, ndmin=2)
        if self.is_multi_fidelity:
            X[:, self.space.fidelity_index] = 1.0
        return X

    def candidate_index(self, x: np.ndarray) -> int:
        if self.table is None:
            raise ProblemError(f"{self.name} is not tabular")
        key = np.ascontiguousarray(np.asarray(x, dtype=float)).tobytes()
        if key not in self._row_index:
            raise ProblemError("point is not one of the candidate rows")
        return self._row_index[key]

    def noise_sigma_at(self, X: np.ndarray) -> np.ndarray:
        """Per-point noise std for every output, shape ``(n, objective_dim)``."""
        X = np.atleast_2d(X)
        out = np.full((X.shape[0], self.objective_dim), self.noise_std)
        if self.noise_model is not None:
            out[:, self.noise_output] = noise_sigma(self.noise_model, X)
        return out


def fidelity_cost(p: Problem, x: np.ndarray) -> float:
    """``0.9 * fid(x) + 0.1`` for multi-fidelity problems."""
    if not p.is_multi_fidelity:
        raise ProblemError(f"{p.name} has no fidelity dimension")
    fid = float(np.asarray(x, dtype=float)[p.space.fidelity_index])
    return 0.9 * fid + 0.1


def step_cost(p: Problem, x: np.ndarray) -> float:
    return fidelity_cost(p, x) if p.is_multi_fidelity else 1.0


def evaluate(p: Problem, x: np.ndarray, rng: np.random.Generator, iteration: int = 0) -> Observation:
    """Noisy observation at a valid point (a candidate row for tabular problems)."""
    t0 = time.perf_counter()
    x = np.asarray(x, dtype=float)
    if p.is_tabular:
        p.candidate_index(x)
    else:
        v = validate(p.space, x)
        if v:
            raise ProblemError(f"invalid point: {v[0].message}")
    f = p.noiseless(x[None])[0]
    sig = p.noise_sigma_at(x[None])[0]
    eps = rng.standard_normal(p.objective_dim)
    fid = float(x[p.space.fidelity_index]) if p.is_multi_fidelity else None
    return Observation(x.copy(), f + sig * eps, step_cost(p, x), fid, iteration,
                       time.perf_counter() - t0)


# --- assets -------------------------------------------------------------------------

def _data_root() -> Path:
    return Path(str(resources.files("emubo") / "data"))


def load_manifest(path: str | Path | None = None) -> dict:
    """Catalog mapping problem names to asset files and noise defaults."""
    p = Path(path) if path else _data_root() / "catalog.json"
    return json.loads(p.read_text())


def asset_root(assets: str | Path | None = None) -> Path | None:
    if assets:
        return Path(assets)
    env = os.environ.get(ASSET_ENV)
    return Path(env) if env else None


def _load_emulator(path: Path, input_dim: int, n_outputs: int | None = None) -> MlpEmulator:
    if not path.exists():
        raise ProblemError(f"missing asset {path}")
    try:
        em = MlpEmulator.load(path)
    except (EmulatorError, KeyError, json.JSONDecodeError) as e:
        raise ProblemError(f"bad emulator asset {path}: {e}") from e
    if em.input_dim != input_dim:
        raise ProblemError(f"{path} expects input dim {em.input_dim}, problem has {input_dim}")
    if n_outputs is not None and em.n_outputs != n_outputs:
        raise ProblemError(f"{path} has {em.n_outputs} outputs, expected {n_outputs}")
    return em


@lru_cache(maxsize=8)
def _synthetic_table(d: int) -> TabularObjective:
    return truncate_embedding(po_table(), d)


@lru_cache(maxsize=16)
def _load_table(path: str, d: int) -> TabularObjective:
    if not Path(path).exists():
        raise ProblemError(f"missing asset {path}")
    return truncate_embedding(TabularObjective.from_csv(path), d)


def _mf_disc_backend(low: MlpEmulator, high: MlpEmulator) -> Callable:
    def f(X: np.ndarray) -> np.ndarray:
        out = np.empty((X.shape[0], 1))
        code = np.rint(X[:, 7]).astype(int)
        for c, em in ((0, low), (1, high)):
            m = code == c
            if m.any():
                out[m] = em.predict(X[m, :7])[:, :1]
        return out
    return f


def list_problems(manifest: dict | None = None) -> list[str]:
    man = manifest or load_manifest()
    return sorted(man["problems"]) + sorted(n + SYNTHETIC_SUFFIX for n in man["problems"])


def make_problem(name: str, assets: str | Path | None = None, noise_std: float = DEFAULT_NOISE_STD,
                 manifest: dict | None = None) -> Problem:
    """Wire up a named problem.

    Names ending in ``-synthetic`` use the bundled stand-in emulators and
    synthetic prompt table. Other names need released assets under
    ``assets`` or the ``BOLT_ASSETS`` directory.
    """
    synthetic = name.endswith(SYNTHETIC_SUFFIX)
    base = name[: -len(SYNTHETIC_SUFFIX)] if synthetic else name
    if base not in NAMES:
        raise ProblemError(f"unknown problem {name!r}; known: {', '.join(NAMES)}")
    man = manifest or load_manifest()
    entry = man["problems"][base]
    if synthetic:
        root = _data_root() / "synthetic"
    else:
        root = asset_root(assets)
        if root is None:
            raise ProblemError(f"{name} needs released assets; set {ASSET_ENV} or pass assets")
    files = {k: root / v for k, v in entry.get("files", {}).items()}
    meta = {"synthetic": synthetic, "family": entry["family"], "assets": {k: str(v) for k, v in files.items()}}

    if base == "HPO":
        em = _load_emulator(files["emulator"], 7)
        return Problem(name, hpo_space(), lambda X: em.predict(X)[:, :1], noise_std=noise_std,
                       output_names=em.output_names[:1], meta=meta)
    if base == "HPO-MF-Cont":
        em = _load_emulator(files["emulator"], 8)
        meta["fidelity_raw_range"] = list(TOKEN_FIDELITY_RAW)
        return Problem(name, hpo_space("continuous"), lambda X: em.predict(X)[:, :1],
                       noise_std=noise_std, output_names=em.output_names[:1], meta=meta)
    if base == "HPO-MF-Disc":
        low = _load_emulator(files["low"], 7)
        high = _load_emulator(files["high"], 7)
        return Problem(name, hpo_space("discrete"), _mf_disc_backend(low, high), noise_std=noise_std,
                       output_names=high.output_names[:1], meta=meta)
    if base.startswith("DMO"):
        em = _load_emulator(files["emulator"], 6, 3)
        if base == "DMO":
            return Problem(name, dmo_space(), lambda X: em.predict(X).mean(axis=1, keepdims=True),
                           noise_std=noise_std, output_names=("mean_score",), meta=meta)
        if base == "DMO-MO":
            return Problem(name, dmo_space(), lambda X: em.predict(X), objective_dim=3,
                           noise_std=noise_std, output_names=DMO_OUTPUTS, meta=meta)
        npath = files["noise"]
        if not npath.exists():
            raise ProblemError(f"missing asset {npath}")
        nm = NoiseModel.load(npath)
        if nm.points.shape[1] != 6:
            raise ProblemError("noise model must be defined over the 6 mixture coordinates")
        k = DMO_OUTPUTS.index("math500")
        return Problem(name, dmo_space(), lambda X: em.predict(X)[:, k:k + 1], noise_std=0.0,
                       noise_model=nm, output_names=("math500",), meta=meta)
    d = int(entry["embedding_dim"])
    table = _synthetic_table(d) if synthetic else _load_table(str(files["table"]), d)
    if table.n != PO_CANDIDATES and synthetic:
        raise ProblemError("synthetic table has the wrong size")
    E = table.embeddings
    lo, hi = E.min(axis=0), E.max(axis=0)
    space = SearchSpace(tuple(ParamSpec(f"e{i}", CONTINUOUS, float(lo[i]), float(hi[i]))
                              for i in range(d)))
    scores = table.scores
    prob = Problem(name, space, lambda X: np.array([[scores[prob.candidate_index(x)]] for x in X]),
                   noise_std=noise_std, table=table, meta=meta)
    return prob


# --- optimum estimation -------------------------------------------------------------

@dataclass(frozen=True)
class OptimumEstimate:
    f_star: float | None
    method: str
    hv_star: float | None = None
    ref: np.ndarray | None = None
    argmax: np.ndarray | None = None
    flags: tuple[str, ...] = ()


def _eval_chunks(f: Callable, X: np.ndarray, chunk: int = 200_000) -> np.ndarray:
    return np.concatenate([f(X[s:s + chunk]) for s in range(0, len(X), chunk)])


def _search_grid(p: Problem, levels: int, simplex_step: float) -> np.ndarray:
    space = p.space
    if p.is_multi_fidelity:
        # the fidelity knob is pinned to 1, so grid only the base coordinates
        fi = space.fidelity_index
        base = SearchSpace(tuple(q for i, q in enumerate(space.params) if i != fi),
                           simplex_groups=space.simplex_groups)
        G = grid_points(base, levels, simplex_step)
        return np.insert(G, fi, 1.0, axis=1)
    return grid_points(space, levels, simplex_step)


def ascent_schedule(steps: int, start: float = 1e-2, end: float = 1e-4) -> np.ndarray:
    return np.geomspace(start, end, steps) if steps > 0 else np.empty(0)


def projected_ascent(f: Callable[[np.ndarray], np.ndarray], space: SearchSpace, X: np.ndarray,
                     steps: int = 200, fd: float = 1e-5, frozen: tuple[int, ...] = ()) -> tuple[np.ndarray, np.ndarray]:
    """Finite-difference ascent on continuous coordinates, projected back onto the space.

    Each step moves along the normalized gradient by the scheduled length
    (unit-normalized coordinates) and is kept only if it improves.
    """
    lo, hi = space.bounds
    width = np.where(hi > lo, hi - lo, 1.0)
    dims = [i for i, q in enumerate(space.params)
            if q.kind == CONTINUOUS and i not in frozen]
    X = np.array(X, dtype=float, copy=True)
    fX = f(X)
    if not dims:
        return X, fX
    groups = [list(g) for g in space.simplex_groups]
    col = {d: j for j, d in enumerate(dims)}
    n, nd = X.shape[0], len(dims)
    for s in ascent_schedule(steps):
        P = np.repeat(X, 2 * nd, axis=0).reshape(n, 2 * nd, -1)
        for j, d in enumerate(dims):
            P[:, 2 * j, d] += fd * width[d]
            P[:, 2 * j + 1, d] -= fd * width[d]
        v = f(P.reshape(-1, X.shape[1])).reshape(n, 2 * nd)
        g = (v[:, 0::2] - v[:, 1::2]) / (2 * fd)
        for grp in groups:
            c = [col[d] for d in grp if d in col]
            g[:, c] -= g[:, c].mean(axis=1, keepdims=True)
        nrm = np.linalg.norm(g, axis=1)
        ok = nrm > 0
        C = X.copy()
        C[np.ix_(ok, dims)] += s * (g[ok] / nrm[ok, None]) * width[dims]
        C = np.clip(C, lo, hi)
        for grp in groups:
            C[:, grp] = project_simplex(C[:, grp])
        fC = f(C)
        better = fC > fX
        X[better], fX[better] = C[better], fC[better]
    return X, fX


def estimate_optimum(p: Problem, levels: int = 17, ascent_steps: int = 200, top: int = 200,
                     simplex_step: float = 1 / 16) -> OptimumEstimate:
    """Best achievable value: exact for tables, grid plus local ascent for emulators.

    Multi-objective problems get the hypervolume of the grid's Pareto front
    instead, with the reference point from :func:`reference_point`.
    Multi-fidelity problems are optimized at the target fidelity.
    """
    key = ("optimum", levels, ascent_steps, top, simplex_step)
    if key in p._cache:
        return p._cache[key]
    if p.is_tabular:
        i = int(np.argmax(p.table.scores))
        est = OptimumEstimate(float(p.table.scores[i]), "exhaustive over candidates",
                              argmax=p.table.embeddings[i].copy())
    elif p.is_multi_objective:
        G = _search_grid(p, levels, simplex_step)
        Y = _eval_chunks(p.noiseless, G)
        ref, flags = _reference_from(Y)
        front = Y[nondominated(Y)]
        front = front[np.all(front > ref, axis=1)]
        hv = hypervolume(front, ref) if len(front) else 0.0
        est = OptimumEstimate(None, f"grid front (levels={levels}, simplex step={simplex_step:g})",
                              hv_star=hv, ref=ref, flags=flags)
    else:
        G = _search_grid(p, levels, simplex_step)
        f = lambda X: p.noiseless(X)[:, 0]
        vals = _eval_chunks(f, G)
        order = np.argsort(-vals, kind="stable")[:top]
        frozen = (p.space.fidelity_index,) if p.is_multi_fidelity else ()
        X, fX = projected_ascent(f, p.space, G[order], ascent_steps, frozen=frozen)
        b = int(np.argmax(fX))
        est = OptimumEstimate(float(max(fX[b], vals[order[0]])),
                              f"grid(levels={levels}, simplex step={simplex_step:g}) + ascent of top {top} for {ascent_steps} steps",
                              argmax=X[b])
    p._cache[key] = est
    return est


def _reference_from(Y: np.ndarray) -> tuple[np.ndarray, tuple[str, ...]]:
    mn, mx = Y.min(axis=0), Y.max(axis=0)
    flags = ("degenerate-range",) if np.any(mx - mn <= 0) else ()
    return mn - 0.1 * (mx - mn), flags


def reference_point(p: Problem, simplex_step: float = 1 / 16, levels: int = 17) -> np.ndarray:
    """Per objective, 10% of the grid range below the grid minimum."""
    if not p.is_multi_objective:
        raise ProblemError(f"{p.name} is single-objective")
    Y = _eval_chunks(p.noiseless, _search_grid(p, levels, simplex_step))
    ref, flags = _reference_from(Y)
    if flags:
        warnings.warn("objective range is zero on the grid; reference point is degenerate")
    return ref

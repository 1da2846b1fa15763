"""Experiment configuration and the optimization loop.

A run draws ``n_init`` initial points, then repeats fit, select, evaluate and
record until the iteration count (or, for multi-fidelity problems, the cost
budget) is used up. Every random choice flows from the seed, so a rerun with
the same configuration reproduces the same rows.
"""

from __future__ import annotations

import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Callable

import numpy as np

from .acqopt import AcqOptConfig, optimize_acq, pool_argmax
from .acquisition import (DEFAULT_COST_ALPHA, KINDS, AcqState, AcquisitionSpec, PosteriorMean,
                          fidelity_extractor)
from .baselines import TpeState, tpe_suggest
from .gp import GpModel, KernelSpec, NoiseSpec, build_gp, condition_on_fantasy
from .highdim import (D_INIT, K_MIN, TAU_FAIL, TAU_SUCC, dbaxus_step, dturbo_step, initial_subspace,
                      initial_tr_state, tr_observe, tr_seed)
from .multiobjective import (NEHVI, environmental_selection, make_population, normalize_objectives,
                             nsga2_generation, parego_scalarize, random_simplex_weight)
from .policy import select
from .problems import DEFAULT_NOISE_STD, Problem, evaluate, make_problem, reference_point
from .spaces import uniform_sample
from .surrogate import SurrogateConfig, fit_surrogate

GP_METHODS = KINDS
SO_BASELINES = ("random", "tpe")
TRUST_REGION = ("dturbo", "dbaxus")
MO_METHODS = ("nsga2", "parego", "nehvi")
METHODS = SO_BASELINES + GP_METHODS + TRUST_REGION + MO_METHODS
NOISE_MODES = ("inferred", "fixed", "known", "mlhgp")
UCB_BETA_BY_FAMILY = {"hpo": 10.0, "dmo": 2.0, "po": 2.0}


class ConfigError(ValueError):
    pass


# --- configuration ------------------------------------------------------------------

@dataclass(frozen=True)
class ProblemSection:
    """``name`` from :func:`emubo.problems.list_problems`; ``assets`` overrides the asset root."""

    name: str = ""
    assets: str | None = None
    noise_std: float = DEFAULT_NOISE_STD


@dataclass(frozen=True)
class MethodSection:
    """Optimizer settings.

    Attributes:
        name: One of :data:`METHODS`.
        acquisition: Inner acquisition for dturbo, dbaxus and parego.
        batch_q: Points per iteration.
        beta: UCB beta; ``None`` uses the problem family default unless
            ``delta`` asks for the scheduled beta.
        delta: Confidence parameter of the scheduled UCB beta.
        mc_samples: QMC samples for log_nei and nehvi.
        maxvalue_samples: Max-value draws for mes and gibbon.
        maxvalue_method: ``gumbel`` or ``thompson``.
        cost_alpha: Cost-model slope on multi-fidelity problems; ``None`` uses
            the per-acquisition default.
        noise: Surrogate noise handling, one of :data:`NOISE_MODES`.
        em_iterations: Rounds of the heteroscedastic EM fit (``mlhgp``).
        gp_restarts: Hyperparameter optimizer starts per fit.
        gp_maxiter: L-BFGS iterations per start.
        refit_every: Refit hyperparameters every this many iterations and
            reuse them (with the new data) in between.
        opt_restarts: Acquisition optimizer local searches.
        raw_samples: Acquisition optimizer seed pool.
        k_min: Smallest trust region.
        tau_succ: Successes before the trust region doubles.
        tau_fail: Failures before it halves (dturbo).
        d_init: First projected dimension (dbaxus).
        population: NSGA-II population size.
        tpe_gamma: Good-set fraction for TPE.
        tpe_candidates: Candidates scored per TPE suggestion.
    """

    name: str = "random"
    acquisition: str = "log_nei"
    batch_q: int = 1
    beta: float | None = None
    delta: float | None = None
    mc_samples: int = 128
    maxvalue_samples: int = 16
    maxvalue_method: str = "gumbel"
    cost_alpha: float | None = None
    noise: str = "inferred"
    em_iterations: int = 5
    gp_restarts: int = 2
    gp_maxiter: int = 200
    refit_every: int = 1
    opt_restarts: int = 4
    raw_samples: int = 512
    k_min: int = K_MIN
    tau_succ: int = TAU_SUCC
    tau_fail: int = TAU_FAIL
    d_init: int = D_INIT
    population: int = 10
    tpe_gamma: float = 0.25
    tpe_candidates: int = 24


@dataclass(frozen=True)
class BudgetSection:
    """``cost`` is required (and used instead of ``iterations``) on multi-fidelity problems."""

    iterations: int = 200
    cost: float | None = None
    n_init: int = 10
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)


@dataclass(frozen=True)
class OutputSection:
    """Where and what to write.

    ``inference`` records the posterior-mean maximizer after every
    iteration (needed for inference regret, costs one extra optimization per
    iteration). ``wall_clock`` writes per-step timings into the run CSV; when
    off, timings go to a sidecar file so run CSVs stay reproducible.
    """

    dir: str = "runs"
    metrics: tuple[str, ...] = ("log_simple_regret",)
    svg: bool = True
    inference: bool = False
    wall_clock: bool = False
    workers: int = 1


SECTIONS = {"problem": ProblemSection, "method": MethodSection, "budget": BudgetSection,
            "output": OutputSection}


@dataclass(frozen=True)
class ExperimentConfig:
    problem: ProblemSection = field(default_factory=ProblemSection)
    method: MethodSection = field(default_factory=MethodSection)
    budget: BudgetSection = field(default_factory=BudgetSection)
    output: OutputSection = field(default_factory=OutputSection)

    def __post_init__(self) -> None:
        m, b = self.method, self.budget
        if not self.problem.name:
            raise ConfigError("problem.name is required")
        if m.name not in METHODS:
            raise ConfigError(f"unknown method {m.name!r}; known: {', '.join(METHODS)}")
        if m.acquisition not in KINDS:
            raise ConfigError(f"unknown acquisition {m.acquisition!r}")
        if m.noise not in NOISE_MODES:
            raise ConfigError(f"unknown noise mode {m.noise!r}")
        if m.maxvalue_method not in ("gumbel", "thompson"):
            raise ConfigError("maxvalue_method must be gumbel or thompson")
        for k in ("batch_q", "mc_samples", "maxvalue_samples", "gp_restarts", "refit_every",
                  "opt_restarts", "raw_samples", "k_min", "tau_succ", "tau_fail", "d_init",
                  "population", "tpe_candidates"):
            if getattr(m, k) < 1:
                raise ConfigError(f"method.{k} must be >= 1")
        if b.n_init < 1:
            raise ConfigError("budget.n_init must be >= 1")
        if b.iterations < 0:
            raise ConfigError("budget.iterations must be >= 0")
        if b.cost is not None and b.cost <= 0:
            raise ConfigError("budget.cost must be > 0")
        if not b.seeds or len(set(b.seeds)) != len(b.seeds):
            raise ConfigError("budget.seeds must be a nonempty list of distinct integers")
        if self.output.workers < 1:
            raise ConfigError("output.workers must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> ExperimentConfig:
        """Build from nested sections; unknown sections or keys are errors."""
        unknown = set(d) - set(SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config section(s): {', '.join(sorted(unknown))}")
        parts = {}
        for sec, typ in SECTIONS.items():
            raw = d.get(sec, {})
            if not isinstance(raw, dict):
                raise ConfigError(f"[{sec}] must be a table")
            names = {f.name for f in fields(typ)}
            bad = set(raw) - names
            if bad:
                raise ConfigError(f"unknown key(s) in [{sec}]: {', '.join(sorted(bad))}")
            vals = dict(raw)
            for k in ("seeds", "metrics"):
                if k in vals:
                    vals[k] = tuple(vals[k])
            parts[sec] = typ(**vals)
        return cls(**parts)

    def to_dict(self) -> dict:
        out = {}
        for sec in SECTIONS:
            out[sec] = {k: (list(v) if isinstance(v, tuple) else v)
                        for k, v in asdict(getattr(self, sec)).items()}
        return out

    def with_seeds(self, seeds) -> ExperimentConfig:
        return replace(self, budget=replace(self.budget, seeds=tuple(int(s) for s in seeds)))


def load_config(path: str | Path) -> ExperimentConfig:
    """Read a ``.toml`` or ``.json`` experiment file."""
    p = Path(path)
    text = p.read_text()
    if p.suffix.lower() == ".json":
        raw = json.loads(text)
    else:
        try:
            import tomllib
        except ModuleNotFoundError:  # Python < 3.11
            import tomli as tomllib
        raw = tomllib.loads(text)
    return ExperimentConfig.from_dict(raw)


# --- records ------------------------------------------------------------------------

@dataclass
class Row:
    """One evaluation.

    ``point`` is the queried point, or for tabular problems the candidate
    row index. ``noiseless`` is the backend value at the target fidelity.
    """

    iteration: int
    point: Any
    fidelity: float | None
    values: tuple[float, ...]
    noiseless: tuple[float, ...]
    step_cost: float
    cum_cost: float
    best_noiseless: float
    incumbent_mean_point: Any = None
    wall_ms: float | None = None


@dataclass
class RunRecord:
    problem: str
    method: str
    seed: int
    rows: list[Row] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.rows)

    @property
    def values(self) -> np.ndarray:
        return np.array([r.values for r in self.rows], dtype=float)

    @property
    def noiseless(self) -> np.ndarray:
        return np.array([r.noiseless for r in self.rows], dtype=float)

    @property
    def best_noisy(self) -> np.ndarray:
        return np.maximum.accumulate(self.values[:, 0])

    @property
    def cum_cost(self) -> np.ndarray:
        return np.array([r.cum_cost for r in self.rows])

    @property
    def iterations(self) -> np.ndarray:
        return np.array([r.iteration for r in self.rows], dtype=int)


# --- surrogate bookkeeping ----------------------------------------------------------

def _noise_spec(mode: str, p: Problem, em_iterations: int) -> NoiseSpec:
    if mode == "fixed":
        return NoiseSpec("fixed", noise_std=p.noise_std)
    if mode == "known":
        return NoiseSpec("known", sigma_fn=lambda X: p.noise_sigma_at(X)[:, 0])
    if mode == "mlhgp":
        return NoiseSpec("mlhgp", em_iterations=em_iterations)
    return NoiseSpec("inferred")


class _Surrogate:
    """Fits a GP, refitting hyperparameters every ``refit_every`` calls."""

    def __init__(self, m: MethodSection, nspec: NoiseSpec, space=None,
                 kspec: KernelSpec | None = None, transform: Callable | None = None):
        self.cfg = SurrogateConfig(noise=nspec, restarts=m.gp_restarts, maxiter=m.gp_maxiter)
        self.every = m.refit_every
        self.space, self.kspec, self.transform = space, kspec, transform
        self.gp: GpModel | None = None
        self.calls = 0

    def reset(self, kspec: KernelSpec | None = None, transform: Callable | None = None) -> None:
        self.kspec, self.transform, self.gp, self.calls = kspec, transform, None, 0

    def fit(self, X: np.ndarray, y: np.ndarray, rng: np.random.Generator) -> GpModel:
        due = self.gp is None or self.calls % self.every == 0 or self.cfg.noise.mode == "mlhgp"
        self.calls += 1
        if due:
            self.gp = fit_surrogate(self.space, X, y, self.cfg, rng,
                                    init=self.gp.hyper if self.gp is not None else None,
                                    kspec=self.kspec, transform=self.transform)
        else:
            self.gp = rebuild(self.gp, X, y, self.cfg.noise)
        return self.gp


def rebuild(gp: GpModel, X: np.ndarray, y: np.ndarray, nspec: NoiseSpec) -> GpModel:
    """Same hyperparameters, new data."""
    noise_vec = None
    if nspec.mode == "fixed":
        noise_vec = np.full(len(y), nspec.noise_std ** 2)
    elif nspec.mode == "known":
        noise_vec = np.asarray(nspec.sigma_fn(X), dtype=float) ** 2
    return build_gp(X, y, gp.kspec, gp.hyper, noise_vec=noise_vec, standardize=True,
                    transform=gp.transform, noise_fn=gp.noise_fn)


# --- methods -----------------------------------------------------------------------
# Each method object proposes points from the history and may keep state.

@dataclass
class _History:
    X: list = field(default_factory=list)  # points (embeddings for tabular)
    ids: list = field(default_factory=list)  # candidate rows for tabular
    Y: list = field(default_factory=list)  # noisy values, one vector each

    def arrays(self) -> tuple[np.ndarray, np.ndarray]:
        return np.array(self.X, dtype=float), np.array(self.Y, dtype=float)


class _Method:
    has_model = False

    def __init__(self, cfg: ExperimentConfig, p: Problem, rng: np.random.Generator):
        self.cfg, self.p, self.m = cfg, p, cfg.method
        self.opt = AcqOptConfig(restarts=self.m.opt_restarts, raw_samples=self.m.raw_samples)
        self.gp: GpModel | None = None

    def start(self, h: _History) -> None:
        pass

    def propose(self, h: _History, t: int, rng: np.random.Generator) -> list:
        raise NotImplementedError

    def observe(self, h: _History, picks: list, values: np.ndarray) -> None:
        pass

    def model_for_inference(self, h: _History, rng) -> GpModel | None:
        return None


def _unevaluated(p: Problem, h: _History) -> np.ndarray:
    mask = np.zeros(p.table.n, dtype=bool)
    mask[np.asarray(h.ids, dtype=int)] = True
    return mask


class _Random(_Method):
    def propose(self, h, t, rng):
        q = self.m.batch_q
        if self.p.is_tabular:
            free = np.flatnonzero(~_unevaluated(self.p, h))
            return [int(i) for i in rng.choice(free, min(q, free.size), replace=False)]
        return list(uniform_sample(self.p.space, q, rng))


class _Tpe(_Method):
    def __init__(self, cfg, p, rng):
        super().__init__(cfg, p, rng)
        if p.is_tabular:
            raise ConfigError("tpe needs a mixed or continuous space, not a candidate table")
        if p.is_multi_objective:
            raise ConfigError("tpe is single-objective")
        self.state = TpeState(gamma=self.m.tpe_gamma, n_candidates=self.m.tpe_candidates)

    def propose(self, h, t, rng):
        X, Y = h.arrays()
        self.state.X, self.state.y = X, Y[:, 0]
        return [tpe_suggest(self.state, self.p.space, rng) for _ in range(self.m.batch_q)]


def _acq_spec(m: MethodSection, p: Problem, kind: str) -> AcquisitionSpec:
    beta = m.beta
    if kind == "ucb" and beta is None and m.delta is None:
        beta = UCB_BETA_BY_FAMILY.get(p.meta.get("family", ""), 2.0)
    alpha = m.cost_alpha
    if p.is_multi_fidelity and alpha is None and kind in DEFAULT_COST_ALPHA:
        alpha = DEFAULT_COST_ALPHA[kind]
    return AcquisitionSpec(kind, beta=beta, delta=m.delta, mc_samples=m.mc_samples,
                           maxvalue_samples=m.maxvalue_samples,
                           cost_alpha=alpha if p.is_multi_fidelity else None, batch_q=m.batch_q)


class _Gp(_Method):
    """Single-objective GP-based selection over a space or the whole candidate table."""

    has_model = True

    def __init__(self, cfg, p, rng, kind: str | None = None):
        super().__init__(cfg, p, rng)
        if p.is_multi_objective:
            raise ConfigError(f"{self.m.name} is single-objective; use nehvi, parego or nsga2")
        self.kind = kind or self.m.name
        self.spec = _acq_spec(self.m, p, self.kind)
        self.nspec = _noise_spec(self.m.noise, p, self.m.em_iterations)
        self.sur = _Surrogate(self.m, self.nspec, space=p.space)
        fi = p.space.fidelity_index
        self.fid_of = fidelity_extractor(fi) if fi is not None else None
        self.target = (fi, 1.0) if fi is not None else None

    def _fit(self, h, rng) -> GpModel:
        X, Y = h.arrays()
        self.gp = self.sur.fit(X, Y[:, 0], rng)
        return self.gp

    def propose(self, h, t, rng):
        gp = self._fit(h, rng)
        X, Y = h.arrays()
        state = AcqState(X_obs=X, y_obs=Y[:, 0], iteration=t, dim=self.p.space.dim)
        kw = dict(state=state, opt=self.opt, fid_of=self.fid_of, target_fid=self.target,
                  maxvalue_method=self.m.maxvalue_method, seed=int(rng.integers(2 ** 31)))
        if self.p.is_tabular:
            res = select(self.spec, gp, self.m.batch_q, rng, pool=self.p.table.embeddings,
                         exclude=_unevaluated(self.p, h), **kw)
            return [int(i) for i in res.indices]
        return list(select(self.spec, gp, self.m.batch_q, rng, space=self.p.space, **kw).points)

    def model_for_inference(self, h, rng):
        X, Y = h.arrays()
        if self.gp is None:
            return self.sur.fit(X, Y[:, 0], rng)
        if self.nspec.mode == "mlhgp":
            return condition_all(self.gp, X, Y[:, 0])
        return rebuild(self.gp, X, Y[:, 0], self.nspec)


def condition_all(gp: GpModel, X: np.ndarray, y: np.ndarray) -> GpModel:
    """Condition ``gp`` on the rows of ``X`` it has not seen yet (frozen noise model)."""
    g = gp
    for x, v in zip(X[gp.n:], y[gp.n:]):
        g = condition_on_fantasy(g, x, v)
    return g


class _TrustRegion(_Gp):
    """Trust region over the candidate table; dbaxus adds the subspace schedule."""

    def __init__(self, cfg, p, rng):
        if not p.is_tabular:
            raise ConfigError(f"{cfg.method.name} runs on candidate tables (PO problems)")
        super().__init__(cfg, p, rng, kind=cfg.method.acquisition)
        n = p.table.n
        self.ts = initial_tr_state(n, k_min=self.m.k_min, tau_succ=self.m.tau_succ,
                                   tau_fail=self.m.tau_fail)
        self.ss = None
        if self.m.name == "dbaxus":
            budget = cfg.budget.iterations * self.m.batch_q
            self.ss = initial_subspace(p.table.d, budget, rng, d_init=self.m.d_init,
                                       k_min=self.m.k_min, n_total=n)
            self.ts = replace(self.ts, tau_fail=self.ss.tau_fail_stage)
            self.sur.space = None
        self.stage_dim = None
        self.infos: list = []

    def _stage_surrogate(self, Z: np.ndarray) -> None:
        # new projected space: fresh kernel, inputs scaled by the stage's observed range
        lo, hi = Z.min(axis=0), Z.max(axis=0)
        w = np.where(hi > lo, hi - lo, 1.0)
        self.sur.reset(KernelSpec.for_dim(Z.shape[1]), lambda A, lo=lo, w=w: (A - lo) / w)
        self.stage_dim = Z.shape[1]

    def start(self, h):
        self.ts = tr_seed(self.ts, h.ids, np.array(h.Y)[:, 0])

    def _selector(self, t):
        def sel(E_obs, y_obs, E_region, q, rng):
            if self.ss is not None and E_obs.shape[1] != self.stage_dim:
                self._stage_surrogate(np.vstack([E_obs, E_region]))
            self.gp = self.sur.fit(E_obs, y_obs, rng)
            state = AcqState(X_obs=E_obs, y_obs=y_obs, iteration=t, dim=E_obs.shape[1])
            res = select(self.spec, self.gp, q, rng, pool=E_region, state=state, opt=self.opt,
                         maxvalue_method=self.m.maxvalue_method, seed=int(rng.integers(2 ** 31)))
            return res.indices
        return sel

    def propose(self, h, t, rng):
        ids = np.asarray(h.ids, dtype=int)
        y = np.array(h.Y)[:, 0]
        if self.ss is None:
            picks, info = dturbo_step(ids, y, self.p.table.embeddings, self.ts, self._selector(t),
                                      rng, self.m.batch_q)
        else:
            picks, ss, ts, info = dbaxus_step(ids, y, self.p.table.embeddings, self.ss, self.ts,
                                              self._selector(t), rng, self.m.batch_q)
            self.ss, self.ts = ss, ts
        self.infos.append(info)
        return picks

    def observe(self, h, picks, values):
        self.ts = tr_observe(self.ts, picks, values[:, 0])

    def model_for_inference(self, h, rng):
        # dbaxus models a projected space that changes by stage, so it has no full-space mean
        return None if self.ss is not None else super().model_for_inference(h, rng)


class _Nsga2(_Method):
    def __init__(self, cfg, p, rng):
        super().__init__(cfg, p, rng)
        if p.is_tabular:
            raise ConfigError("nsga2 needs a continuous or mixed space")
        self.pop = None

    def start(self, h):
        X, Y = h.arrays()
        n = min(self.m.population, len(X))
        self.pop = environmental_selection(X, Y, n) if len(X) > n else make_population(X, Y)

    def propose(self, h, t, rng):
        raise NotImplementedError("nsga2 runs whole generations; see _run_nsga2")


class _ParEGO(_Gp):
    def __init__(self, cfg, p, rng):
        if not p.is_multi_objective:
            raise ConfigError("parego needs a multi-objective problem")
        _Method.__init__(self, cfg, p, rng)
        self.kind = self.m.acquisition
        self.spec = _acq_spec(self.m, p, self.kind)
        self.nspec = _noise_spec(self.m.noise, p, self.m.em_iterations)
        self.sur = _Surrogate(self.m, self.nspec, space=p.space)
        self.fid_of, self.target = None, None

    def propose(self, h, t, rng):
        X, Y = h.arrays()
        w = random_simplex_weight(Y.shape[1], rng)
        s = parego_scalarize(normalize_objectives(Y), w)
        self.gp = self.sur.fit(X, s, rng)
        state = AcqState(X_obs=X, y_obs=s, iteration=t, dim=self.p.space.dim)
        res = select(self.spec, self.gp, self.m.batch_q, rng, space=self.p.space, state=state,
                     opt=self.opt, maxvalue_method=self.m.maxvalue_method,
                     seed=int(rng.integers(2 ** 31)))
        return list(res.points)

    def model_for_inference(self, h, rng):
        return None


class _Nehvi(_Method):
    def __init__(self, cfg, p, rng):
        super().__init__(cfg, p, rng)
        if not p.is_multi_objective or p.is_tabular:
            raise ConfigError("nehvi needs a multi-objective problem")
        nspec = _noise_spec(self.m.noise, p, self.m.em_iterations)
        self.surs = [_Surrogate(self.m, nspec, space=p.space) for _ in range(p.objective_dim)]
        self.ref = reference_point(p)

    def propose(self, h, t, rng):
        X, Y = h.arrays()
        gps = [s.fit(X, Y[:, j], rng) for j, s in enumerate(self.surs)]
        seed = int(rng.integers(2 ** 31))
        pts = []
        Xb = X
        for _ in range(self.m.batch_q):
            acq = NEHVI(gps, Xb, self.ref, self.m.mc_samples, seed)
            x, _ = optimize_acq(acq, self.p.space, self.opt, rng, X[-1:])
            pts.append(x)
            if len(pts) < self.m.batch_q:
                gps = [condition_on_fantasy(g, x, g.mean_var(x[None])[0]) for g in gps]
                Xb = np.vstack([Xb, x])
        return pts


def make_method(cfg: ExperimentConfig, p: Problem, rng: np.random.Generator) -> _Method:
    name = cfg.method.name
    if name == "random":
        return _Random(cfg, p, rng)
    if name == "tpe":
        return _Tpe(cfg, p, rng)
    if name in GP_METHODS:
        if p.is_multi_objective:
            raise ConfigError(f"{name} is single-objective; use nehvi, parego or nsga2")
        return _Gp(cfg, p, rng)
    if name in TRUST_REGION:
        return _TrustRegion(cfg, p, rng)
    if name == "nsga2":
        return _Nsga2(cfg, p, rng)
    if name == "parego":
        return _ParEGO(cfg, p, rng)
    return _Nehvi(cfg, p, rng)


# --- the loop -------------------------------------------------------------------------

class _BudgetSpent(Exception):
    pass


def posterior_mean_point(gp: GpModel, p: Problem, opt: AcqOptConfig, rng: np.random.Generator,
                         X_obs: np.ndarray) -> Any:
    """Posterior-mean maximizer at the target fidelity (a row index for tabular problems)."""
    if p.is_tabular:
        return int(pool_argmax(PosteriorMean(gp), p.table.embeddings)[0])
    pm = PosteriorMean(gp)
    if p.is_multi_fidelity:
        f = lambda X: pm(p.at_target_fidelity(X))
    else:
        f = pm
    seeds = X_obs[np.argsort(-gp.mean_var(p.at_target_fidelity(X_obs))[0], kind="stable")[:1]]
    x, _ = optimize_acq(f, p.space, opt, rng, p.at_target_fidelity(seeds))
    return p.at_target_fidelity(x)[0]


def _stop(cfg: ExperimentConfig, p: Problem, t: int, cum: float) -> bool:
    if p.is_multi_fidelity:
        return cum >= cfg.budget.cost
    return t > cfg.budget.iterations


class _Recorder:
    def __init__(self, cfg, p, rec: RunRecord, h: _History, rng):
        self.cfg, self.p, self.rec, self.h, self.rng = cfg, p, rec, h, rng
        self.cum = 0.0
        self.best = -math.inf
        self.t = 0

    def evaluate(self, pick, iteration: int, t0: float) -> np.ndarray:
        p = self.p
        if p.is_tabular:
            i = int(pick)
            x = p.table.embeddings[i]
        else:
            x = np.asarray(pick, dtype=float)
        obs = evaluate(p, x, self.rng, iteration)
        f = p.noiseless(p.at_target_fidelity(x))[0]
        self.cum += obs.cost
        if not p.is_multi_objective:
            self.best = max(self.best, float(f[0]))
        wall = (time.perf_counter() - t0) * 1e3
        self.rec.rows.append(Row(iteration, int(pick) if p.is_tabular else x.tolist(), obs.fidelity,
                                 tuple(float(v) for v in obs.values), tuple(float(v) for v in f),
                                 float(obs.cost), float(self.cum),
                                 self.best if not p.is_multi_objective else float("nan"),
                                 None, wall))
        self.h.X.append(x.copy())
        self.h.Y.append(np.asarray(obs.values, dtype=float))
        if p.is_tabular:
            self.h.ids.append(int(pick))
        return obs.values


def run_seed(cfg: ExperimentConfig, seed: int, problem: Problem | None = None) -> RunRecord:
    """One seed of an experiment."""
    p = problem or make_problem(cfg.problem.name, cfg.problem.assets, cfg.problem.noise_std)
    if p.is_multi_fidelity and cfg.budget.cost is None:
        raise ConfigError("multi-fidelity problems need budget.cost")
    rng = np.random.default_rng(seed)
    method = make_method(cfg, p, rng)
    rec = RunRecord(p.name, cfg.method.name, int(seed))
    if p.is_multi_fidelity and cfg.method.name in GP_METHODS:
        rec.meta["cost_scaled"] = True
        if cfg.method.name in ("mes", "gibbon"):
            rec.meta["multi_fidelity_entropy"] = "cost-scaled target-fidelity approximation"
    h = _History()
    r = _Recorder(cfg, p, rec, h, rng)

    t0 = time.perf_counter()
    if p.is_tabular:
        init = [int(i) for i in rng.choice(p.table.n, cfg.budget.n_init, replace=False)]
    else:
        init = list(uniform_sample(p.space, cfg.budget.n_init, rng))
    for x in init:
        r.evaluate(x, 0, t0)
        t0 = time.perf_counter()
    method.start(h)
    _mark_inference(cfg, p, method, h, rec, 0, rng)

    if isinstance(method, _Nsga2):
        _run_nsga2(cfg, p, method, r, rng)
        return rec

    t = 1
    while not _stop(cfg, p, t, r.cum):
        t0 = time.perf_counter()
        picks = method.propose(h, t, rng)
        vals = []
        for pick in picks:
            vals.append(r.evaluate(pick, t, t0))
            t0 = time.perf_counter()
        method.observe(h, picks, np.array(vals))
        _mark_inference(cfg, p, method, h, rec, t, rng)
        t += 1
    if isinstance(method, _TrustRegion):
        rec.meta["forced_expansions"] = sum(i.forced_expansion for i in method.infos)
        rec.meta["stage_advances"] = sum(i.stage_advanced for i in method.infos)
    return rec


def _mark_inference(cfg, p, method, h, rec, t, rng) -> None:
    if not cfg.output.inference or not method.has_model:
        return
    gp = method.model_for_inference(h, rng)
    if gp is None:
        return
    X, _ = h.arrays()
    pt = posterior_mean_point(gp, p, method.opt, rng, X)
    pt = pt if isinstance(pt, int) else [float(v) for v in pt]
    for row in rec.rows:
        if row.iteration == t:
            row.incumbent_mean_point = pt


def _run_nsga2(cfg, p, method: _Nsga2, r: _Recorder, rng) -> None:
    t = [1]

    def ev(K):
        out = []
        for x in K:
            if _stop(cfg, p, t[0], r.cum):
                raise _BudgetSpent
            out.append(r.evaluate(x, t[0], time.perf_counter()))
            t[0] += 1
        return np.array(out)

    try:
        while True:
            method.pop = nsga2_generation(method.pop, p.space, ev, rng)
    except _BudgetSpent:
        pass


def _run_one(args) -> RunRecord:
    cfg_dict, seed = args
    return run_seed(ExperimentConfig.from_dict(cfg_dict), seed)


def run_experiment(cfg: ExperimentConfig) -> list[RunRecord]:
    """Every seed of ``cfg``; problem and method errors surface before any evaluation."""
    p = make_problem(cfg.problem.name, cfg.problem.assets, cfg.problem.noise_std)
    if p.is_multi_fidelity and cfg.budget.cost is None:
        raise ConfigError("multi-fidelity problems need budget.cost")
    make_method(cfg, p, np.random.default_rng(0))  # validates the combination
    if cfg.output.workers > 1 and len(cfg.budget.seeds) > 1:
        with ProcessPoolExecutor(max_workers=cfg.output.workers) as ex:
            return list(ex.map(_run_one, [(cfg.to_dict(), s) for s in cfg.budget.seeds]))
    return [run_seed(cfg, s, p) for s in cfg.budget.seeds]

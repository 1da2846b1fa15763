"""Discretized trust-region search over finite embedding sets.

The trust region is the ``k`` nearest candidates to the incumbent. It doubles
after a run of successes and halves after a run of failures. The subspace
variant searches a sparse random sign projection of the embeddings and
doubles the projected dimension whenever the region has fully contracted.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

K_MIN = 8
TAU_SUCC = 3
TAU_FAIL = 10
D_INIT = 16


class HighDimError(ValueError):
    pass


def knn(embeddings: np.ndarray, center_id: int, k: int, exclude=()) -> np.ndarray:
    """The ``k`` ids nearest to ``center_id``; ties go to the lower id."""
    E = np.asarray(embeddings, dtype=float)
    n = E.shape[0]
    if k < 1 or k > n:
        raise HighDimError(f"k={k} outside [1, {n}]")
    d2 = ((E - E[center_id]) ** 2).sum(axis=1)
    keep = np.ones(n, dtype=bool)
    ex = np.fromiter(exclude, dtype=int) if not isinstance(exclude, np.ndarray) else exclude.astype(int)
    keep[ex] = False
    ids = np.flatnonzero(keep)
    if k > ids.size:
        raise HighDimError(f"k={k} exceeds the {ids.size} candidates left after exclusion")
    order = np.lexsort((ids, d2[ids]))
    return ids[order[:k]]


@dataclass(frozen=True)
class TrustRegionState:
    k: int
    k_init: int
    k_min: int
    n_total: int
    succ_streak: int = 0
    fail_streak: int = 0
    tau_succ: int = TAU_SUCC
    tau_fail: int = TAU_FAIL
    best_id: int = -1
    best_value: float = -math.inf
    contracted: bool = False  # the last update halved k down to k_min

    def __post_init__(self) -> None:
        if not (1 <= self.k_min <= self.k <= self.n_total):
            raise HighDimError(f"need k_min <= k <= N, got {self.k_min}, {self.k}, {self.n_total}")


def initial_tr_state(n_total: int, *, k_min: int = K_MIN, tau_succ: int = TAU_SUCC,
                     tau_fail: int = TAU_FAIL, k_init: int | None = None) -> TrustRegionState:
    k0 = n_total // 2 if k_init is None else k_init
    k_min = min(k_min, n_total)
    k0 = max(k0, k_min)
    return TrustRegionState(k0, k0, k_min, n_total, tau_succ=tau_succ, tau_fail=tau_fail)


def dturbo_update(state: TrustRegionState, improved: bool) -> TrustRegionState:
    if improved:
        s = state.succ_streak + 1
        if s >= state.tau_succ:
            return replace(state, k=min(2 * state.k, state.n_total), succ_streak=0, fail_streak=0,
                           contracted=False)
        return replace(state, succ_streak=s, fail_streak=0, contracted=False)
    f = state.fail_streak + 1
    if f >= state.tau_fail:
        k = max(state.k // 2, state.k_min)
        return replace(state, k=k, succ_streak=0, fail_streak=0,
                       contracted=state.k > state.k_min and k == state.k_min)
    return replace(state, succ_streak=0, fail_streak=f, contracted=False)


def tr_observe(state: TrustRegionState, ids, values) -> TrustRegionState:
    """Apply one batch of results: one update, improvement is strictly greater."""
    ids = list(ids)
    vals = np.asarray(values, dtype=float)
    j = int(np.argmax(vals))
    improved = bool(vals[j] > state.best_value)
    new = dturbo_update(state, improved)
    if improved:
        new = replace(new, best_id=int(ids[j]), best_value=float(vals[j]))
    return new


def tr_seed(state: TrustRegionState, ids, values) -> TrustRegionState:
    """Set the incumbent from initial observations without touching streaks."""
    vals = np.asarray(values, dtype=float)
    j = int(np.argmax(vals))
    return replace(state, best_id=int(list(ids)[j]), best_value=float(vals[j]))


# A selector takes (embeddings of observed ids, observed values, pool of region
# embeddings, q, rng) and returns indices into the pool.
Selector = Callable[[np.ndarray, np.ndarray, np.ndarray, int, np.random.Generator], list]


@dataclass
class StepInfo:
    region_size: int
    forced_expansion: bool = False
    stage_advanced: bool = False
    target_dim: int | None = None


def _region(E: np.ndarray, state: TrustRegionState, evaluated: np.ndarray, q: int) -> tuple[np.ndarray, bool]:
    k = state.k
    forced = False
    while True:
        reg = knn(E, state.best_id, k)
        reg = reg[~evaluated[reg]]
        if reg.size >= min(q, int((~evaluated).sum())) and reg.size > 0:
            return reg, forced
        if k >= E.shape[0]:
            raise HighDimError("every candidate has been evaluated")
        k = min(2 * k, E.shape[0])
        forced = True


def dturbo_step(obs_ids, obs_values, embeddings: np.ndarray, state: TrustRegionState,
                selector: Selector, rng: np.random.Generator, q: int = 1
                ) -> tuple[list[int], StepInfo]:
    """Next ids from the trust region around the incumbent.

    The state is not advanced here; call :func:`tr_observe` once the
    results are in.
    """
    obs_ids = np.asarray(obs_ids, dtype=int)
    if obs_ids.size < 1:
        raise HighDimError("dturbo_step needs at least one observation")
    E = np.asarray(embeddings, dtype=float)
    evaluated = np.zeros(E.shape[0], dtype=bool)
    evaluated[obs_ids] = True
    region, forced = _region(E, state, evaluated, q)
    q_eff = min(q, region.size)
    if region.size == 1:
        return [int(region[0])], StepInfo(1, forced)
    picks = selector(E[obs_ids], np.asarray(obs_values, dtype=float), E[region], q_eff, rng)
    return [int(region[i]) for i in picks], StepInfo(int(region.size), forced)


# --- subspace expansion ------------------------------------------------------

@dataclass(frozen=True)
class SubspaceState:
    target_dim: int
    bins: np.ndarray  # input dim -> target dim
    signs: np.ndarray  # input dim -> +1 / -1
    input_dim: int
    stage_budget: int
    stage_evals_used: int = 0
    tau_fail_stage: int = TAU_FAIL
    dim_schedule: tuple[int, ...] = field(default_factory=tuple)

    def __post_init__(self) -> None:
        if self.bins.shape != (self.input_dim,) or self.signs.shape != (self.input_dim,):
            raise HighDimError("assignment must cover every input dimension")
        if np.any((self.bins < 0) | (self.bins >= self.target_dim)):
            raise HighDimError("bin index out of range")

    @property
    def terminal(self) -> bool:
        return self.target_dim >= self.input_dim


def dim_schedule(d_init: int, d: int) -> tuple[int, ...]:
    out = [min(d_init, d)]
    while out[-1] < d:
        out.append(min(2 * out[-1], d))
    return tuple(out)


def halvings(k_init: int, k_min: int) -> int:
    """Number of floor-halvings (floored at ``k_min``) to go from ``k_init`` to ``k_min``."""
    n, k = 0, k_init
    while k > k_min:
        k = max(k // 2, k_min)
        n += 1
    return n


def tau_fail_for_stage(stage_budget: int, k_init: int, k_min: int) -> int:
    return max(1, math.ceil(stage_budget / max(halvings(k_init, k_min), 1)))


def initial_subspace(d: int, budget: int, rng: np.random.Generator, d_init: int = D_INIT,
                     k_init: int | None = None, k_min: int = K_MIN, n_total: int | None = None
                     ) -> SubspaceState:
    """Random balanced sign assignment into ``d_init`` bins; budget split evenly over stages."""
    sched = dim_schedule(d_init, d)
    t = sched[0]
    perm = rng.permutation(d)
    bins = np.empty(d, dtype=int)
    bins[perm] = np.arange(d) % t
    signs = rng.choice([-1, 1], size=d)
    if t == d:
        bins = np.arange(d)
    sb = max(1, budget // len(sched))
    k0 = k_init if k_init is not None else (n_total // 2 if n_total else K_MIN)
    return SubspaceState(t, bins, signs, d, sb, 0, tau_fail_for_stage(sb, k0, k_min), sched)


def hesbo_project(bins: np.ndarray, signs: np.ndarray, Z: np.ndarray, target_dim: int) -> np.ndarray:
    """``out[:, t] = sum over inputs i in bin t of sign_i * Z[:, i]``."""
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    bins = np.asarray(bins, dtype=int)
    if bins.shape[0] != Z.shape[1]:
        raise HighDimError("assignment does not cover every input dimension")
    P = np.zeros((Z.shape[1], target_dim))
    P[np.arange(Z.shape[1]), bins] = signs
    return Z @ P


def project(ss: SubspaceState, Z: np.ndarray) -> np.ndarray:
    return hesbo_project(ss.bins, ss.signs, Z, ss.target_dim)


def split_bins(ss: SubspaceState, rng: np.random.Generator, k_init: int, k_min: int) -> SubspaceState:
    """Double the target dimension; each bin's inputs are split between two child bins."""
    if ss.terminal:
        raise HighDimError("already at the full dimension")
    new_t = min(2 * ss.target_dim, ss.input_dim)
    if new_t == ss.input_dim:
        bins = np.arange(ss.input_dim)
    else:
        bins = ss.bins.copy()
        nxt = ss.target_dim
        for t in range(ss.target_dim):
            members = np.flatnonzero(ss.bins == t)
            if members.size < 2 or nxt >= new_t:
                continue
            moved = rng.permutation(members)[: members.size // 2]
            bins[moved] = nxt
            nxt += 1
        new_t = max(nxt, ss.target_dim)
    return replace(ss, target_dim=new_t, bins=bins, stage_evals_used=0,
                   tau_fail_stage=tau_fail_for_stage(ss.stage_budget, k_init, k_min))


def dbaxus_step(obs_ids, obs_values, embeddings: np.ndarray, ss: SubspaceState,
                ts: TrustRegionState, selector: Selector, rng: np.random.Generator, q: int = 1
                ) -> tuple[list[int], SubspaceState, TrustRegionState, StepInfo]:
    """One subspace trust-region proposal.

    A region that has contracted to ``k_min`` triggers a stage advance first
    (unless the projection is already the identity, which is plain dTuRBO).
    """
    advanced = False
    if ts.contracted and not ss.terminal:
        ss = split_bins(ss, rng, ts.k_init, ts.k_min)
        ts = replace(ts, k=ts.k_init, succ_streak=0, fail_streak=0, tau_fail=ss.tau_fail_stage,
                     contracted=False)
        advanced = True
    P = embeddings if ss.terminal else project(ss, embeddings)
    ids, info = dturbo_step(obs_ids, obs_values, P, ts, selector, rng, q)
    info.stage_advanced = advanced
    info.target_dim = ss.target_dim
    ss = replace(ss, stage_evals_used=ss.stage_evals_used + len(ids))
    return ids, ss, ts, info

"""Turn an acquisition spec plus a fitted model into concrete next queries."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .acqopt import AcqOptConfig, BatchResult, batch_select, optimize_acq, pool_argmax
from .acquisition import (AcqState, AcquisitionSpec, PosteriorMean, gumbel_sample_max,
                          make_acquisition, thompson_select, thompson_sample_max)
from .gp import GpModel
from .spaces import SearchSpace, uniform_sample

ENTROPY_CANDIDATES = 512


def entropy_candidates(space: SearchSpace, rng: np.random.Generator, n: int = ENTROPY_CANDIDATES,
                       target_fid: tuple[int, float] | None = None,
                       X_obs: np.ndarray | None = None) -> np.ndarray:
    """Candidate set for max-value sampling: uniform (Dirichlet on simplex groups) plus observed."""
    C = uniform_sample(space, n, rng)
    if X_obs is not None and len(X_obs):
        C = np.vstack([C, X_obs])
    if target_fid is not None:
        C = C.copy()
        C[:, target_fid[0]] = target_fid[1]
    return C


def maxvalue_samples(gp: GpModel, candidates: np.ndarray, draws: int, rng: np.random.Generator,
                     method: str, best_mean: float | None = None) -> np.ndarray:
    """``method`` is ``gumbel`` or ``thompson`` (maxima of joint draws)."""
    if method == "thompson":
        return thompson_sample_max(gp, candidates, draws, rng)
    return gumbel_sample_max(gp, candidates, draws, rng, best_mean)


def _seed_points(gp: GpModel, X_obs: np.ndarray | None, k: int = 1) -> np.ndarray | None:
    if X_obs is None or len(X_obs) == 0:
        return None
    mu = gp.mean_var(X_obs)[0]
    return X_obs[np.argsort(-mu, kind="stable")[:k]]


def select(spec: AcquisitionSpec, gp: GpModel, q: int, rng: np.random.Generator, *,
           space: SearchSpace | None = None, pool: np.ndarray | None = None,
           exclude: np.ndarray | None = None, state: AcqState | None = None,
           opt: AcqOptConfig = AcqOptConfig(), fid_of: Callable | None = None,
           target_fid: tuple[int, float] | None = None, maxvalue_method: str = "gumbel",
           seed: int | None = None) -> BatchResult:
    """Choose ``q`` queries from a continuous/mixed ``space`` or a finite ``pool``.

    Thompson sampling draws one joint sample per batch member. Entropy kinds
    draw max values first (at the target fidelity when one is given). Other
    kinds go through sequential greedy conditioning; GIBBON instead passes the
    already-chosen points as pending so its diversity term separates them.
    """
    state = state or AcqState()
    if pool is not None:
        opt = AcqOptConfig(**{**opt.__dict__, "candidate_pool": pool})
    if spec.kind == "ts":
        return _thompson(gp, q, rng, space, pool, exclude, state)
    if spec.kind in ("mes", "gibbon"):
        if pool is not None:
            cands = pool if exclude is None else pool[~exclude]
            if len(cands) > 2048:
                cands = cands[rng.choice(len(cands), 2048, replace=False)]
            if target_fid is not None:
                cands = cands.copy()
                cands[:, target_fid[0]] = target_fid[1]
        else:
            cands = entropy_candidates(space, rng, target_fid=target_fid, X_obs=state.X_obs)
        best = None
        if state.X_obs is not None and len(state.X_obs):
            Xt = state.X_obs.copy()
            if target_fid is not None:
                Xt[:, target_fid[0]] = target_fid[1]
            best = float(gp.mean_var(Xt)[0].max())
        state = AcqState(**{**state.__dict__,
                            "fmax_samples": maxvalue_samples(gp, cands, spec.maxvalue_samples, rng,
                                                             maxvalue_method, best)})
    seeds = _seed_points(gp, state.X_obs)
    if seed is None:
        seed = int(rng.integers(2 ** 31))

    def make(g: GpModel, pending: np.ndarray | None) -> Callable:
        st = AcqState(**{**state.__dict__, "pending": pending})
        return make_acquisition(spec, g, st, seed, fid_of)

    fantasize = spec.kind != "gibbon"
    return batch_select(make, gp, q, space, opt, rng, fantasize=fantasize, exclude=exclude,
                        seeds=seeds, distinct=True)


def _thompson(gp, q, rng, space, pool, exclude, state) -> BatchResult:
    pts, idxs = [], []
    if pool is not None:
        avail = np.flatnonzero(~exclude) if exclude is not None else np.arange(len(pool))
        if len(avail) < q:
            raise ValueError("pool smaller than q")
        for _ in range(q):
            x = thompson_select(gp, pool[avail], rng)
            j = int(avail[np.flatnonzero((pool[avail] == x).all(axis=1))[0]])
            idxs.append(j)
            pts.append(pool[j].copy())
            avail = avail[avail != j]
        return BatchResult(pts, idxs, [float("nan")] * q)
    for _ in range(q):
        cands = entropy_candidates(space, rng, n=1024, X_obs=state.X_obs)
        pts.append(thompson_select(gp, cands, rng))
    return BatchResult(pts, None, [float("nan")] * q)


def posterior_mean_argmax(gp: GpModel, rng: np.random.Generator, *, space: SearchSpace | None = None,
                          pool: np.ndarray | None = None, opt: AcqOptConfig = AcqOptConfig(),
                          X_obs: np.ndarray | None = None) -> np.ndarray:
    """Maximizer of the posterior mean with the same optimizer as the acquisitions."""
    acq = PosteriorMean(gp)
    if pool is not None:
        return pool[pool_argmax(acq, pool)[0]].copy()
    return optimize_acq(acq, space, opt, rng, _seed_points(gp, X_obs))[0]


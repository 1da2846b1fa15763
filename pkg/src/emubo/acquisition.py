"""Acquisition functions built on a fitted :class:`~emubo.gp.GpModel`.

Every acquisition is a callable mapping a raw ``(m, p)`` batch to ``(m,)``
scores, higher is better. Construction does the per-iteration work (pruned
baseline draws, max-value samples) so repeated calls from the optimizer are
cheap.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import erfcx, log_ndtr, ndtr
from scipy.stats import norm, qmc

from .gp import GpModel, kernel, robust_cholesky, sample_posterior

KINDS = ("ts", "log_ei", "log_nei", "ucb", "mes", "gibbon")
LOG_KINDS = ("log_ei", "log_nei")
# Cost-scale defaults per acquisition kind for multi-fidelity problems.
DEFAULT_COST_ALPHA = {"ucb": 0.005, "log_ei": 0.01, "log_nei": 0.05, "mes": 0.05, "gibbon": 0.05}
LOG_FLOOR = 1e-300
_C1 = 0.5 * math.log(2 * math.pi)
_C2 = 0.5 * math.log(math.pi / 2)


class AcquisitionError(ValueError):
    pass


@dataclass(frozen=True)
class AcquisitionSpec:
    kind: str = "log_nei"
    beta: float | None = None  # ucb; None means the scheduled beta_t
    delta: float | None = None  # required for scheduled ucb
    mc_samples: int = 128
    maxvalue_samples: int = 16
    cost_alpha: float | None = None
    batch_q: int = 1

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise AcquisitionError(f"unknown acquisition kind {self.kind!r}")
        if self.mc_samples < 1:
            raise AcquisitionError("mc_samples must be >= 1")
        if self.cost_alpha is not None and self.cost_alpha < 0:
            raise AcquisitionError("cost_alpha must be >= 0")
        if self.batch_q < 1:
            raise AcquisitionError("batch_q must be >= 1")
        if self.kind == "ucb" and self.beta is None and self.delta is None:
            raise AcquisitionError("scheduled ucb needs delta")


@dataclass
class AcqState:
    """Everything an acquisition needs beyond the model."""

    X_obs: np.ndarray | None = None
    y_obs: np.ndarray | None = None
    fmax_samples: np.ndarray | None = None
    pending: np.ndarray | None = None
    iteration: int = 1
    dim: int = 1


# --- numerics ----------------------------------------------------------------

def log_h(z: np.ndarray) -> np.ndarray:
    """``log(phi(z) + z * Phi(z))`` evaluated stably for all ``z``."""
    z = np.asarray(z, dtype=float)
    out = np.empty_like(z)
    big = z > -1
    zb = z[big]
    out[big] = np.log(norm.pdf(zb) + zb * ndtr(zb))
    zs = z[~big]
    very = zs < -1e8
    mid = ~very
    zm = zs[mid]
    t = np.log(erfcx(-zm / math.sqrt(2)) * np.abs(zm)) + _C2
    # log1mexp(t) for t < 0
    l1me = np.where(t > -math.log(2), np.log(-np.expm1(t)), np.log1p(-np.exp(t)))
    res = np.empty_like(zs)
    res[mid] = -0.5 * zm * zm - _C1 + l1me
    zv = np.maximum(zs[very], -1e150)  # keeps z**2 finite
    res[very] = -0.5 * zv ** 2 - _C1 - 2 * np.log(np.abs(zv))
    out[~big] = res
    return out


def log_softplus(x: np.ndarray, tau: float = 1e-6) -> np.ndarray:
    """``log(tau * softplus(x / tau))``: a smooth, finite stand-in for ``log(max(x, 0))``."""
    u = np.asarray(x, dtype=float) / tau
    sp_log = np.where(u > 30, np.log(np.maximum(u, 1e-300)),
                      np.log(np.log1p(np.exp(np.clip(u, -30, 30)))))
    # deep negative tail: softplus(u) ~ exp(u)
    sp_log = np.where(u < -30, u, sp_log)
    return math.log(tau) + sp_log


def logmeanexp(a: np.ndarray, axis: int = 0) -> np.ndarray:
    m = np.max(a, axis=axis, keepdims=True)
    return (m + np.log(np.mean(np.exp(a - m), axis=axis, keepdims=True))).squeeze(axis)


def sobol_normal(n: int, dim: int, seed: int | None) -> np.ndarray:
    """Scrambled-Sobol quasi-normal base samples, ``(n, dim)``."""
    import warnings
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)
        U = qmc.Sobol(dim, scramble=True, seed=seed).random(n)
    return norm.ppf(np.clip(U, 1e-10, 1 - 1e-10))


def ucb_beta_schedule(t: int, d: int, delta: float) -> float:
    """``2 log(d t^2 pi^2 / (6 delta))``, clamped below at 0.01."""
    if t < 1:
        raise AcquisitionError("t must be >= 1")
    return max(2.0 * math.log(d * t * t * math.pi ** 2 / (6.0 * delta)), 0.01)


# --- analytic kinds -------------------------------------------------------------

def _std(var: np.ndarray) -> np.ndarray:
    return np.sqrt(np.maximum(var, 0.0))


class LogEI:
    def __init__(self, gp: GpModel, best_f: float):
        self.gp, self.best_f = gp, float(best_f)

    def __call__(self, X: np.ndarray) -> np.ndarray:
        mu, var = self.gp.mean_var(X)
        sd = _std(var)
        out = np.empty_like(mu)
        tiny = sd < 1e-12
        out[tiny] = np.log(np.maximum(mu[tiny] - self.best_f, LOG_FLOOR))
        z = (mu[~tiny] - self.best_f) / sd[~tiny]
        out[~tiny] = np.log(sd[~tiny]) + log_h(z)
        return out


def expected_improvement(mu: np.ndarray, sd: np.ndarray, best_f: float) -> np.ndarray:
    """Plain analytic EI; the reference the log form must agree with."""
    mu, sd = np.asarray(mu, float), np.asarray(sd, float)
    with np.errstate(divide="ignore", invalid="ignore"):
        z = (mu - best_f) / sd
        ei = sd * (norm.pdf(z) + z * norm.cdf(z))
    return np.where(sd > 0, ei, np.maximum(mu - best_f, 0.0))


class UCB:
    def __init__(self, gp: GpModel, beta: float):
        self.gp, self.beta = gp, float(beta)

    def __call__(self, X: np.ndarray) -> np.ndarray:
        mu, var = self.gp.mean_var(X)
        return mu + math.sqrt(self.beta) * _std(var)


class PosteriorMean:
    def __init__(self, gp: GpModel):
        self.gp = gp

    def __call__(self, X: np.ndarray) -> np.ndarray:
        return self.gp.mean_var(X)[0]


# --- Monte Carlo noisy EI ---------------------------------------------------------

class LogNEI:
    """Log noisy expected improvement from joint draws at baseline and query.

    The baseline is the model's training inputs, pruned to those that are the
    maximizer in at least one draw. Baseline values come from QMC draws; given
    each baseline draw the query value is Gaussian, so its expected
    improvement over that draw's best is taken in closed form (``log_h``).
    A query with no residual variance falls back to ``log_softplus``.
    """

    def __init__(self, gp: GpModel, mc_samples: int = 128, seed: int | None = 0,
                 prune: bool = True, tau: float = 1e-6):
        self.gp, self.tau = gp, tau
        h = gp.hyper
        if gp.n == 0:
            raise AcquisitionError("log_nei needs at least one observation")
        Zb = gp.X
        idx = np.arange(gp.n)
        base = sobol_normal(mc_samples, gp.n, seed)
        if prune and gp.n > 1:
            fb = self._baseline_draws(Zb, base[:, :gp.n])
            winners = np.unique(np.argmax(fb, axis=1))
            idx = winners
        self.Zp = Zb[idx]
        self.zb = base[:, :len(idx)]
        Kbp = kernel(gp.kspec, h, gp.X, self.Zp)
        self.Vp = solve_triangular(gp.L, Kbp, lower=True, check_finite=False)
        mu_p = h.mean + Kbp.T @ gp.alpha
        S = kernel(gp.kspec, h, self.Zp, self.Zp) - self.Vp.T @ self.Vp
        self.Lp, _ = robust_cholesky(0.5 * (S + S.T) + 1e-9 * np.eye(len(idx)), jitter=1e-8)
        self.best = np.max(mu_p + self.zb @ self.Lp.T, axis=1)  # standardized units

    def _baseline_draws(self, Zb: np.ndarray, z: np.ndarray) -> np.ndarray:
        gp, h = self.gp, self.gp.hyper
        Kb = kernel(gp.kspec, h, gp.X, Zb)
        V = solve_triangular(gp.L, Kb, lower=True, check_finite=False)
        S = kernel(gp.kspec, h, Zb, Zb) - V.T @ V
        L, _ = robust_cholesky(0.5 * (S + S.T) + 1e-9 * np.eye(len(Zb)), jitter=1e-8)
        return h.mean + Kb.T @ gp.alpha + z @ L.T

    def __call__(self, X: np.ndarray) -> np.ndarray:
        gp, h = self.gp, self.gp.hyper
        Z = gp.encode(X)
        out = np.empty(Z.shape[0])
        for s in range(0, Z.shape[0], 2048):
            Zc = Z[s:s + 2048]
            Kx = kernel(gp.kspec, h, gp.X, Zc)
            V = solve_triangular(gp.L, Kx, lower=True, check_finite=False)
            mu = h.mean + Kx.T @ gp.alpha
            var = h.scales.sum() - (V * V).sum(0)
            C = kernel(gp.kspec, h, self.Zp, Zc) - self.Vp.T @ V
            A = solve_triangular(self.Lp, C, lower=True, check_finite=False)
            csd = np.sqrt(np.maximum(var - (A * A).sum(0), 0.0))
            gap = mu + self.zb @ A - self.best[:, None]
            # the query's residual given the baseline draw is Gaussian, so its
            # improvement is integrated in closed form rather than sampled
            vals = np.empty_like(gap)
            ok = csd > 1e-12
            vals[:, ok] = np.log(gp.y_scale * csd[ok]) + log_h(gap[:, ok] / csd[ok])
            vals[:, ~ok] = log_softplus(gp.y_scale * gap[:, ~ok], self.tau)
            out[s:s + 2048] = logmeanexp(vals, axis=0)
        return out


# --- max-value entropy --------------------------------------------------------------

def gumbel_sample_max(gp: GpModel, candidates: np.ndarray, draws: int,
                      rng: np.random.Generator | int | None = None,
                      best_mean: float | None = None) -> np.ndarray:
    """Max-value samples from a Gumbel fit to the product of marginal CDFs.

    Quartiles of ``P(f* < y) = prod_i Phi((y - mu_i) / sd_i)`` are found by
    bisection and matched to a Gumbel; samples are floored at ``best_mean``.
    """
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    mu, var = gp.mean_var(candidates)
    sd = _std(var)
    floor = float(mu.max()) if best_mean is None else max(float(best_mean), float(mu.max()) if np.all(sd == 0) else float(best_mean))
    if np.all(sd <= 1e-12):
        return np.full(draws, float(mu.max()))

    def log_cdf(y: float) -> float:
        ok = sd > 1e-12
        v = log_ndtr((y - mu[ok]) / sd[ok]).sum()
        if np.any(mu[~ok] > y):
            return -np.inf
        return float(v)

    lo = float((mu - 5 * sd).max())
    hi = float((mu + 5 * sd).max())
    while log_cdf(lo) > math.log(0.01):
        lo -= (hi - lo)
    while log_cdf(hi) < math.log(0.99):
        hi += (hi - lo)

    def quantile(p: float) -> float:
        a, b = lo, hi
        lp = math.log(p)
        for _ in range(100):
            m = 0.5 * (a + b)
            if log_cdf(m) < lp:
                a = m
            else:
                b = m
        return 0.5 * (a + b)

    q1, q2, q3 = quantile(0.25), quantile(0.5), quantile(0.75)
    b = (q1 - q3) / (math.log(math.log(4.0 / 3.0)) - math.log(math.log(4.0)))
    a = q2 + b * math.log(math.log(2.0))
    u = rng.random(draws)
    samples = a - b * np.log(-np.log(u))
    return np.maximum(samples, floor + 1e-9 * max(1.0, abs(floor)))


def thompson_sample_max(gp: GpModel, candidates: np.ndarray, draws: int,
                        rng: np.random.Generator | int | None = None) -> np.ndarray:
    """Max-value samples as the maxima of joint posterior draws on ``candidates``."""
    return sample_posterior(gp, candidates, draws, rng).max(axis=1)


class MES:
    def __init__(self, gp: GpModel, fmax: np.ndarray):
        self.gp, self.fmax = gp, np.asarray(fmax, dtype=float)

    def __call__(self, X: np.ndarray) -> np.ndarray:
        mu, var = self.gp.mean_var(X)
        sd = np.maximum(_std(var), 1e-12)
        g = (self.fmax[:, None] - mu[None, :]) / sd[None, :]
        lcdf = log_ndtr(g)
        ratio = np.exp(norm.logpdf(g) - lcdf)
        val = 0.5 * g * ratio - lcdf
        return np.maximum(val, 0.0).mean(axis=0)


class GIBBON:
    """Single-point GIBBON bound plus the log-determinant diversity term.

    With ``pending`` points, the diversity term is
    ``0.5 * log det C`` of the noisy-observation correlation matrix over
    ``pending + [x]``; only the part that depends on ``x`` is computed.
    """

    def __init__(self, gp: GpModel, fmax: np.ndarray, pending: np.ndarray | None = None):
        self.gp, self.fmax = gp, np.asarray(fmax, dtype=float)
        self.pending = None if pending is None or len(pending) == 0 else np.atleast_2d(pending)
        if self.pending is not None:
            _, Spp = gp.posterior(self.pending)
            Spp = Spp + np.diag(gp.noise_var(self.pending))
            dp = np.sqrt(np.diag(Spp))
            self.Cpp_L, _ = robust_cholesky(Spp / np.outer(dp, dp))
            self.dp = dp

    def __call__(self, X: np.ndarray) -> np.ndarray:
        gp = self.gp
        mu, var = gp.mean_var(X)
        nvar = gp.noise_var(X)
        sd = np.maximum(_std(var), 1e-12)
        rho2 = var / np.maximum(var + nvar, 1e-300)
        g = (self.fmax[:, None] - mu[None, :]) / sd[None, :]
        r = np.exp(norm.logpdf(g) - log_ndtr(g))
        inner = np.clip(1.0 - rho2[None, :] * r * (g + r), 1e-300, None)
        val = (-0.5 * np.log(inner)).mean(axis=0)
        if self.pending is not None:
            cov = gp.cross_cov(self.pending, X)
            dx = np.sqrt(var + nvar)
            c = cov / (self.dp[:, None] * dx[None, :])
            a = solve_triangular(self.Cpp_L, c, lower=True, check_finite=False)
            schur = np.clip(1.0 - (a * a).sum(0), 1e-300, None)
            val = val + 0.5 * np.log(schur)
        return val


# --- cost scaling and dispatch --------------------------------------------------

class CostScaled:
    """Divide by ``c(x) = alpha * fid(x) + 1``, or subtract ``log c(x)`` for log kinds."""

    def __init__(self, base: Callable, alpha: float, fid_of: Callable[[np.ndarray], np.ndarray],
                 log_kind: bool):
        self.base, self.alpha, self.fid_of, self.log_kind = base, float(alpha), fid_of, log_kind

    def __call__(self, X: np.ndarray) -> np.ndarray:
        v = self.base(X)
        c = self.alpha * self.fid_of(np.atleast_2d(X)) + 1.0
        return v - np.log(c) if self.log_kind else v / c


def cost_scaled(base: Callable, kind: str, fid_of: Callable[[np.ndarray], np.ndarray] | None,
                alpha: float | None = None) -> CostScaled:
    if fid_of is None:
        raise AcquisitionError("cost scaling needs a fidelity dimension")
    a = DEFAULT_COST_ALPHA[kind] if alpha is None else alpha
    return CostScaled(base, a, fid_of, kind in LOG_KINDS)


def fidelity_extractor(index: int) -> Callable[[np.ndarray], np.ndarray]:
    return lambda X: np.atleast_2d(X)[:, index]


def best_posterior_mean(gp: GpModel, X_obs: np.ndarray) -> float:
    return float(gp.mean_var(X_obs)[0].max())


def make_acquisition(spec: AcquisitionSpec, gp: GpModel, state: AcqState,
                     seed: int | None = 0, fid_of: Callable | None = None) -> Callable:
    """Build the acquisition callable for ``spec``; wraps in cost scaling if asked."""
    k = spec.kind
    if k == "log_ei":
        if state.X_obs is None or len(state.X_obs) == 0:
            raise AcquisitionError("log_ei needs observed points for its incumbent")
        acq: Callable = LogEI(gp, best_posterior_mean(gp, state.X_obs))
    elif k == "log_nei":
        acq = LogNEI(gp, spec.mc_samples, seed)
    elif k == "ucb":
        beta = spec.beta if spec.beta is not None else ucb_beta_schedule(state.iteration, state.dim, spec.delta)
        acq = UCB(gp, beta)
    elif k in ("mes", "gibbon"):
        if state.fmax_samples is None:
            raise AcquisitionError(f"{k} needs max-value samples in the state")
        acq = MES(gp, state.fmax_samples) if k == "mes" else GIBBON(gp, state.fmax_samples, state.pending)
    else:
        raise AcquisitionError("ts is a selection rule, not a scored acquisition; use thompson_select")
    if spec.cost_alpha is not None or fid_of is not None:
        acq = cost_scaled(acq, k, fid_of, spec.cost_alpha)
    return acq


def acq_value(spec: AcquisitionSpec, gp: GpModel, x: np.ndarray, state: AcqState,
              seed: int | None = 0, fid_of: Callable | None = None) -> float:
    return float(make_acquisition(spec, gp, state, seed, fid_of)(np.atleast_2d(x))[0])


def thompson_select(gp: GpModel, candidates: np.ndarray, rng: np.random.Generator | int | None,
                    max_joint: int = 4000) -> np.ndarray:
    """Argmax of one joint posterior draw over ``candidates``.

    Pools larger than ``max_joint`` are subsampled uniformly first to keep the
    joint covariance factorization tractable.
    """
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    C = np.atleast_2d(candidates)
    if C.shape[0] == 1:
        return C[0].copy()
    idx = np.arange(C.shape[0])
    if C.shape[0] > max_joint:
        idx = np.sort(rng.choice(C.shape[0], max_joint, replace=False))
    draw = sample_posterior(gp, C[idx], 1, rng)[0]
    return C[idx[int(np.argmax(draw))]].copy()

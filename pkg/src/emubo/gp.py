"""Exact Gaussian-process surrogates.

The kernel is an ARD RBF over continuous and ordinal inputs, a Hamming
kernel over categorical codes, and for mixed inputs the sum-and-product
combination ``s0*k_rbf + s1*k_ham + s2*k_rbf*k_ham``. Hyperparameters are
MAP estimates under a log-normal lengthscale prior whose median grows as
``sqrt(d)``. Targets are standardized internally; every public method takes
and returns values in the caller's units.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
from scipy.linalg import cho_solve, solve_triangular
from scipy.optimize import minimize

JITTER_START = 1e-6
JITTER_MAX = 1e-2
NOISE_FLOOR = 1e-8
_LOG2PI = math.log(2 * math.pi)


class GPError(RuntimeError):
    pass


@dataclass(frozen=True)
class KernelSpec:
    cont_dims: tuple[int, ...]
    cat_dims: tuple[int, ...] = ()
    ls_prior_const: float = 1.0
    ls_prior_scale: float = math.sqrt(3.0)

    @property
    def dim(self) -> int:
        return len(self.cont_dims) + len(self.cat_dims)

    @property
    def n_scales(self) -> int:
        return 3 if self.cont_dims and self.cat_dims else 1

    @property
    def ls_prior_loc(self) -> float:
        return math.log(self.ls_prior_const * math.sqrt(max(self.dim, 1)))

    @classmethod
    def for_dim(cls, d: int) -> KernelSpec:
        return cls(tuple(range(d)))


@dataclass(frozen=True)
class NoiseSpec:
    """How observation noise enters the model.

    ``mode`` is one of ``inferred`` (learned homoscedastic), ``fixed``
    (homoscedastic ``noise_std``), ``known`` (``sigma_fn(X)`` gives per-point
    std in target units) or ``mlhgp`` (see :func:`mlhgp_fit`).
    """

    mode: str = "inferred"
    noise_std: float | None = None
    sigma_fn: Callable[[np.ndarray], np.ndarray] | None = None
    em_iterations: int = 5

    def __post_init__(self) -> None:
        if self.mode not in ("inferred", "fixed", "known", "mlhgp"):
            raise ValueError(f"unknown noise mode {self.mode!r}")
        if self.mode == "fixed" and (self.noise_std is None or self.noise_std < 0):
            raise ValueError("fixed noise needs noise_std >= 0")
        if self.mode == "known" and self.sigma_fn is None:
            raise ValueError("known noise needs sigma_fn")


@dataclass(frozen=True)
class Hyper:
    ls_cont: np.ndarray
    ls_cat: np.ndarray
    scales: np.ndarray
    noise: float  # homoscedastic noise variance, standardized units
    mean: float

    def to_dict(self) -> dict:
        return {"ls_cont": self.ls_cont.tolist(), "ls_cat": self.ls_cat.tolist(),
                "scales": self.scales.tolist(), "noise": self.noise, "mean": self.mean}


def default_hyper(kspec: KernelSpec, noise: float = 1e-2) -> Hyper:
    ls = math.exp(kspec.ls_prior_loc)
    return Hyper(np.full(len(kspec.cont_dims), ls), np.full(len(kspec.cat_dims), ls),
                 np.ones(kspec.n_scales), noise, 0.0)


def _rbf(A: np.ndarray, B: np.ndarray, ls: np.ndarray) -> np.ndarray:
    As, Bs = A / ls, B / ls
    d2 = (As * As).sum(1)[:, None] + (Bs * Bs).sum(1)[None, :] - 2.0 * As @ Bs.T
    return np.exp(-0.5 * np.maximum(d2, 0.0))


def _hamming(A: np.ndarray, B: np.ndarray, ls: np.ndarray) -> np.ndarray:
    S = np.zeros((A.shape[0], B.shape[0]))
    for j in range(A.shape[1]):
        S += (A[:, j][:, None] != B[:, j][None, :]) / ls[j]
    return np.exp(-S)


def kernel_parts(kspec: KernelSpec, h: Hyper, A: np.ndarray, B: np.ndarray):
    Kc = _rbf(A[:, kspec.cont_dims], B[:, kspec.cont_dims], h.ls_cont) if kspec.cont_dims else None
    Kh = _hamming(A[:, kspec.cat_dims], B[:, kspec.cat_dims], h.ls_cat) if kspec.cat_dims else None
    return Kc, Kh


def kernel(kspec: KernelSpec, h: Hyper, A: np.ndarray, B: np.ndarray) -> np.ndarray:
    Kc, Kh = kernel_parts(kspec, h, A, B)
    s = h.scales
    if Kc is not None and Kh is not None:
        return s[0] * Kc + s[1] * Kh + s[2] * Kc * Kh
    if Kc is not None:
        return s[0] * Kc
    if Kh is not None:
        return s[0] * Kh
    return np.full((A.shape[0], B.shape[0]), s[0])


def kernel_diag(kspec: KernelSpec, h: Hyper, n: int) -> np.ndarray:
    return np.full(n, float(h.scales.sum()))


def robust_cholesky(K: np.ndarray, jitter: float = JITTER_START,
                    max_jitter: float = JITTER_MAX) -> tuple[np.ndarray, float]:
    """Cholesky factor with escalating diagonal jitter; returns ``(L, jitter_used)``."""
    try:
        return np.linalg.cholesky(K), 0.0
    except np.linalg.LinAlgError:
        pass
    scale = max(float(np.mean(np.diag(K))), 1e-12)
    j = jitter
    eye = np.eye(K.shape[0])
    while j <= max_jitter * (1 + 1e-9):
        try:
            return np.linalg.cholesky(K + j * scale * eye), j
        except np.linalg.LinAlgError:
            j *= 10
    raise GPError("matrix not positive definite after maximum jitter")


@dataclass(frozen=True)
class GpModel:
    """A fitted exact GP. Immutable; conditioning returns a new model."""

    X: np.ndarray  # encoded inputs (n, p)
    y: np.ndarray  # standardized targets (n,)
    noise_vec: np.ndarray  # per-point noise variance, standardized
    hyper: Hyper
    kspec: KernelSpec
    y_mean: float = 0.0
    y_scale: float = 1.0
    L: np.ndarray | None = None
    alpha: np.ndarray | None = None
    transform: Callable[[np.ndarray], np.ndarray] | None = None
    noise_fn: Callable[[np.ndarray], np.ndarray] | None = None  # raw X -> noise var, target units
    info: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return int(self.X.shape[0])

    def encode(self, Xq: np.ndarray) -> np.ndarray:
        Xq = np.atleast_2d(np.asarray(Xq, dtype=float))
        return self.transform(Xq) if self.transform is not None else Xq

    def _check(self, Z: np.ndarray) -> None:
        if self.n and Z.shape[1] != self.X.shape[1]:
            raise GPError(f"query has {Z.shape[1]} columns, model expects {self.X.shape[1]}")

    # --- posterior in standardized units on encoded inputs -------------------
    def _mean_var_z(self, Z: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray | None]:
        h = self.hyper
        kss = kernel_diag(self.kspec, h, Z.shape[0])
        if self.n == 0:
            return np.full(Z.shape[0], h.mean), kss, None
        Ks = kernel(self.kspec, h, self.X, Z)
        mu = h.mean + Ks.T @ self.alpha
        V = solve_triangular(self.L, Ks, lower=True, check_finite=False)
        var = np.maximum(kss - (V * V).sum(0), 0.0)
        return mu, var, V

    def mean_var(self, Xq: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Marginal posterior mean and variance of the latent function."""
        Z = self.encode(Xq)
        self._check(Z)
        mu, var, _ = self._mean_var_z(Z)
        return self.y_mean + self.y_scale * mu, self.y_scale ** 2 * var

    def posterior(self, Xq: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Joint posterior mean and covariance of the latent function at ``Xq``."""
        Z = self.encode(Xq)
        self._check(Z)
        h = self.hyper
        Kqq = kernel(self.kspec, h, Z, Z)
        if self.n == 0:
            mu = np.full(Z.shape[0], h.mean)
            S = Kqq
        else:
            Ks = kernel(self.kspec, h, self.X, Z)
            mu = h.mean + Ks.T @ self.alpha
            V = solve_triangular(self.L, Ks, lower=True, check_finite=False)
            S = Kqq - V.T @ V
        S = 0.5 * (S + S.T)
        d = np.diag_indices_from(S)
        S[d] = np.maximum(S[d], 0.0)
        return self.y_mean + self.y_scale * mu, self.y_scale ** 2 * S

    def cross_cov(self, A: np.ndarray, B: np.ndarray) -> np.ndarray:
        """Posterior covariance between latent values at ``A`` and ``B``."""
        ZA, ZB = self.encode(A), self.encode(B)
        h = self.hyper
        K = kernel(self.kspec, h, ZA, ZB)
        if self.n:
            VA = solve_triangular(self.L, kernel(self.kspec, h, self.X, ZA), lower=True, check_finite=False)
            VB = solve_triangular(self.L, kernel(self.kspec, h, self.X, ZB), lower=True, check_finite=False)
            K = K - VA.T @ VB
        return self.y_scale ** 2 * K

    def noise_var(self, Xq: np.ndarray) -> np.ndarray:
        """Observation-noise variance at raw points ``Xq`` in target units."""
        Xq = np.atleast_2d(np.asarray(Xq, dtype=float))
        if self.noise_fn is not None:
            return np.maximum(np.asarray(self.noise_fn(Xq), dtype=float), 0.0)
        return np.full(Xq.shape[0], self.hyper.noise * self.y_scale ** 2)

    def log_marginal_likelihood(self) -> float:
        """Log evidence of the standardized targets."""
        if self.n == 0:
            return 0.0
        r = self.y - self.hyper.mean
        return float(-0.5 * r @ self.alpha - np.log(np.diag(self.L)).sum() - 0.5 * self.n * _LOG2PI)

    @property
    def signal_var(self) -> float:
        return float(self.hyper.scales.sum()) * self.y_scale ** 2

    def to_dict(self) -> dict:
        return {"hyper": self.hyper.to_dict(), "n": self.n, "y_mean": self.y_mean,
                "y_scale": self.y_scale, "info": {k: v for k, v in self.info.items()
                                                  if isinstance(v, (int, float, str, bool))}}


def _build(X: np.ndarray, ys: np.ndarray, noise_vec: np.ndarray, h: Hyper, kspec: KernelSpec,
           **kw) -> GpModel:
    n = X.shape[0]
    if n == 0:
        return GpModel(X, ys, noise_vec, h, kspec, L=np.zeros((0, 0)), alpha=np.zeros(0), **kw)
    K = kernel(kspec, h, X, X) + np.diag(noise_vec)
    L, jit = robust_cholesky(K)
    alpha = cho_solve((L, True), ys - h.mean, check_finite=False)
    info = dict(kw.pop("info", {}) or {})
    info["jitter"] = jit
    return GpModel(X, ys, noise_vec, h, kspec, L=L, alpha=alpha, info=info, **kw)


def build_gp(X: np.ndarray, y: np.ndarray, kspec: KernelSpec, hyper: Hyper, *,
             noise_vec: np.ndarray | None = None, standardize: bool = False,
             transform: Callable | None = None, noise_fn: Callable | None = None) -> GpModel:
    """Assemble a GP from fixed hyperparameters (no fitting).

    ``noise_vec``, when given, is the per-point noise variance in target units
    and replaces the homoscedastic ``hyper.noise``.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float)) if len(X) else np.zeros((0, len(kspec.cont_dims) + len(kspec.cat_dims)))
    y = np.asarray(y, dtype=float).ravel()
    y_mean, y_scale = _standardizer(y) if standardize else (0.0, 1.0)
    Z = transform(X) if transform is not None and len(X) else X
    ys = (y - y_mean) / y_scale
    nv = (np.full(len(y), hyper.noise) if noise_vec is None
          else np.maximum(np.asarray(noise_vec, dtype=float) / y_scale ** 2, NOISE_FLOOR))
    return _build(Z, ys, nv, hyper, kspec, y_mean=y_mean, y_scale=y_scale,
                  transform=transform, noise_fn=noise_fn)


def _standardizer(y: np.ndarray) -> tuple[float, float]:
    if y.size == 0:
        return 0.0, 1.0
    m = float(y.mean())
    s = float(y.std()) if y.size > 1 else 0.0
    return m, (s if s > 1e-12 else 1.0)


# --- MAP fitting -------------------------------------------------------------

class _Objective:
    """Negative log posterior over packed log-hyperparameters, with gradient."""

    def __init__(self, Z, ys, kspec: KernelSpec, fixed_noise: np.ndarray | None,
                 learn_noise: bool):
        self.Z, self.ys, self.k = Z, ys, kspec
        self.fixed_noise = fixed_noise
        self.learn_noise = learn_noise
        self.dc, self.dh, self.ns = len(kspec.cont_dims), len(kspec.cat_dims), kspec.n_scales
        self.Zc = Z[:, kspec.cont_dims]
        self.mis = [(Z[:, j][:, None] != Z[:, j][None, :]).astype(float) for j in kspec.cat_dims]

    @property
    def size(self) -> int:
        return self.dc + self.dh + self.ns + int(self.learn_noise) + 1

    def unpack(self, th: np.ndarray) -> Hyper:
        i = 0
        lc = np.exp(th[i:i + self.dc]); i += self.dc
        lh = np.exp(th[i:i + self.dh]); i += self.dh
        sc = np.exp(th[i:i + self.ns]); i += self.ns
        nz = float(np.exp(th[i])) if self.learn_noise else 0.0
        i += int(self.learn_noise)
        return Hyper(lc, lh, sc, nz, float(th[i]))

    def pack(self, h: Hyper) -> np.ndarray:
        parts = [np.log(h.ls_cont), np.log(h.ls_cat), np.log(h.scales)]
        if self.learn_noise:
            parts.append([math.log(max(h.noise, 1e-6))])
        parts.append([h.mean])
        return np.concatenate([np.asarray(p, dtype=float) for p in parts])

    def bounds(self) -> list[tuple[float, float]]:
        b = [(math.log(0.01), math.log(1e3))] * (self.dc + self.dh)
        b += [(math.log(1e-3), math.log(1e2))] * self.ns
        if self.learn_noise:
            b += [(math.log(1e-6), math.log(10.0))]
        b += [(-5.0, 5.0)]
        return b

    def log_prior(self, th: np.ndarray) -> tuple[float, np.ndarray]:
        g = np.zeros_like(th)
        loc, sc = self.k.ls_prior_loc, self.k.ls_prior_scale
        nl = self.dc + self.dh
        z = (th[:nl] - loc) / sc
        lp = -0.5 * float(z @ z)
        g[:nl] = -z / sc
        i = nl
        z = th[i:i + self.ns] / 2.0
        lp += -0.5 * float(z @ z)
        g[i:i + self.ns] = -z / 2.0
        i += self.ns
        if self.learn_noise:
            z = th[i] + 4.0
            lp += -0.5 * z * z
            g[i] = -z
        return lp, g

    def __call__(self, th: np.ndarray) -> tuple[float, np.ndarray]:
        h = self.unpack(th)
        n = self.Z.shape[0]
        Kc, Kh = kernel_parts(self.k, h, self.Z, self.Z)
        s = h.scales
        if Kc is not None and Kh is not None:
            Kf = s[0] * Kc + s[1] * Kh + s[2] * Kc * Kh
        elif Kc is not None:
            Kf = s[0] * Kc
        else:
            Kf = s[0] * Kh
        nv = self.fixed_noise if self.fixed_noise is not None else np.full(n, max(h.noise, NOISE_FLOOR))
        K = Kf + np.diag(nv)
        try:
            L = np.linalg.cholesky(K)
        except np.linalg.LinAlgError:
            try:
                L = np.linalg.cholesky(K + 1e-6 * np.eye(n))
            except np.linalg.LinAlgError:
                return 1e25, np.zeros_like(th)
        r = self.ys - h.mean
        a = cho_solve((L, True), r, check_finite=False)
        lml = -0.5 * float(r @ a) - float(np.log(np.diag(L)).sum()) - 0.5 * n * _LOG2PI
        Kinv = cho_solve((L, True), np.eye(n), check_finite=False)
        W = np.outer(a, a) - Kinv
        g = np.zeros_like(th)
        i = 0
        if Kc is not None:
            M = W * ((s[0] + s[2] * Kh) * Kc if Kh is not None else s[0] * Kc)
            Xs = self.Zc / h.ls_cont
            rs = M.sum(1)
            g[:self.dc] = 0.5 * (2 * (Xs * Xs).T @ rs - 2 * (Xs * (M @ Xs)).sum(0))
        i += self.dc
        if Kh is not None:
            Mh = W * ((s[1] + s[2] * Kc) * Kh if Kc is not None else s[0] * Kh)
            for j, mis in enumerate(self.mis):
                g[i + j] = 0.5 * float((Mh * mis).sum()) / h.ls_cat[j]
        i += self.dh
        if Kc is not None and Kh is not None:
            comps = (Kc, Kh, Kc * Kh)
        else:
            comps = (Kc if Kc is not None else Kh,)
        for j, C in enumerate(comps):
            g[i + j] = 0.5 * s[j] * float((W * C).sum())
        i += self.ns
        if self.learn_noise:
            g[i] = 0.5 * h.noise * float(np.trace(W))
            i += 1
        g[i] = float(a.sum())
        lp, gp = self.log_prior(th)
        return -(lml + lp), -(g + gp)


def fit_gp(X: np.ndarray, y: np.ndarray, kspec: KernelSpec, nspec: NoiseSpec | None = None,
           restarts: int = 2, rng: np.random.Generator | int | None = None, *,
           transform: Callable | None = None, init: Hyper | None = None,
           standardize: bool = True, maxiter: int = 200) -> GpModel:
    """MAP-fit hyperparameters by multi-start L-BFGS on log-parameters.

    The first start is ``init`` if given, else the prior medians; the rest are
    prior draws. The best start by log posterior is kept.
    """
    nspec = nspec or NoiseSpec()
    if nspec.mode == "mlhgp":
        return mlhgp_fit(X, y, nspec.em_iterations, rng, kspec=kspec, transform=transform,
                         restarts=restarts)[0]
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    if X.shape[0] < 1 or X.shape[0] != y.shape[0]:
        raise GPError("fit_gp needs n >= 1 rows matching y")
    y_mean, y_scale = _standardizer(y) if standardize else (0.0, 1.0)
    ys = (y - y_mean) / y_scale
    Z = transform(X) if transform is not None else X

    fixed = None
    noise_fn = None
    if nspec.mode == "fixed":
        fixed = np.full(len(y), max(nspec.noise_std ** 2 / y_scale ** 2, NOISE_FLOOR))
    elif nspec.mode == "known":
        sig = np.asarray(nspec.sigma_fn(X), dtype=float).ravel()
        fixed = np.maximum(sig ** 2 / y_scale ** 2, NOISE_FLOOR)
        noise_fn = lambda Xq, f=nspec.sigma_fn: np.asarray(f(Xq), dtype=float).ravel() ** 2
    obj = _Objective(Z, ys, kspec, fixed, learn_noise=fixed is None)

    starts = [obj.pack(init if init is not None else default_hyper(kspec))]
    bnds = obj.bounds()
    for _ in range(max(restarts, 1) - 1):
        th = starts[0].copy()
        nl = obj.dc + obj.dh
        th[:nl] = kspec.ls_prior_loc + kspec.ls_prior_scale * rng.standard_normal(nl) * 0.5
        th[nl:nl + obj.ns] = rng.normal(0, 0.5, obj.ns)
        if obj.learn_noise:
            th[nl + obj.ns] = rng.uniform(math.log(1e-5), math.log(1e-1))
        starts.append(th)
    lo = np.array([b[0] for b in bnds])
    hi = np.array([b[1] for b in bnds])
    best = None
    for th0 in starts:
        th0 = np.clip(th0, lo, hi)
        res = minimize(obj, th0, jac=True, method="L-BFGS-B", bounds=bnds,
                       options={"maxiter": maxiter})
        if best is None or res.fun < best.fun:
            best = res
    h = obj.unpack(best.x)
    nv = fixed if fixed is not None else np.full(len(y), max(h.noise, NOISE_FLOOR))
    info = {"neg_log_post": float(best.fun), "restarts": len(starts), "map": True}
    return _build(Z, ys, nv, h, kspec, y_mean=y_mean, y_scale=y_scale, transform=transform,
                  noise_fn=noise_fn, info=info)


def sample_posterior(gp: GpModel, Xq: np.ndarray, draws: int,
                     rng: np.random.Generator | int | None = None,
                     base_samples: np.ndarray | None = None) -> np.ndarray:
    """``(draws, m)`` joint draws of the latent function at ``Xq``.

    Uses the Cholesky factor of the posterior covariance, or its symmetric
    eigen square root when the covariance is singular.
    """
    mu, S = gp.posterior(Xq)
    try:
        L = np.linalg.cholesky(S)
    except np.linalg.LinAlgError:
        # rank-deficient (e.g. repeated query points): symmetric square root keeps
        # perfectly correlated points equal, which diagonal jitter would not
        w, V = np.linalg.eigh(S)
        L = V * np.sqrt(np.maximum(w, 0.0))
    if base_samples is None:
        rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
        base_samples = rng.standard_normal((draws, len(mu)))
    return mu + base_samples @ L.T


def condition_on_fantasy(gp: GpModel, x: np.ndarray, y_f: float | np.ndarray,
                         noise: float | None = None) -> GpModel:
    """Condition on extra observations with hyperparameters frozen.

    ``noise`` is the observation-noise variance in target units; by default
    the model's own noise level at ``x``.
    """
    Xn = np.atleast_2d(np.asarray(x, dtype=float))
    yf = np.atleast_1d(np.asarray(y_f, dtype=float))
    Zn = gp.encode(Xn)
    nv_new = (gp.noise_var(Xn) if noise is None else np.full(len(yf), noise)) / gp.y_scale ** 2
    nv_new = np.maximum(nv_new, NOISE_FLOOR)
    ys_new = (yf - gp.y_mean) / gp.y_scale
    h = gp.hyper
    if gp.n == 0:
        return _build(Zn, ys_new, nv_new, h, gp.kspec, y_mean=gp.y_mean, y_scale=gp.y_scale,
                      transform=gp.transform, noise_fn=gp.noise_fn, info=dict(gp.info))
    K12 = kernel(gp.kspec, h, gp.X, Zn)
    K22 = kernel(gp.kspec, h, Zn, Zn) + np.diag(nv_new)
    L12 = solve_triangular(gp.L, K12, lower=True, check_finite=False)
    S = K22 - L12.T @ L12
    try:
        L22, _ = robust_cholesky(0.5 * (S + S.T), jitter=1e-10)
    except GPError:
        L22 = np.diag(np.sqrt(np.maximum(np.diag(S), NOISE_FLOOR)))
    n, m = gp.n, len(yf)
    L = np.zeros((n + m, n + m))
    L[:n, :n] = gp.L
    L[n:, :n] = L12.T
    L[n:, n:] = L22
    X = np.vstack([gp.X, Zn])
    y = np.concatenate([gp.y, ys_new])
    alpha = cho_solve((L, True), y - h.mean, check_finite=False)
    return replace(gp, X=X, y=y, noise_vec=np.concatenate([gp.noise_vec, nv_new]), L=L,
                   alpha=alpha)


def mlhgp_fit(X: np.ndarray, y: np.ndarray, em_iterations: int = 5,
              rng: np.random.Generator | int | None = None, *, kspec: KernelSpec | None = None,
              transform: Callable | None = None, restarts: int = 2,
              n_samples: int = 100) -> tuple[GpModel, GpModel | None]:
    """Most-likely heteroscedastic GP by alternating mean and log-noise fits.

    Each round samples the current predictive at the training inputs,
    turns the mean squared residual into a log-noise target, fits a GP to it,
    and refits the mean GP with the implied per-point noise.
    """
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    if X.shape[0] < 10:
        raise GPError("mlhgp_fit needs at least 10 observations")
    kspec = kspec or KernelSpec.for_dim(X.shape[1])
    gp = fit_gp(X, y, kspec, NoiseSpec("inferred"), restarts, rng, transform=transform)
    noise_gp = None
    bound = 1e3 * float(np.var(y)) if np.var(y) > 0 else 1e3
    diverged = False
    for _ in range(em_iterations):
        mu, var = gp.mean_var(X)
        pred_var = var + gp.noise_var(X)
        t = mu + np.sqrt(pred_var) * rng.standard_normal((n_samples, len(y)))
        z = np.log(np.maximum(0.5 * np.mean((y - t) ** 2, axis=0), 1e-12))
        noise_gp = fit_gp(X, z, kspec, NoiseSpec("inferred"), restarts, rng, transform=transform)

        def noise_fn(Xq, ng=noise_gp):
            m, _ = ng.mean_var(Xq)
            return np.minimum(np.exp(m), bound)

        nv = noise_fn(X)
        if np.any(nv >= bound):
            diverged = True
        gp = fit_gp(X, y, kspec, NoiseSpec("known", sigma_fn=lambda Xq, f=noise_fn: np.sqrt(f(Xq))),
                    restarts, rng, transform=transform, init=gp.hyper)
    gp.info["mlhgp_em"] = em_iterations
    gp.info["diverged"] = diverged
    return gp, noise_gp

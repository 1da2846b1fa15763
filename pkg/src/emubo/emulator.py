"""Deterministic objective backends.

``MlpEmulator`` is a two-hidden-layer ReLU network stored as plain affine
layers, so inference is a handful of matrix products and bit-reproducible.
``fit_emulator`` trains one from tabular data with dropout and per-feature
normalization, then folds the normalization into the exported weights.
``TabularObjective`` is a finite candidate set of embeddings with scores.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

FORMAT_VERSION = 1
ACTIVATIONS = ("relu", "identity")


class EmulatorError(ValueError):
    pass


@dataclass(frozen=True)
class Layer:
    w: np.ndarray  # (in, out)
    b: np.ndarray  # (out,)
    act: str = "relu"


@dataclass(frozen=True)
class MlpEmulator:
    layers: tuple[Layer, ...]
    shift: np.ndarray
    scale: np.ndarray
    output_names: tuple[str, ...]

    def __post_init__(self) -> None:
        if len(self.layers) != 3:
            raise EmulatorError("emulator needs exactly two hidden layers and an output head")
        if any(l.act not in ACTIVATIONS for l in self.layers):
            raise EmulatorError("unknown activation")
        if self.layers[-1].act != "identity":
            raise EmulatorError("output head must be linear")
        width = self.shift.shape[0]
        for l in self.layers:
            if l.w.ndim != 2 or l.w.shape[0] != width or l.b.shape != (l.w.shape[1],):
                raise EmulatorError("layer shapes do not chain")
            width = l.w.shape[1]
        if width != len(self.output_names):
            raise EmulatorError("output head width must match output_names")
        if self.scale.shape != self.shift.shape or np.any(self.scale <= 0):
            raise EmulatorError("normalization scale must be positive per dimension")

    @property
    def input_dim(self) -> int:
        return int(self.shift.shape[0])

    @property
    def n_outputs(self) -> int:
        return len(self.output_names)

    def predict(self, X: np.ndarray) -> np.ndarray:
        """Forward pass for a point ``(p,)`` or batch ``(n, p)``."""
        X = np.asarray(X, dtype=float)
        single = X.ndim == 1
        X = np.atleast_2d(X)
        if X.shape[1] != self.input_dim:
            raise EmulatorError(f"expected input dim {self.input_dim}, got {X.shape[1]}")
        h = (X - self.shift) / self.scale
        for l in self.layers:
            h = h @ l.w + l.b
            if l.act == "relu":
                h = np.maximum(h, 0.0)
        return h[0] if single else h

    __call__ = predict

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "input_dim": self.input_dim,
            "normalization": {"shift": self.shift.tolist(), "scale": self.scale.tolist()},
            "layers": [{"w": l.w.tolist(), "b": l.b.tolist(), "act": l.act} for l in self.layers],
            "outputs": list(self.output_names),
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def from_dict(cls, d: dict) -> MlpEmulator:
        if d.get("format_version") != FORMAT_VERSION:
            raise EmulatorError(f"unsupported emulator format_version {d.get('format_version')}")
        layers = tuple(Layer(np.asarray(l["w"], dtype=float), np.asarray(l["b"], dtype=float),
                             l.get("act", "relu")) for l in d["layers"])
        em = cls(layers, np.asarray(d["normalization"]["shift"], dtype=float),
                 np.asarray(d["normalization"]["scale"], dtype=float), tuple(d["outputs"]))
        if em.input_dim != d["input_dim"]:
            raise EmulatorError("input_dim does not match normalization width")
        return em

    @classmethod
    def load(cls, path: str | Path) -> MlpEmulator:
        return cls.from_dict(json.loads(Path(path).read_text()))


def spearman_rho(a: Sequence[float], b: Sequence[float]) -> float:
    """Spearman correlation with average ranks for ties.

    Returns ``nan`` when either argument has zero rank variance.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape or a.ndim != 1 or a.size < 2:
        raise ValueError("spearman_rho needs two equal-length vectors of length >= 2")
    ra = rankdata(a) - (a.size + 1) / 2
    rb = rankdata(b) - (b.size + 1) / 2
    den = math.sqrt(float(ra @ ra) * float(rb @ rb))
    if den == 0.0:
        return math.nan
    return float(ra @ rb) / den


@dataclass
class FitConfig:
    hidden_width: int = 64
    dropout_rate: float = 0.1
    epochs: int = 300
    learning_rate: float = 3e-3
    seed: int = 0
    test_fraction: float = 0.1
    batch_size: int = 128
    weight_decay: float = 1e-5


@dataclass
class FitReport:
    rho_train: tuple[float, ...]
    rho_test: tuple[float, ...]
    n_train: int
    n_test: int
    loss_curve: list[float] = field(default_factory=list)
    degenerate: tuple[bool, ...] = ()
    optimizer: str = "adam+cosine"
    config: dict = field(default_factory=dict)


_BN_EPS = 1e-5


def _split(n: int, test_fraction: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    perm = rng.permutation(n)
    n_test = int(round(n * test_fraction))
    return np.sort(perm[n_test:]), np.sort(perm[:n_test])


def fit_emulator(X: np.ndarray, Y: np.ndarray, cfg: FitConfig | None = None,
                 output_names: Sequence[str] | None = None,
                 test_idx: np.ndarray | None = None) -> tuple[MlpEmulator, FitReport]:
    """Train a two-hidden-layer MLP by minibatch Adam on mean squared error.

    Each hidden layer is ``relu(norm(x W + b))`` followed by dropout. The
    per-feature normalization keeps running statistics, so at export time it
    becomes an affine map and is folded into ``W`` and ``b``.
    """
    cfg = cfg or FitConfig()
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    if Y.ndim == 1:
        Y = Y[:, None]
    if X.ndim != 2 or Y.shape[0] != X.shape[0]:
        raise EmulatorError("X and Y must have matching rows")
    if X.shape[0] < 50:
        raise EmulatorError("fit_emulator needs at least 50 rows")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(Y))):
        raise EmulatorError("non-finite values in training data")
    n, p = X.shape
    k = Y.shape[1]
    names = tuple(output_names) if output_names is not None else tuple(f"y{j}" for j in range(k))
    rng = np.random.default_rng(cfg.seed)
    if test_idx is None:
        tr, te = _split(n, cfg.test_fraction, rng)
    else:
        te = np.asarray(test_idx, dtype=int)
        tr = np.setdiff1d(np.arange(n), te)

    Xtr, Ytr = X[tr], Y[tr]
    shift = Xtr.mean(axis=0)
    scale = Xtr.std(axis=0)
    scale[scale <= 1e-12] = 1.0
    y_mu = Ytr.mean(axis=0)
    y_sd = Ytr.std(axis=0)
    y_sd[y_sd <= 1e-12] = 1.0
    Z = (Xtr - shift) / scale
    T = (Ytr - y_mu) / y_sd

    h = cfg.hidden_width
    params = {
        "W1": rng.normal(0, math.sqrt(2.0 / p), (p, h)), "b1": np.zeros(h),
        "g1": np.ones(h), "c1": np.zeros(h),
        "W2": rng.normal(0, math.sqrt(2.0 / h), (h, h)), "b2": np.zeros(h),
        "g2": np.ones(h), "c2": np.zeros(h),
        "W3": rng.normal(0, math.sqrt(1.0 / h), (h, k)), "b3": np.zeros(k),
    }
    run = {"m1": np.zeros(h), "v1": np.ones(h), "m2": np.zeros(h), "v2": np.ones(h)}
    m_adam = {key: np.zeros_like(v) for key, v in params.items()}
    v_adam = {key: np.zeros_like(v) for key, v in params.items()}
    b1_, b2_, eps = 0.9, 0.999, 1e-8
    keep = 1.0 - cfg.dropout_rate
    ntr = Z.shape[0]
    bs = min(cfg.batch_size, ntr)
    steps_per_epoch = max(1, ntr // bs)
    total = cfg.epochs * steps_per_epoch
    step = 0
    losses: list[float] = []

    def bn_forward(a, g, c):
        mu = a.mean(axis=0)
        var = a.var(axis=0)
        inv = 1.0 / np.sqrt(var + _BN_EPS)
        xh = (a - mu) * inv
        return g * xh + c, xh, inv, mu, var

    def bn_backward(dz, xh, inv, g):
        B = dz.shape[0]
        dxh = dz * g
        da = inv / B * (B * dxh - dxh.sum(axis=0) - xh * (dxh * xh).sum(axis=0))
        return da, (dz * xh).sum(axis=0), dz.sum(axis=0)

    for _ in range(cfg.epochs):
        perm = rng.permutation(ntr)
        ep_loss = 0.0
        for s in range(steps_per_epoch):
            idx = perm[s * bs:(s + 1) * bs]
            xb, yb = Z[idx], T[idx]
            P = params
            a1 = xb @ P["W1"] + P["b1"]
            z1, xh1, inv1, mu1, var1 = bn_forward(a1, P["g1"], P["c1"])
            r1 = np.maximum(z1, 0.0)
            mk1 = (rng.random(r1.shape) < keep) / keep if cfg.dropout_rate > 0 else 1.0
            d1 = r1 * mk1
            a2 = d1 @ P["W2"] + P["b2"]
            z2, xh2, inv2, mu2, var2 = bn_forward(a2, P["g2"], P["c2"])
            r2 = np.maximum(z2, 0.0)
            mk2 = (rng.random(r2.shape) < keep) / keep if cfg.dropout_rate > 0 else 1.0
            d2 = r2 * mk2
            out = d2 @ P["W3"] + P["b3"]
            err = out - yb
            loss = float(np.mean(err ** 2))
            ep_loss += loss

            B = xb.shape[0]
            dout = 2.0 * err / (B * k)
            grads = {"W3": d2.T @ dout, "b3": dout.sum(axis=0)}
            dr2 = (dout @ P["W3"].T) * mk2 * (z2 > 0)
            da2, grads["g2"], grads["c2"] = bn_backward(dr2, xh2, inv2, P["g2"])
            grads["W2"] = d1.T @ da2
            grads["b2"] = da2.sum(axis=0)
            dr1 = (da2 @ P["W2"].T) * mk1 * (z1 > 0)
            da1, grads["g1"], grads["c1"] = bn_backward(dr1, xh1, inv1, P["g1"])
            grads["W1"] = xb.T @ da1
            grads["b1"] = da1.sum(axis=0)

            run["m1"] = 0.9 * run["m1"] + 0.1 * mu1
            run["v1"] = 0.9 * run["v1"] + 0.1 * var1 * B / max(B - 1, 1)
            run["m2"] = 0.9 * run["m2"] + 0.1 * mu2
            run["v2"] = 0.9 * run["v2"] + 0.1 * var2 * B / max(B - 1, 1)

            step += 1
            lr = 0.5 * cfg.learning_rate * (1 + math.cos(math.pi * (step - 1) / total))
            for key in params:
                gk = grads[key]
                if key.startswith("W"):
                    gk = gk + cfg.weight_decay * params[key]
                m_adam[key] = b1_ * m_adam[key] + (1 - b1_) * gk
                v_adam[key] = b2_ * v_adam[key] + (1 - b2_) * gk * gk
                mhat = m_adam[key] / (1 - b1_ ** step)
                vhat = v_adam[key] / (1 - b2_ ** step)
                params[key] = params[key] - lr * mhat / (np.sqrt(vhat) + eps)
        losses.append(ep_loss / steps_per_epoch)

    # Fold running-stat normalization and target scaling into plain affine layers.
    P = params
    f1 = P["g1"] / np.sqrt(run["v1"] + _BN_EPS)
    W1 = P["W1"] * f1
    b1 = (P["b1"] - run["m1"]) * f1 + P["c1"]
    f2 = P["g2"] / np.sqrt(run["v2"] + _BN_EPS)
    W2 = P["W2"] * f2
    b2 = (P["b2"] - run["m2"]) * f2 + P["c2"]
    W3 = P["W3"] * y_sd
    b3 = P["b3"] * y_sd + y_mu
    em = MlpEmulator((Layer(W1, b1, "relu"), Layer(W2, b2, "relu"), Layer(W3, b3, "identity")),
                     shift, scale, names)

    pred_tr = em.predict(Xtr)
    rho_tr, rho_te, degen = [], [], []
    for j in range(k):
        r_tr = spearman_rho(pred_tr[:, j], Ytr[:, j])
        r_te = math.nan
        if te.size >= 2:
            r_te = spearman_rho(em.predict(X[te])[:, j], Y[te, j])
        rho_tr.append(r_tr)
        rho_te.append(r_te)
        degen.append(bool(np.ptp(Y[:, j]) == 0))
    report = FitReport(tuple(rho_tr), tuple(rho_te), int(tr.size), int(te.size), losses,
                       tuple(degen), config=vars(cfg).copy())
    return em, report


def validate_emulator(em: MlpEmulator, X: np.ndarray, Y: np.ndarray) -> tuple[float, ...]:
    """Spearman correlation between predictions and targets, per output."""
    Y = np.asarray(Y, dtype=float)
    if Y.ndim == 1:
        Y = Y[:, None]
    pred = em.predict(np.asarray(X, dtype=float))
    return tuple(spearman_rho(pred[:, j], Y[:, j]) for j in range(Y.shape[1]))


@dataclass(frozen=True)
class TabularObjective:
    ids: tuple[str, ...]
    embeddings: np.ndarray
    scores: np.ndarray

    def __post_init__(self) -> None:
        if self.embeddings.ndim != 2 or self.embeddings.shape[0] != len(self.ids):
            raise EmulatorError("embeddings must be (n, d) with one row per id")
        if self.scores.shape != (len(self.ids),):
            raise EmulatorError("scores must have one entry per id")

    @property
    def n(self) -> int:
        return len(self.ids)

    @property
    def d(self) -> int:
        return int(self.embeddings.shape[1])

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["id", "score"] + [f"e{i}" for i in range(self.d)])
            for i, s, row in zip(self.ids, self.scores, self.embeddings):
                w.writerow([i, repr(float(s))] + [repr(float(v)) for v in row])

    @classmethod
    def from_csv(cls, path: str | Path) -> TabularObjective:
        with open(path, newline="", encoding="utf-8") as fh:
            r = csv.reader(fh)
            header = next(r)
            if header[:2] != ["id", "score"] or header[2:] != [f"e{i}" for i in range(len(header) - 2)]:
                raise EmulatorError("tabular CSV header must be id, score, e0..e{d-1}")
            ids, scores, rows = [], [], []
            for line in r:
                ids.append(line[0])
                scores.append(float(line[1]))
                rows.append([float(v) for v in line[2:]])
        return cls(tuple(ids), np.asarray(rows, dtype=float), np.asarray(scores, dtype=float))


def truncate_embedding(t: TabularObjective, d: int) -> TabularObjective:
    """Keep the leading ``d`` embedding coordinates (prefix truncation)."""
    if d < 1 or d > t.d:
        raise EmulatorError(f"cannot truncate a {t.d}-dim table to d={d}")
    if d == t.d:
        return t
    return replace(t, embeddings=np.ascontiguousarray(t.embeddings[:, :d]))


def _objective_score(em: MlpEmulator, X: np.ndarray, output: int | None) -> np.ndarray:
    Y = em.predict(X)
    return Y.mean(axis=1) if output is None else Y[:, output]


def adaptive_sample(em: MlpEmulator, strategy: str, pool: np.ndarray, n: int,
                    output: int | None = None, step: float = 1e-4) -> np.ndarray:
    """Pick the top-``n`` pool points by gradient magnitude or by prediction.

    Gradients are central differences with ``step`` measured in the
    emulator's normalized input coordinates. Ties keep pool order.
    """
    pool = np.atleast_2d(np.asarray(pool, dtype=float))
    if pool.shape[0] == 0:
        raise EmulatorError("pool is empty")
    if n >= pool.shape[0]:
        return pool.copy()
    if strategy == "predicted_objective":
        score = _objective_score(em, pool, output)
    elif strategy == "gradient_magnitude":
        m, p = pool.shape
        G = np.empty((m, p))
        for i in range(p):
            e = np.zeros(p)
            e[i] = step * em.scale[i]
            G[:, i] = (_objective_score(em, pool + e, output)
                       - _objective_score(em, pool - e, output)) / (2 * step)
        score = np.linalg.norm(G, axis=1)
    else:
        raise EmulatorError(f"unknown strategy {strategy!r}")
    # Round away finite-difference jitter so exact ties stay ties.
    top = np.max(np.abs(score))
    if top > 0:
        score = np.round(score / top, 8)
    order = np.argsort(-score, kind="stable")
    return pool[order[:n]]


def pca_explained_variance(embeddings: np.ndarray) -> np.ndarray:
    """Cumulative explained-variance ratio of the centered data, length ``d``."""
    E = np.asarray(embeddings, dtype=float)
    C = np.cov(E, rowvar=False, bias=True)
    ev = np.clip(np.linalg.eigvalsh(np.atleast_2d(C))[::-1], 0.0, None)
    total = ev.sum()
    if total <= 0:
        return np.ones(E.shape[1])
    return np.cumsum(ev) / total


def components_for_variance(curve: np.ndarray, threshold: float = 0.95) -> int:
    """Smallest number of components whose cumulative ratio reaches ``threshold``."""
    return int(np.searchsorted(np.asarray(curve), threshold - 1e-12) + 1)

"""Losses, subset-restricted base learners and ensembles."""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import _kernels
from .gaussian import AffinePredictor
from .scm import Dataset

CLIP_EPS = 1e-6
LOSSES = ("squared", "brier", "log")


class SchemaError(KeyError):
    pass


class FitWarning(RuntimeWarning):
    pass


# ---------------------------------------------------------------------------
# losses


@dataclass(frozen=True)
class Loss:
    kind: str = "squared"

    def __post_init__(self):
        if self.kind not in LOSSES:
            raise ValueError(f"unknown loss {self.kind!r}")

    def __call__(self, y, q):
        return eval_loss(self, y, q)


def eval_loss(loss: Loss | str, y, q):
    """Pointwise loss; ``log`` expects probabilities already inside (0, 1)."""
    kind = loss.kind if isinstance(loss, Loss) else loss
    y = np.asarray(y, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if kind in ("squared", "brier"):
        out = (y - q) ** 2
    elif kind == "log":
        with np.errstate(divide="ignore", invalid="ignore"):
            out = -(np.where(y > 0, y * np.log(q), 0.0) + np.where(y < 1, (1 - y) * np.log1p(-q), 0.0))
    else:
        raise ValueError(f"unknown loss {kind!r}")
    return out if out.ndim else float(out)


def default_loss(task: str) -> Loss:
    return Loss("brier" if task == "classification" else "squared")


# ---------------------------------------------------------------------------
# learner configuration


@dataclass(frozen=True)
class LearnerConfig:
    kind: str = "ridge"
    lam: float = 1e-6
    interactions: bool = False
    hidden: tuple[int, ...] = (64, 64, 64)
    lr: float = 1e-3
    weight_decay: float = 0.0
    batch: int = 256
    max_epochs: int = 200
    max_steps: int = 6000
    patience: int = 20
    val_frac: float = 0.1
    trees: int = 50
    depth: int = 3
    min_leaf: int = 5
    max_iter: int = 50

    def __post_init__(self):
        if self.kind not in ("ols", "ridge", "logistic", "mlp", "stumps"):
            raise ValueError(f"unknown learner {self.kind!r}")

    @classmethod
    def from_dict(cls, d: Mapping | None) -> "LearnerConfig":
        d = dict(d or {})
        if "hidden" in d:
            d["hidden"] = tuple(d["hidden"])
        return cls(**d)

    @classmethod
    def default(cls, task: str) -> "LearnerConfig":
        return cls("logistic" if task == "classification" else "ridge")


# ---------------------------------------------------------------------------
# matrix-level models


def _clip(p):
    return np.clip(p, CLIP_EPS, 1.0 - CLIP_EPS)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _expand(X: np.ndarray, interactions: bool) -> np.ndarray:
    if not interactions or X.shape[1] < 2:
        return X
    d = X.shape[1]
    prods = [X[:, i] * X[:, j] for i in range(d) for j in range(i + 1, d)]
    return np.column_stack([X, *prods])


@dataclass
class ConstantModel:
    value: float
    task: str = "regression"
    flags: tuple = ()

    def predict(self, X):
        n = np.asarray(X).shape[0]
        v = _clip(self.value) if self.task == "classification" else self.value
        return np.full(n, v)

    def params(self):
        return {"value": self.value}


@dataclass
class LinearModel:
    coef: np.ndarray
    intercept: float
    flags: tuple = ()

    def predict(self, X):
        return self.intercept + np.asarray(X, dtype=np.float64) @ self.coef

    def params(self):
        return {"coef": self.coef.tolist(), "intercept": self.intercept}


def fit_linear(X: np.ndarray, y: np.ndarray, lam: float = 0.0) -> LinearModel:
    """Least squares with intercept; ``lam`` is a per-row ridge penalty on the slopes."""
    X = np.asarray(X, dtype=np.float64)
    n, d = X.shape
    if d == 0:
        return LinearModel(np.zeros(0), float(np.mean(y)))
    mx = X.mean(axis=0)
    my = float(np.mean(y))
    Xc = X - mx
    G = Xc.T @ Xc
    flags = ()
    if lam > 0:
        G = G + lam * n * np.eye(d)
    elif np.linalg.matrix_rank(G) < d:
        G = G + 1e-8 * np.trace(G) * np.eye(d)
        flags = ("rank-deficient: ridge fallback",)
    w = np.linalg.solve(G, Xc.T @ (y - my))
    return LinearModel(w, float(my - mx @ w), flags)


@dataclass
class LogisticModel:
    coef: np.ndarray
    intercept: float
    interactions: bool = False
    flags: tuple = ()

    def decision(self, X):
        return self.intercept + _expand(np.asarray(X, dtype=np.float64), self.interactions) @ self.coef

    def predict(self, X):
        return _clip(_sigmoid(self.decision(X)))

    def params(self):
        return {"coef": self.coef.tolist(), "intercept": self.intercept, "interactions": self.interactions}


def fit_logistic(X: np.ndarray, y: np.ndarray, lam: float = 1e-6, interactions: bool = False,
                 max_iter: int = 50, tol: float = 1e-10) -> LogisticModel:
    """Penalized logistic regression by Newton's method (iteratively reweighted least squares)."""
    Z = _expand(np.asarray(X, dtype=np.float64), interactions)
    n, d = Z.shape
    A = np.column_stack([np.ones(n), Z])
    pen = lam * n * np.r_[0.0, np.ones(d)]
    beta = np.zeros(d + 1)
    ybar = np.clip(np.mean(y), 1e-3, 1 - 1e-3)
    beta[0] = math.log(ybar / (1 - ybar))
    flags = ()
    converged = False
    for _ in range(max_iter):
        eta = A @ beta
        p = _sigmoid(eta)
        W = p * (1 - p)
        g = A.T @ (p - y) + pen * beta
        H = (A * W[:, None]).T @ A + np.diag(pen) + 1e-12 * np.eye(d + 1)
        step = np.linalg.solve(H, g)
        beta = beta - step
        if np.max(np.abs(step)) < tol * (1 + np.max(np.abs(beta))):
            converged = True
            break
    if not converged:
        flags = ("max-iter reached (possible separation)",)
    return LogisticModel(beta[1:], float(beta[0]), interactions, flags)


@dataclass
class MultinomialModel:
    """Softmax regression over ``k`` classes with class 0 as the reference."""

    coef: np.ndarray  # (d + 1, k - 1), first row intercepts
    k: int
    flags: tuple = ()

    def predict_proba(self, X):
        X = np.asarray(X, dtype=np.float64)
        A = np.column_stack([np.ones(X.shape[0]), X])
        eta = np.column_stack([np.zeros(X.shape[0]), A @ self.coef])
        eta -= eta.max(axis=1, keepdims=True)
        P = np.exp(eta)
        return P / P.sum(axis=1, keepdims=True)


def fit_multinomial(X: np.ndarray, labels: np.ndarray, k: int, lam: float = 1e-6,
                    max_iter: int = 50, tol: float = 1e-10) -> MultinomialModel:
    X = np.asarray(X, dtype=np.float64)
    n, d = X.shape
    A = np.column_stack([np.ones(n), X])
    q = d + 1
    m = k - 1
    Yoh = np.zeros((n, k))
    Yoh[np.arange(n), labels] = 1.0
    freq = np.clip(Yoh.mean(axis=0), 1e-3, None)
    beta = np.zeros((q, m))
    beta[0] = np.log(freq[1:] / freq[0])
    pen = lam * n * np.r_[0.0, np.ones(d)]
    flags = ()
    converged = False
    for _ in range(max_iter):
        eta = np.column_stack([np.zeros(n), A @ beta])
        eta -= eta.max(axis=1, keepdims=True)
        P = np.exp(eta)
        P /= P.sum(axis=1, keepdims=True)
        R = P[:, 1:] - Yoh[:, 1:]
        g = (A.T @ R + pen[:, None] * beta).reshape(-1, order="F")
        H = np.zeros((q * m, q * m))
        for a in range(m):
            for b in range(a, m):
                w = P[:, a + 1] * ((a == b) - P[:, b + 1])
                blk = (A * w[:, None]).T @ A
                if a == b:
                    blk = blk + np.diag(pen)
                H[a * q:(a + 1) * q, b * q:(b + 1) * q] = blk
                H[b * q:(b + 1) * q, a * q:(a + 1) * q] = blk.T
        step = np.linalg.solve(H + 1e-12 * np.eye(q * m), g)
        beta = beta - step.reshape(q, m, order="F")
        if np.max(np.abs(step)) < tol * (1 + np.max(np.abs(beta))):
            converged = True
            break
    if not converged:
        flags = ("max-iter reached (possible separation)",)
    return MultinomialModel(beta, k, flags)


# MLP: tanh hidden layers, linear output (logit for classification)


def mlp_sizes(d: int, hidden: Sequence[int]) -> list[int]:
    return [d, *hidden, 1]


def mlp_init(sizes: Sequence[int], rng: np.random.Generator) -> np.ndarray:
    parts = []
    for a, b in zip(sizes[:-1], sizes[1:]):
        lim = math.sqrt(6.0 / (a + b))
        parts.append(rng.uniform(-lim, lim, a * b))
        parts.append(np.zeros(b))
    return np.concatenate(parts)


def _unpack(theta, sizes):
    out = []
    pos = 0
    for a, b in zip(sizes[:-1], sizes[1:]):
        W = theta[pos:pos + a * b].reshape(a, b)
        pos += a * b
        out.append((W, theta[pos:pos + b]))
        pos += b
    return out


def mlp_forward(theta: np.ndarray, sizes: Sequence[int], X: np.ndarray) -> np.ndarray:
    h = X
    layers = _unpack(theta, sizes)
    for W, b in layers[:-1]:
        h = np.tanh(h @ W + b)
    W, b = layers[-1]
    return (h @ W + b)[:, 0]


def mlp_loss_grad(theta: np.ndarray, sizes: Sequence[int], X: np.ndarray, y: np.ndarray,
                  task: str = "regression") -> tuple[float, np.ndarray]:
    """Mean loss and its gradient by backpropagation.

    Regression uses half the mean squared error; classification the mean log loss
    on the output logit.
    """
    layers = _unpack(theta, sizes)
    acts = [X]
    h = X
    for W, b in layers[:-1]:
        h = np.tanh(h @ W + b)
        acts.append(h)
    W, b = layers[-1]
    out = (h @ W + b)[:, 0]
    n = X.shape[0]
    if task == "classification":
        loss = float(np.mean(np.logaddexp(0.0, out) - y * out))
        delta = (_sigmoid(out) - y) / n
    else:
        r = out - y
        loss = 0.5 * float(np.mean(r * r))
        delta = r / n
    grads = []
    delta = delta[:, None]
    for li in range(len(layers) - 1, -1, -1):
        W, b = layers[li]
        a = acts[li]
        grads.append((a.T @ delta, delta.sum(axis=0)))
        if li > 0:
            delta = (delta @ W.T) * (1.0 - a * a)
    flat = []
    for gW, gb in reversed(grads):
        flat.append(gW.reshape(-1))
        flat.append(gb)
    return loss, np.concatenate(flat)


@dataclass
class MlpModel:
    theta: np.ndarray
    sizes: list
    x_mean: np.ndarray
    x_scale: np.ndarray
    y_mean: float
    y_scale: float
    task: str
    flags: tuple = ()

    def predict(self, X):
        Z = (np.asarray(X, dtype=np.float64) - self.x_mean) / self.x_scale
        out = mlp_forward(self.theta, self.sizes, Z)
        if self.task == "classification":
            return _clip(_sigmoid(out))
        return self.y_mean + self.y_scale * out

    def params(self):
        return {"theta": self.theta.tolist(), "sizes": list(self.sizes), "x_mean": self.x_mean.tolist(),
                "x_scale": self.x_scale.tolist(), "y_mean": self.y_mean, "y_scale": self.y_scale}


def fit_mlp(X: np.ndarray, y: np.ndarray, cfg: LearnerConfig, task: str, rng: np.random.Generator) -> MlpModel:
    """Adam on minibatches with a held-out validation split for early stopping."""
    X = np.asarray(X, dtype=np.float64)
    n, d = X.shape
    x_mean = X.mean(axis=0)
    x_scale = X.std(axis=0)
    x_scale[x_scale == 0] = 1.0
    if task == "classification":
        y_mean, y_scale = 0.0, 1.0
    else:
        y_mean = float(np.mean(y))
        y_scale = float(np.std(y)) or 1.0
    Z = (X - x_mean) / x_scale
    t = (y - y_mean) / y_scale
    perm = rng.permutation(n)
    n_val = max(1, int(round(cfg.val_frac * n))) if n >= 20 else 0
    val, tr = perm[:n_val], perm[n_val:]
    sizes = mlp_sizes(d, cfg.hidden)
    theta = mlp_init(sizes, rng)
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    b1, b2, eps = 0.9, 0.999, 1e-8
    best = (np.inf, theta.copy())
    bad = 0
    step = 0
    batch = min(cfg.batch, len(tr))
    for _ in range(cfg.max_epochs):
        order = rng.permutation(tr)
        for s in range(0, len(order) - batch + 1, batch):
            idx = order[s:s + batch]
            _, g = mlp_loss_grad(theta, sizes, Z[idx], t[idx], task)
            if cfg.weight_decay:
                g = g + cfg.weight_decay * theta
            step += 1
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            theta = theta - cfg.lr * (m / (1 - b1 ** step)) / (np.sqrt(v / (1 - b2 ** step)) + eps)
            if step >= cfg.max_steps:
                break
        if n_val:
            vl, _ = mlp_loss_grad(theta, sizes, Z[val], t[val], task)
            if vl < best[0] - 1e-12:
                best = (vl, theta.copy())
                bad = 0
            else:
                bad += 1
                if bad >= cfg.patience:
                    break
        else:
            best = (0.0, theta.copy())
        if step >= cfg.max_steps:
            break
    return MlpModel(best[1], sizes, x_mean, x_scale, y_mean, y_scale, task)


# bagged shallow regression trees


@dataclass
class StumpEnsemble:
    trees: list  # each tree: nested tuples (feature, threshold, left, right) or leaf float
    task: str

    @staticmethod
    def _tree_predict(node, X):
        if not isinstance(node, tuple):
            return np.full(X.shape[0], node)
        j, thr, left, right = node
        out = np.empty(X.shape[0])
        mask = X[:, j] <= thr
        out[mask] = StumpEnsemble._tree_predict(left, X[mask])
        out[~mask] = StumpEnsemble._tree_predict(right, X[~mask])
        return out

    def predict(self, X):
        X = np.asarray(X, dtype=np.float64)
        out = np.mean([self._tree_predict(t, X) for t in self.trees], axis=0)
        return _clip(out) if self.task == "classification" else out

    def params(self):
        return {"trees": self.trees}


def _grow(X, y, depth, min_leaf):
    leaf = float(np.mean(y))
    if depth == 0 or X.shape[0] < 2 * min_leaf:
        return leaf
    best = (1e-12, None, None)
    for j in range(X.shape[1]):
        order = np.argsort(X[:, j], kind="mergesort")
        gain, thr = _kernels.best_split(X[order, j], y[order], min_leaf)
        if gain > best[0]:
            best = (gain, j, thr)
    if best[1] is None:
        return leaf
    j, thr = best[1], best[2]
    mask = X[:, j] <= thr
    return (j, float(thr), _grow(X[mask], y[mask], depth - 1, min_leaf),
            _grow(X[~mask], y[~mask], depth - 1, min_leaf))


def fit_stumps(X, y, cfg: LearnerConfig, task: str, rng: np.random.Generator) -> StumpEnsemble:
    n = X.shape[0]
    trees = []
    for _ in range(cfg.trees):
        idx = rng.integers(0, n, n)
        trees.append(_grow(X[idx], y[idx], cfg.depth, cfg.min_leaf))
    return StumpEnsemble(trees, task)


def fit_matrix(X: np.ndarray, y: np.ndarray, cfg: LearnerConfig, task: str, seed: int = 0):
    """Fit a base learner on a raw design matrix; returns an object with ``predict``."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise ValueError("design matrix and response disagree in length")
    rng = np.random.default_rng(seed)
    if X.shape[1] == 0:
        return ConstantModel(float(np.mean(y)), task)
    if task == "classification" and np.unique(y).size < 2:
        return ConstantModel(float(np.mean(y)), task, ("single class",))
    kind = cfg.kind
    if kind == "ols":
        return fit_linear(X, y, 0.0)
    if kind == "ridge":
        return fit_linear(X, y, cfg.lam)
    if kind == "logistic":
        return fit_logistic(X, y, cfg.lam, cfg.interactions, cfg.max_iter)
    if kind == "mlp":
        return fit_mlp(X, y, cfg, task, rng)
    return fit_stumps(X, y, cfg, task, rng)


# ---------------------------------------------------------------------------
# subset predictors and ensembles


@dataclass
class SubsetPredictor:
    subset: tuple[str, ...]
    columns: tuple[str, ...]
    task: str
    learner: str
    model: object
    flags: tuple = ()

    def predict(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != len(self.columns):
            raise SchemaError(f"expected {len(self.columns)} columns, got {X.shape[1]}")
        idx = [self.columns.index(v) for v in self.subset]
        return self.model.predict(X[:, idx])

    def to_dict(self) -> dict:
        return {"kind": self.learner, "subset": list(self.subset), "task": self.task,
                "params": self.model.params(), "flags": list(self.flags)}


def fit(data: Dataset, S: Sequence[str], config: LearnerConfig | None = None, seed: int = 0) -> SubsetPredictor:
    config = config or LearnerConfig.default(data.task)
    S = tuple(S)
    missing = set(S) - set(data.columns)
    if missing:
        raise SchemaError(f"columns {sorted(missing)} not in dataset")
    if data.task == "classification" and config.kind in ("ols", "ridge"):
        raise ValueError("linear least squares is a regression learner")
    if data.task == "regression" and config.kind == "logistic":
        raise ValueError("logistic regression is a classification learner")
    model = fit_matrix(data.cols(S), data.y, config, data.task, seed)
    flags = tuple(getattr(model, "flags", ()))
    for fl in flags:
        warnings.warn(f"fit on {S}: {fl}", FitWarning)
    return SubsetPredictor(S, data.columns, data.task, config.kind if S else "constant", model, flags)


@dataclass
class TablePredictor:
    """Lookup of a value per configuration of ``subset`` (discrete covariates)."""

    subset: tuple[str, ...]
    columns: tuple[str, ...]
    table: Mapping[tuple, float]
    default: float = 0.5
    task: str = "classification"

    def predict(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        idx = [self.columns.index(v) for v in self.subset]
        vals = np.array([self.table.get(tuple(float(v) for v in row), self.default) for row in X[:, idx]])
        return vals.reshape(X.shape[0])

    def to_dict(self) -> dict:
        return {"kind": "table", "subset": list(self.subset),
                "table": {",".join(map(repr, k)): v for k, v in self.table.items()}}


@dataclass
class EnsembleModel:
    members: list  # [(predictor, weight)]
    flags: tuple = ()
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.members:
            raise ValueError("ensemble needs at least one member")
        w = np.array([m[1] for m in self.members], dtype=np.float64)
        if np.any(w < 0) or w.sum() <= 0:
            raise ValueError("ensemble weights must be nonnegative with positive sum")
        w = w / w.sum()
        self.members = [(p, float(wi)) for (p, _), wi in zip(self.members, w)]
        tasks = {p.task for p, wi in self.members if wi > 0}
        if len(tasks) > 1:
            raise ValueError("ensemble members disagree on the task")

    @property
    def task(self):
        return self.members[0][0].task

    @property
    def columns(self):
        return self.members[0][0].columns

    @property
    def subset(self):
        labels = {v for p, w in self.members if w > 0 for v in p.subset}
        return tuple(v for v in self.columns if v in labels)

    def weight_on(self, labels) -> float:
        labels = set(labels)
        return float(sum(w for p, w in self.members if labels & set(p.subset)))

    def predict(self, X):
        return sum(w * p.predict(X) for p, w in self.members)

    def to_dict(self) -> dict:
        return {"kind": "ensemble", "flags": list(self.flags),
                "members": [{"weight": w, "model": p.to_dict()} for p, w in self.members]}


def empirical_risk(data: Dataset, model, loss: Loss | str | None = None, env: int | None = None) -> float:
    loss = default_loss(data.task) if loss is None else loss
    d = data.filter_env(env) if env is not None else data
    if d.n == 0:
        raise ValueError(f"no rows for environment {env}")
    X = d.X if tuple(model.columns) == tuple(d.columns) else d.cols(model.columns)
    return float(np.mean(eval_loss(loss, d.y, model.predict(X))))


def dump_json(model, path=None) -> str:
    text = json.dumps(model.to_dict(), indent=2)
    if path is not None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)
    return text


__all__ = ["AffinePredictor", "CLIP_EPS", "ConstantModel", "EnsembleModel", "LearnerConfig", "Loss",
           "SubsetPredictor", "TablePredictor", "default_loss", "dump_json", "empirical_risk",
           "eval_loss", "fit", "fit_logistic", "fit_matrix", "fit_mlp", "fit_multinomial",
           "mlp_loss_grad"]

"""Structural causal models with environment-indexed mechanism overrides.

Mechanisms come in five kinds: linear-Gaussian, prefix-notation expressions,
discrete conditional tables, point masses, and a base mechanism plus a bounded
perturbation policy. Every node draws its own noise from a counter-based
stream keyed by ``(seed, environment, node)``.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from . import _kernels
from .graph import Dag, GraphError, validate_augmentation

NOISE = "eps"
MAX_STATES = 2 ** 20


class ScmError(ValueError):
    pass


class ExpressionError(ScmError):
    pass


class SamplingError(RuntimeError):
    pass


class UnsupportedError(ScmError):
    pass


# ---------------------------------------------------------------------------
# noise


@dataclass(frozen=True)
class Noise:
    dist: str = "gaussian"
    a: float = 1.0
    b: float = 0.0

    # gaussian: std=a; bernoulli: p=a; uniform: [a, b]; logistic: scale=a
    def draw(self, rng: np.random.Generator, n: int) -> np.ndarray:
        if self.dist == "gaussian":
            return self.a * rng.standard_normal(n)
        if self.dist == "bernoulli":
            return (rng.random(n) < self.a).astype(np.float64)
        if self.dist == "uniform":
            return self.a + (self.b - self.a) * rng.random(n)
        if self.dist == "logistic":
            u = rng.random(n)
            return self.a * (np.log(u) - np.log1p(-u))
        raise ScmError(f"unknown noise distribution {self.dist!r}")

    @classmethod
    def from_dict(cls, d: Mapping) -> "Noise":
        dist = d.get("dist", "gaussian")
        if dist == "gaussian":
            return cls("gaussian", float(d.get("std", 1.0)))
        if dist == "bernoulli":
            p = float(d["p"])
            if not 0.0 <= p <= 1.0:
                raise ScmError("bernoulli p must lie in [0, 1]")
            return cls("bernoulli", p)
        if dist == "uniform":
            return cls("uniform", float(d.get("low", 0.0)), float(d.get("high", 1.0)))
        if dist == "logistic":
            return cls("logistic", float(d.get("scale", 1.0)))
        raise ScmError(f"unknown noise distribution {dist!r}")

    def to_dict(self) -> dict:
        if self.dist == "gaussian":
            return {"dist": "gaussian", "std": self.a}
        if self.dist == "bernoulli":
            return {"dist": "bernoulli", "p": self.a}
        if self.dist == "uniform":
            return {"dist": "uniform", "low": self.a, "high": self.b}
        return {"dist": "logistic", "scale": self.a}


# ---------------------------------------------------------------------------
# prefix expressions

_UNARY = {"tanh": np.tanh, "sin": np.sin, "round": np.round, "neg": np.negative}
_ARITY = {"+": (1, None), "*": (1, None), "-": (1, 2), "pow": (2, 2), "ind": (2, 2),
          "gt": (2, 2), "xor": (2, 2), "clip": (3, 3),
          **{k: (1, 1) for k in _UNARY}}


def validate_expression(expr, symbols: Iterable[str], params: Mapping[str, float] | None = None,
                        path: str = "expr") -> set:
    """Recursive-descent check of a prefix expression; returns the node labels it references."""
    symbols = set(symbols)
    params = params or {}
    used: set = set()

    def walk(e, where):
        if isinstance(e, bool):
            raise ExpressionError(f"{where}: booleans are not valid operands")
        if isinstance(e, (int, float)):
            if not math.isfinite(e):
                raise ExpressionError(f"{where}: non-finite constant")
            return
        if isinstance(e, str):
            if e.startswith("$"):
                if e[1:] not in params:
                    raise ExpressionError(f"{where}: unknown parameter {e!r}")
                return
            if e == NOISE or e in symbols:
                used.add(e)
                return
            raise ExpressionError(f"{where}: unknown symbol {e!r}")
        if not isinstance(e, list) or not e:
            raise ExpressionError(f"{where}: expected number, symbol or [op, ...]")
        op, args = e[0], e[1:]
        if op not in _ARITY:
            raise ExpressionError(f"{where}: unknown operator {op!r}")
        lo, hi = _ARITY[op]
        if len(args) < lo or (hi is not None and len(args) > hi):
            raise ExpressionError(f"{where}: operator {op!r} takes {lo}..{hi or 'n'} arguments, got {len(args)}")
        if op == "pow" and not isinstance(args[1], (int, float)):
            raise ExpressionError(f"{where}: pow exponent must be a scalar constant")
        for i, a in enumerate(args):
            walk(a, f"{where}[{i + 1}]")

    walk(expr, path)
    return used


def eval_expression(expr, values: Mapping[str, np.ndarray], noise: np.ndarray | None,
                    params: Mapping[str, float] | None = None, n: int | None = None):
    if isinstance(expr, (int, float)):
        return float(expr)
    if isinstance(expr, str):
        if expr.startswith("$"):
            return float(params[expr[1:]])
        if expr == NOISE:
            return noise
        return values[expr]
    op, args = expr[0], expr[1:]
    ev = [eval_expression(a, values, noise, params) for a in args]
    if op == "+":
        out = ev[0]
        for v in ev[1:]:
            out = out + v
        return out
    if op == "*":
        out = ev[0]
        for v in ev[1:]:
            out = out * v
        return out
    if op == "-":
        return -ev[0] if len(ev) == 1 else ev[0] - ev[1]
    if op == "pow":
        return np.power(ev[0], ev[1])
    if op == "ind":
        return np.asarray(ev[0] <= ev[1], dtype=np.float64)
    if op == "gt":
        return np.asarray(ev[0] > ev[1], dtype=np.float64)
    if op == "xor":
        return np.mod(np.rint(ev[0]) + np.rint(ev[1]), 2.0)
    if op == "clip":
        return np.clip(ev[0], ev[1], ev[2])
    return _UNARY[op](ev[0])


# ---------------------------------------------------------------------------
# mechanisms


class Mechanism:
    kind: str = ""
    parents: tuple[str, ...] = ()

    def draw_noise(self, rng: np.random.Generator, n: int) -> np.ndarray:
        raise NotImplementedError

    def apply(self, values: Mapping[str, np.ndarray], noise: np.ndarray, n: int) -> np.ndarray:
        raise NotImplementedError

    @property
    def support(self) -> tuple | None:
        return None

    def distribution(self, parent_values: tuple) -> tuple[tuple, np.ndarray]:
        raise UnsupportedError(f"{self.kind} mechanism has no finite conditional table")


@dataclass(frozen=True)
class LinearGaussian(Mechanism):
    parents: tuple[str, ...] = ()
    coefs: tuple[float, ...] = ()
    intercept: float = 0.0
    noise_std: float = 1.0
    kind: str = "linear"

    def __post_init__(self):
        if len(self.parents) != len(self.coefs):
            raise ScmError("linear mechanism needs one coefficient per parent")
        if self.noise_std < 0:
            raise ScmError("noise std must be nonnegative")

    def draw_noise(self, rng, n):
        return rng.standard_normal(n)

    def apply(self, values, noise, n):
        out = np.full(n, float(self.intercept))
        for p, c in zip(self.parents, self.coefs):
            out = out + c * values[p]
        return out + self.noise_std * noise

    def coef(self, parent: str) -> float:
        return dict(zip(self.parents, self.coefs)).get(parent, 0.0)


@dataclass(frozen=True)
class Expression(Mechanism):
    parents: tuple[str, ...] = ()
    expr: object = 0.0
    noise: Noise = field(default_factory=Noise)
    params: tuple = ()
    kind: str = "expression"

    def __post_init__(self):
        used = validate_expression(self.expr, self.parents, dict(self.params))
        extra = used - set(self.parents) - {NOISE}
        if extra:
            raise ExpressionError(f"expression references undeclared symbols {sorted(extra)}")

    def draw_noise(self, rng, n):
        return self.noise.draw(rng, n)

    def apply(self, values, noise, n):
        out = eval_expression(self.expr, values, noise, dict(self.params))
        return np.broadcast_to(np.asarray(out, dtype=np.float64), (n,)).copy()


@dataclass(frozen=True)
class DiscreteTable(Mechanism):
    """``P(X = support[k] | parents = config)`` stored per parent configuration."""

    parents: tuple[str, ...] = ()
    table_support: tuple = (0.0, 1.0)
    rows: tuple = ()  # ((config tuple, prob tuple), ...)
    kind: str = "table"

    def __post_init__(self):
        for cfg, probs in self.rows:
            if len(cfg) != len(self.parents):
                raise ScmError("table configuration length does not match parents")
            if len(probs) != len(self.table_support):
                raise ScmError("table row length does not match support")
            if min(probs) < 0 or abs(sum(probs) - 1.0) > 1e-12:
                raise ScmError(f"table row for {cfg} does not sum to one")

    @classmethod
    def from_mapping(cls, parents, mapping: Mapping[tuple, Sequence[float]], support=(0.0, 1.0)):
        rows = tuple((tuple(float(v) for v in cfg), tuple(float(p) for p in probs))
                     for cfg, probs in mapping.items())
        return cls(tuple(parents), tuple(float(s) for s in support), rows)

    @classmethod
    def bernoulli(cls, parents, p1: Mapping[tuple, float] | float):
        if not isinstance(p1, Mapping):
            p1 = {(): float(p1)}
        return cls.from_mapping(parents, {cfg: (1.0 - p, p) for cfg, p in p1.items()})

    @property
    def support(self):
        return self.table_support

    def _lookup(self):
        return {cfg: np.asarray(p) for cfg, p in self.rows}

    def distribution(self, parent_values):
        key = tuple(float(v) for v in parent_values)
        table = self._lookup()
        if key not in table:
            raise SamplingError(f"table has no row for parent configuration {key}")
        return self.table_support, table[key]

    def draw_noise(self, rng, n):
        return rng.random(n)

    def apply(self, values, noise, n):
        supp = np.asarray(self.table_support)
        if not self.parents:
            cdf = np.cumsum(self._lookup()[()])
            idx = np.searchsorted(cdf, noise, side="right")
            return supp[np.minimum(idx, len(supp) - 1)]
        cols = np.column_stack([values[p] for p in self.parents])
        uniq, inv = np.unique(cols, axis=0, return_inverse=True)
        inv = inv.reshape(-1)
        table = self._lookup()
        out = np.empty(n)
        for k, cfg in enumerate(uniq):
            key = tuple(float(v) for v in cfg)
            if key not in table:
                raise SamplingError(f"table has no row for parent configuration {key}")
            mask = inv == k
            idx = np.searchsorted(np.cumsum(table[key]), noise[mask], side="right")
            out[mask] = supp[np.minimum(idx, len(supp) - 1)]
        return out


@dataclass(frozen=True)
class PointMass(Mechanism):
    value: float = 0.0
    parents: tuple[str, ...] = ()
    kind: str = "point"

    def draw_noise(self, rng, n):
        return np.zeros(n)

    def apply(self, values, noise, n):
        return np.full(n, float(self.value))

    @property
    def support(self):
        return (float(self.value),)

    def distribution(self, parent_values):
        return (float(self.value),), np.ones(1)


@dataclass
class PerturbationPolicy:
    """Bounded additive perturbation ``bound * tanh(net(inputs))`` for one intervened node.

    ``inputs`` may contain parent labels, validated action parents and ``"eps"``
    (the node's own standardized noise). ``kind="constant"`` outputs
    ``clip(theta[0], -bound, bound)``.
    """

    target: str
    inputs: tuple[str, ...]
    bound: float
    hidden: tuple[int, ...] = (16, 16)
    theta: np.ndarray | None = None
    kind: str = "mlp"

    def __post_init__(self):
        if self.bound < 0:
            raise ScmError("perturbation bound must be nonnegative")
        self.inputs = tuple(self.inputs)
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.theta is None:
            self.theta = np.zeros(self.n_params)
        self.theta = np.asarray(self.theta, dtype=np.float64)
        if self.theta.shape != (self.n_params,):
            raise ScmError(f"policy for {self.target} expects {self.n_params} parameters")

    @property
    def n_params(self) -> int:
        if self.kind == "constant":
            return 1
        return _kernels.policy_param_count(len(self.inputs), self.hidden)

    @property
    def sizes(self) -> np.ndarray:
        return np.array([len(self.inputs), *self.hidden, 1], dtype=np.int64)

    def with_theta(self, theta) -> "PerturbationPolicy":
        return PerturbationPolicy(self.target, self.inputs, self.bound, self.hidden,
                                  np.array(theta, dtype=np.float64), self.kind)

    def init_theta(self, rng: np.random.Generator, scale: float = 1.0) -> np.ndarray:
        if self.kind == "constant":
            return rng.uniform(-self.bound, self.bound, 1)
        parts = []
        sizes = self.sizes
        for a, b in zip(sizes[:-1], sizes[1:]):
            parts.append(rng.normal(0.0, scale / np.sqrt(a), a * b))
            parts.append(np.zeros(b))
        return np.concatenate(parts)

    def __call__(self, values: Mapping[str, np.ndarray], noise: np.ndarray, n: int) -> np.ndarray:
        if self.bound == 0.0:
            return np.zeros(n)
        if self.kind == "constant":
            return np.full(n, float(np.clip(self.theta[0], -self.bound, self.bound)))
        X = np.column_stack([noise if v == NOISE else values[v] for v in self.inputs]) if self.inputs \
            else np.zeros((n, 0))
        return _kernels.policy_forward(X, self.theta, self.sizes, self.bound)


@dataclass(frozen=True)
class Perturbed(Mechanism):
    """Base assignment plus a bounded policy output; the policy sees the base noise."""

    base: Mechanism = None
    policy: PerturbationPolicy = None
    kind: str = "perturbed"

    @property
    def parents(self):
        extra = tuple(v for v in self.policy.inputs if v != NOISE and v not in self.base.parents)
        return tuple(self.base.parents) + extra

    def draw_noise(self, rng, n):
        return self.base.draw_noise(rng, n)

    def apply(self, values, noise, n):
        return self.base.apply(values, noise, n) + self.policy(values, noise, n)


def mechanism_from_dict(d: Mapping, params: Mapping[str, float] | None = None) -> Mechanism:
    kind = d.get("kind")
    params = params or {}
    resolve = (lambda v: float(eval_expression(v, {}, None, params)))
    if kind == "linear":
        coefs = d.get("coefs", {})
        parents = tuple(coefs)
        return LinearGaussian(parents, tuple(resolve(coefs[p]) for p in parents),
                              resolve(d.get("intercept", 0.0)), resolve(d.get("noise_std", 1.0)))
    if kind == "expression":
        return Expression(tuple(d.get("parents", ())), d["expr"], Noise.from_dict(d.get("noise", {})),
                          tuple(sorted(params.items())))
    if kind == "table":
        parents = tuple(d.get("parents", ()))
        support = tuple(float(s) for s in d.get("support", (0, 1)))
        if "p1" in d:
            p1 = d["p1"]
            if not isinstance(p1, Mapping):
                p1 = {"": p1}
            mapping = {_parse_cfg(k): resolve(v) for k, v in p1.items()}
            return DiscreteTable.bernoulli(parents, mapping)
        mapping = {_parse_cfg(k): [resolve(v) for v in probs] for k, probs in d["probs"].items()}
        return DiscreteTable.from_mapping(parents, mapping, support)
    if kind == "point":
        return PointMass(resolve(d["value"]))
    raise ScmError(f"unknown mechanism kind {kind!r}")


def _parse_cfg(key: str) -> tuple:
    key = key.strip()
    return tuple(float(v) for v in key.split(",")) if key else ()


# ---------------------------------------------------------------------------
# SCMs and environment families


@dataclass(frozen=True)
class Scm:
    dag: Dag
    mechanisms: Mapping[str, Mechanism]
    task: str = "regression"
    action_sets: Mapping[str, tuple] = field(default_factory=dict)

    def __post_init__(self):
        if self.task not in ("regression", "classification"):
            raise ScmError(f"unknown task {self.task!r}")
        dag = self.dag
        for v in dag.nodes:
            if v == dag.env:
                if v in self.mechanisms:
                    raise ScmError("the environment node takes no mechanism")
                continue
            if v not in self.mechanisms:
                raise ScmError(f"node {v} has no mechanism")
            expected = set(dag.parents(v)) - {dag.env}
            if set(self.mechanisms[v].parents) != expected:
                raise ScmError(f"mechanism parents of {v} {sorted(self.mechanisms[v].parents)} "
                               f"differ from graph parents {sorted(expected)}")
        if self.action_sets:
            report = validate_augmentation(dag, self.action_sets)
            if not report.ok:
                raise GraphError(str(report))

    @property
    def covariates(self) -> tuple[str, ...]:
        return self.dag.covariates

    @property
    def order(self) -> tuple[str, ...]:
        return tuple(v for v in self.dag.topological_order() if v != self.dag.env)

    def allowed_inputs(self, node: str) -> set:
        return (set(self.dag.parents(node)) - {self.dag.env}) | set(self.action_sets.get(node, ()))

    def check_override(self, node: str, mech: Mechanism) -> None:
        if node not in self.dag.children(self.dag.env):
            raise ScmError(f"override on {node}, which is not a child of {self.dag.env}")
        extra = set(mech.parents) - self.allowed_inputs(node)
        if extra:
            raise ScmError(f"override of {node} uses inputs {sorted(extra)} outside parents and action set")

    def effective(self, overrides: Mapping[str, Mechanism]) -> dict[str, Mechanism]:
        mech = dict(self.mechanisms)
        for k, m in overrides.items():
            self.check_override(k, m)
            mech[k] = m
        return mech

    def effective_order(self, mechs: Mapping[str, Mechanism]) -> tuple[str, ...]:
        extra = [(p, v) for v, m in mechs.items() for p in m.parents if p not in self.dag.parents(v)]
        if not extra:
            return self.order
        g = self.dag.with_edges(extra)
        return tuple(v for v in g.topological_order() if v != self.dag.env)


@dataclass(frozen=True)
class Environment:
    label: int
    overrides: Mapping[str, Mechanism] = field(default_factory=dict)
    params: tuple[float, ...] = ()
    name: str = ""


@dataclass(frozen=True)
class EnvironmentFamily:
    environments: tuple[Environment, ...]
    training: tuple[int, ...] = ()
    reference: int | None = None

    def __post_init__(self):
        labels = [e.label for e in self.environments]
        if not labels:
            raise ScmError("environment family is empty")
        if len(set(labels)) != len(labels):
            raise ScmError("environment labels must be unique")
        if any(l < 0 for l in labels):
            raise ScmError("environment labels are 0-indexed nonnegative integers")
        missing = set(self.training) - set(labels)
        if missing:
            raise ScmError(f"training labels {sorted(missing)} not in family")
        if self.reference is not None and self.reference not in labels:
            raise ScmError(f"reference label {self.reference} not in family")

    @property
    def labels(self) -> tuple[int, ...]:
        return tuple(e.label for e in self.environments)

    def __getitem__(self, label: int) -> Environment:
        for e in self.environments:
            if e.label == label:
                return e
        raise KeyError(f"environment {label} not in family")

    def __len__(self):
        return len(self.environments)

    def validate(self, scm: Scm) -> None:
        for e in self.environments:
            for node, m in e.overrides.items():
                scm.check_override(node, m)
            scm.effective_order(scm.effective(e.overrides))

    def subfamily(self, labels: Iterable[int]) -> "EnvironmentFamily":
        keep = set(labels)
        envs = tuple(e for e in self.environments if e.label in keep)
        ref = self.reference if self.reference in keep else None
        return EnvironmentFamily(envs, tuple(l for l in self.training if l in keep), ref)

    def with_environment(self, env: Environment) -> "EnvironmentFamily":
        envs = tuple(e for e in self.environments if e.label != env.label) + (env,)
        return EnvironmentFamily(envs, self.training, self.reference)


def single_environment(label: int = 0) -> EnvironmentFamily:
    return EnvironmentFamily((Environment(label),), (label,), label)


# ---------------------------------------------------------------------------
# datasets


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray
    env: np.ndarray
    columns: tuple[str, ...]
    task: str = "regression"

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.float64)
        self.env = np.asarray(self.env, dtype=np.int64)
        self.columns = tuple(self.columns)
        n = self.y.shape[0]
        if self.X.shape != (n, len(self.columns)) or self.env.shape != (n,):
            raise ScmError("inconsistent dataset shapes")
        if self.task == "classification" and not np.isin(self.y, (0.0, 1.0)).all():
            raise ScmError("classification responses must be 0/1")

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def envs(self) -> np.ndarray:
        return np.unique(self.env)

    def col(self, label: str) -> np.ndarray:
        return self.X[:, self.columns.index(label)]

    def cols(self, labels: Sequence[str]) -> np.ndarray:
        idx = [self.columns.index(v) for v in labels]
        return self.X[:, idx]

    def take(self, idx) -> "Dataset":
        return Dataset(self.X[idx], self.y[idx], self.env[idx], self.columns, self.task)

    def filter_env(self, label) -> "Dataset":
        return self.take(self.env == label)

    @staticmethod
    def concat(parts: Sequence["Dataset"]) -> "Dataset":
        first = parts[0]
        return Dataset(np.vstack([p.X for p in parts]), np.concatenate([p.y for p in parts]),
                       np.concatenate([p.env for p in parts]), first.columns, first.task)

    def to_csv(self, path_or_buf=None) -> str | None:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow([f"x_{c}" for c in self.columns] + ["y", "env"])
        for row, y, e in zip(self.X, self.y, self.env):
            w.writerow([repr(float(v)) for v in row] + [repr(float(y)), int(e)])
        text = buf.getvalue()
        if path_or_buf is None:
            return text
        with open(path_or_buf, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        return None

    @classmethod
    def from_csv(cls, path, task: str | None = None) -> "Dataset":
        with open(path, encoding="utf-8", newline="") as fh:
            rows = list(csv.reader(fh))
        header = rows[0]
        if header[-2:] != ["y", "env"] or not all(h.startswith("x_") for h in header[:-2]):
            raise ScmError("dataset CSV header must be x_<label>...,y,env")
        data = np.array([[float(v) for v in r] for r in rows[1:] if r], dtype=np.float64)
        if data.size == 0:
            raise ScmError("dataset CSV has no rows")
        y = data[:, -2]
        if task is None:
            task = "classification" if np.isin(y, (0.0, 1.0)).all() else "regression"
        return cls(data[:, :-2], y, data[:, -1].astype(np.int64), [h[2:] for h in header[:-2]], task)


# ---------------------------------------------------------------------------
# sampling


def node_rng(seed: int, env_label: int, node_index: int) -> np.random.Generator:
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(env_label), int(node_index)))
    return np.random.Generator(np.random.Philox(ss))


def simulate(scm: Scm, overrides: Mapping[str, Mechanism], n: int, seed: int,
             env_label: int = 0) -> dict[str, np.ndarray]:
    """Forward-sample all non-environment nodes; returns label -> values."""
    if n < 1:
        raise ScmError("sample size must be at least 1")
    mechs = scm.effective(overrides)
    values: dict[str, np.ndarray] = {}
    node_index = {v: i for i, v in enumerate(scm.dag.nodes)}
    for v in scm.effective_order(mechs):
        m = mechs[v]
        noise = m.draw_noise(node_rng(seed, env_label, node_index[v]), n)
        with np.errstate(all="ignore"):
            x = m.apply(values, noise, n)
        if not np.all(np.isfinite(x)):
            raise SamplingError(f"non-finite values generated at node {v}")
        values[v] = x
    return values


def to_dataset(scm: Scm, values: Mapping[str, np.ndarray], env_label: int) -> Dataset:
    n = values[scm.dag.response].shape[0]
    X = np.column_stack([values[c] for c in scm.covariates]) if scm.covariates else np.zeros((n, 0))
    return Dataset(X, values[scm.dag.response], np.full(n, env_label), scm.covariates, scm.task)


def sample(scm: Scm, family: EnvironmentFamily, env: int, n: int, seed: int) -> Dataset:
    e = family[env]
    return to_dataset(scm, simulate(scm, e.overrides, n, seed, e.label), e.label)


def sample_pooled(scm: Scm, family: EnvironmentFamily, envs: Sequence[int] | None, n_per_env: int,
                  seed: int) -> Dataset:
    envs = family.training if envs is None else envs
    return Dataset.concat([sample(scm, family, e, n_per_env, seed) for e in envs])


def make_perturbed_env(scm: Scm, policies: Mapping[str, PerturbationPolicy], label: int,
                       base: Environment | None = None, name: str = "") -> Environment:
    """Environment whose intervened nodes get ``assignment + bounded policy output``."""
    overrides = dict(base.overrides) if base is not None else {}
    for j, pol in policies.items():
        if pol.target != j:
            raise ScmError(f"policy target {pol.target} registered under {j}")
        allowed = scm.allowed_inputs(j) | {NOISE}
        bad = set(pol.inputs) - allowed
        if bad:
            raise ScmError(f"policy on {j} uses forbidden inputs {sorted(bad)}")
        base_mech = overrides.get(j, scm.mechanisms[j])
        overrides[j] = Perturbed(base=base_mech, policy=pol)
    env = Environment(label, overrides, base.params if base else (), name)
    for k, m in overrides.items():
        scm.check_override(k, m)
    return env


# ---------------------------------------------------------------------------
# exact enumeration


@dataclass(frozen=True)
class DiscreteJoint:
    labels: tuple[str, ...]
    states: np.ndarray
    probs: np.ndarray

    def column(self, label: str) -> np.ndarray:
        return self.states[:, self.labels.index(label)]

    def matrix(self, labels: Sequence[str]) -> np.ndarray:
        idx = [self.labels.index(v) for v in labels]
        return self.states[:, idx]

    def expect(self, values: np.ndarray) -> float:
        return float(np.dot(self.probs, values))

    def marginal(self, labels: Sequence[str]) -> dict[tuple, float]:
        out: dict[tuple, float] = {}
        for cfg, p in zip(map(tuple, self.matrix(labels)), self.probs):
            out[cfg] = out.get(cfg, 0.0) + p
        return out

    def conditional_mean(self, target: str, given: Sequence[str]) -> dict[tuple, float]:
        t = self.column(target)
        num: dict[tuple, float] = {}
        den: dict[tuple, float] = {}
        for cfg, p, v in zip(map(tuple, self.matrix(given)), self.probs, t):
            num[cfg] = num.get(cfg, 0.0) + p * v
            den[cfg] = den.get(cfg, 0.0) + p
        return {k: num[k] / den[k] for k in num if den[k] > 0}


def enumerate_joint(scm: Scm, overrides: Mapping[str, Mechanism] | None = None,
                    max_states: int = MAX_STATES) -> DiscreteJoint:
    mechs = scm.effective(overrides or {})
    order = scm.effective_order(mechs)
    labels: list[str] = []
    states = np.zeros((1, 0))
    probs = np.ones(1)
    for v in order:
        m = mechs[v]
        if m.support is None:
            raise UnsupportedError(f"node {v} has a continuous mechanism ({m.kind})")
        supp = np.asarray(m.support, dtype=np.float64)
        if states.shape[0] * len(supp) > max_states:
            raise MemoryError(f"state space exceeds {max_states} configurations at node {v}")
        pidx = [labels.index(p) for p in m.parents]
        block = np.zeros((states.shape[0], len(supp)))
        if pidx:
            cfgs, inv = np.unique(states[:, pidx], axis=0, return_inverse=True)
            inv = inv.reshape(-1)
            for k, cfg in enumerate(cfgs):
                _, dist = m.distribution(tuple(cfg))
                block[inv == k] = dist
        else:
            _, dist = m.distribution(())
            block[:] = dist
        new_p = (probs[:, None] * block).reshape(-1)
        new_s = np.column_stack([np.repeat(states, len(supp), axis=0), np.tile(supp, states.shape[0])])
        keep = new_p > 0
        states, probs = new_s[keep], new_p[keep]
        labels.append(v)
    return DiscreteJoint(tuple(labels), states, probs)


def enumerate_discrete(scm: Scm, family: EnvironmentFamily, env: int,
                       max_states: int = MAX_STATES) -> DiscreteJoint:
    return enumerate_joint(scm, family[env].overrides, max_states)


# ---------------------------------------------------------------------------
# JSON form


def scm_from_dict(d: Mapping, params: Mapping[str, float] | None = None) -> tuple[Scm, EnvironmentFamily]:
    """Build ``(Scm, EnvironmentFamily)`` from the scenario JSON layout.

    ``params`` overrides the document's own ``params`` entries (referenced as ``"$name"``).
    """
    pars = {k: float(v) for k, v in dict(d.get("params", {})).items()}
    pars.update({k: float(v) for k, v in dict(params or {}).items()})
    dag_d = d["dag"]
    dag = Dag.from_dict(dag_d)
    action_sets = {k: tuple(v) for k, v in dag_d.get("action_sets", {}).items()}
    mechs = {v: mechanism_from_dict(m, pars) for v, m in d["mechanisms"].items()}
    scm = Scm(dag, mechs, d.get("task", "regression"), action_sets)
    envs = []
    for e in d["environments"]:
        over = {v: mechanism_from_dict(m, pars) for v, m in e.get("overrides", {}).items()}
        coords = tuple(float(eval_expression(c, {}, None, pars)) for c in e.get("coords", ()))
        envs.append(Environment(int(e["label"]), over, coords, e.get("name", "")))
    labels = [e.label for e in envs]
    family = EnvironmentFamily(tuple(envs), tuple(d.get("training", labels)), d.get("reference", labels[0]))
    family.validate(scm)
    return scm, family

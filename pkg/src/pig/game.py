"""Leader/follower games: follower best responses, worst-case risk and exact theory oracles."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .gaussian import (AffinePredictor, LinearScmView, population_regression, population_risk,
                       residual_loadings)
from .graph import (Dag, check_star_condition, forbidden_descendants, random_dag, stable_blanket)
from .predictors import Loss, TablePredictor, default_loss, eval_loss
from .scm import (NOISE, DiscreteTable, Environment, EnvironmentFamily, LinearGaussian, PerturbationPolicy,
                  Scm, ScmError, UnsupportedError, enumerate_joint, make_perturbed_env, node_rng, simulate)

EXACT_TIE = 1e-12


class GameError(ValueError):
    pass


# ---------------------------------------------------------------------------
# objectives and backends


@dataclass(frozen=True)
class FollowerObjective:
    """``leaderRisk``: the leader's risk. ``meanPrediction``: ``sign * (alpha + beta * E f)``.
    ``affinePredMinusCost``: ``E[alpha + beta f(X) - c_e(X)]`` with ``cost(env, values)``.
    """

    kind: str = "leaderRisk"
    sign: float = 1.0
    alpha: float = 0.0
    beta: float = 1.0
    cost: Callable | None = None

    def __post_init__(self):
        if self.kind not in ("leaderRisk", "meanPrediction", "affinePredMinusCost"):
            raise GameError(f"unknown follower objective {self.kind!r}")

    def pointwise(self, env: int, pred: np.ndarray, y: np.ndarray, values: Mapping, loss: Loss) -> np.ndarray:
        if self.kind == "leaderRisk":
            return eval_loss(loss, y, pred)
        if self.kind == "meanPrediction":
            return self.sign * (self.alpha + self.beta * pred)
        c = self.cost(env, values) if self.cost is not None else 0.0
        return self.alpha + self.beta * pred - c


LEADER_RISK = FollowerObjective()


@dataclass(frozen=True)
class Backend:
    kind: str = "mc"  # exact | analytic | mc
    n: int = 100000
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("exact", "analytic", "mc"):
            raise GameError(f"unknown backend {self.kind!r}")


@dataclass
class EnvEval:
    value: float
    value_se: float
    risk: float
    risk_se: float


def _predict_values(f, values: Mapping[str, np.ndarray]) -> np.ndarray:
    X = np.column_stack([values[c] for c in f.columns]) if f.columns else np.zeros((len(next(iter(values.values()))), 0))
    return f.predict(X)


def _mean_se(v: np.ndarray) -> tuple[float, float]:
    n = v.shape[0]
    return float(np.mean(v)), float(np.std(v, ddof=1) / math.sqrt(n)) if n > 1 else 0.0


def evaluate_env(f, scm: Scm, env: Environment, obj: FollowerObjective, loss: Loss, backend: Backend,
                 view: LinearScmView | None = None) -> EnvEval:
    y_label = scm.dag.response
    if backend.kind == "exact":
        joint = enumerate_joint(scm, env.overrides)
        values = {v: joint.column(v) for v in joint.labels}
        pred = _predict_values(f, values)
        y = values[y_label]
        val = joint.expect(obj.pointwise(env.label, pred, y, values, loss))
        risk = joint.expect(eval_loss(loss, y, pred))
        return EnvEval(val, 0.0, risk, 0.0)
    if backend.kind == "analytic":
        if not isinstance(f, AffinePredictor) or loss.kind != "squared":
            raise GameError("the analytic backend needs an affine predictor and squared loss")
        view = view or LinearScmView.from_scm(scm, EnvironmentFamily((env,)))
        risk = population_risk(view, env.label, f)
        if obj.kind == "leaderRisk":
            return EnvEval(risk, 0.0, risk, 0.0)
        if obj.kind == "meanPrediction" or obj.cost is None:
            from .gaussian import joint_moments

            mean, _ = joint_moments(view, env.label)
            ef = f.intercept + sum(w * mean[view.index(v)] for v, w in zip(f.subset, f.weights))
            val = obj.alpha + obj.beta * ef
            return EnvEval(obj.sign * val if obj.kind == "meanPrediction" else val, 0.0, risk, 0.0)
        raise GameError("state-dependent costs need the exact or Monte Carlo backend")
    values = simulate(scm, env.overrides, backend.n, backend.seed, env.label)
    pred = _predict_values(f, values)
    y = values[y_label]
    val, val_se = _mean_se(obj.pointwise(env.label, pred, y, values, loss))
    risk, risk_se = _mean_se(eval_loss(loss, y, pred))
    return EnvEval(val, val_se, risk, risk_se)


# ---------------------------------------------------------------------------
# outcomes


@dataclass
class GameOutcome:
    predictor: str
    b: float
    chosen: tuple
    follower_value: float
    leader_risk: float
    worst_case: float
    risks: dict = field(default_factory=dict)
    values: dict = field(default_factory=dict)
    risk_se: dict = field(default_factory=dict)
    policies: dict = field(default_factory=dict)
    flags: tuple = ()

    def row(self, replicate: int = 0, seed: int = 0) -> dict:
        return {"predictor": self.predictor, "b": self.b,
                "chosen_env": "|".join(str(c) for c in self.chosen),
                "follower_value": self.follower_value, "leader_risk": self.leader_risk,
                "worst_case": self.worst_case, "replicate": replicate, "seed": seed}


def choice_set(family: EnvironmentFamily, b: float, scale: Sequence[float] | None = None) -> list[int]:
    """The ``ceil(|family| * b)`` environments nearest the reference in normalized sup-distance."""
    if len(family) == 0:
        raise GameError("empty environment family")
    if not 0.0 <= b <= 1.0:
        raise GameError("bound must lie in [0, 1]")
    ref = family.reference if family.reference is not None else family.environments[0].label
    if b == 0.0:
        return [ref]
    k = math.ceil(len(family) * b - 1e-12)
    r = np.asarray(family[ref].params, dtype=np.float64)
    dist = []
    for e in family.environments:
        p = np.asarray(e.params, dtype=np.float64)
        if p.shape != r.shape:
            raise GameError("environment parameter vectors differ in length")
        s = np.ones_like(r) if scale is None else np.asarray(scale, dtype=np.float64)
        d = float(np.max(np.abs(p - r) / s)) if r.size else 0.0
        dist.append((0.0 if e.label == ref else d, e.label != ref, e.label))
    dist.sort()
    return [lab for _, _, lab in dist[:k]]


def best_response_set(values: Mapping[int, float], ses: Mapping[int, float], exact: bool) -> tuple:
    vmax = max(values.values())
    out = []
    for e, v in values.items():
        tol = EXACT_TIE if exact else 2.0 * max(ses[e], ses[max(values, key=values.get)])
        if v >= vmax - tol:
            out.append(e)
    return tuple(sorted(out))


def follower_grid_response(f, scm: Scm, family: EnvironmentFamily, obj: FollowerObjective = LEADER_RISK,
                           b: float = 1.0, backend: Backend = Backend(), loss: Loss | None = None,
                           scale: Sequence[float] | None = None, name: str = "f",
                           view: LinearScmView | None = None) -> GameOutcome:
    """Follower picks among the environments nearest the reference; the leader suffers the worst tie."""
    loss = loss or default_loss(scm.task)
    choices = choice_set(family, b, scale)
    evals = {e.label: evaluate_env(f, scm, e, obj, loss, backend, view)
             for e in family.environments}
    vals = {e: evals[e].value for e in choices}
    ses = {e: evals[e].value_se for e in choices}
    star = best_response_set(vals, ses, backend.kind != "mc")
    risks = {e: ev.risk for e, ev in evals.items()}
    return GameOutcome(name, b, star, max(vals[e] for e in star), max(risks[e] for e in star),
                       max(risks.values()), risks, {e: ev.value for e, ev in evals.items()},
                       {e: ev.risk_se for e, ev in evals.items()})


def worst_case_risk(f, scm: Scm, family: EnvironmentFamily, loss: Loss | None = None,
                    backend: Backend = Backend(), view: LinearScmView | None = None) -> tuple[float, dict]:
    loss = loss or default_loss(scm.task)
    if backend.kind == "analytic":
        try:
            view = view or LinearScmView.from_scm(scm, family)
        except UnsupportedError as exc:
            raise GameError(f"analytic backend: {exc}") from exc
    if backend.kind == "exact":
        for v, m in scm.mechanisms.items():
            if m.support is None:
                raise GameError(f"exact backend needs discrete mechanisms; {v} is {m.kind}")
    table = {e.label: evaluate_env(f, scm, e, LEADER_RISK, loss, backend, view).risk for e in family.environments}
    return max(table.values()), table


# ---------------------------------------------------------------------------
# bounded perturbation follower


@dataclass(frozen=True)
class OptimizerConfig:
    population: int = 16
    iterations: int = 300
    restarts: int = 5
    batch: int = 512
    n_holdout: int = 10000
    n_eval: int = 10000
    hidden: tuple[int, ...] = (16, 16)
    sigma0: float = 0.3
    init_scale: float = 1.0

    @classmethod
    def from_dict(cls, d: Mapping | None) -> "OptimizerConfig":
        d = dict(d or {})
        if "hidden" in d:
            d["hidden"] = tuple(d["hidden"])
        return cls(**d)


def _stream_seed(seed: int, *key: int) -> int:
    return int(np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key)).generate_state(1)[0])


def follower_perturbation_response(f, scm: Scm, targets: Mapping[str, Sequence[str]],
                                   obj: FollowerObjective = LEADER_RISK, b: float = 1.0,
                                   cfg: OptimizerConfig = OptimizerConfig(), seed: int = 0,
                                   eval_seed: int | None = None, base: Environment | None = None,
                                   loss: Loss | None = None, view: LinearScmView | None = None,
                                   name: str = "f", label: int = 0):
    """Optimize bounded additive perturbations of ``targets`` by a (1+lambda) evolution strategy.

    Each restart starts from a random network, scores parent and offspring on a
    common fresh batch per iteration, and adapts the step size by the one-fifth
    rule. The restart with the best held-out objective wins; the deployment risk
    is measured on a final fresh sample drawn with ``eval_seed``. When ``view``
    is given, ``f`` is affine and the residual does not load on any target, the
    deployment risk is reported in closed form.
    """
    loss = loss or default_loss(scm.task)
    base = base or Environment(label)
    for j, inputs in targets.items():
        if j not in scm.dag.children(scm.dag.env):
            raise ScmError(f"perturbation target {j} is not a child of {scm.dag.env}")
        bad = set(inputs) - (scm.allowed_inputs(j) | {NOISE})
        if bad:
            raise ScmError(f"perturbation of {j} uses forbidden inputs {sorted(bad)}")
    templates = {j: PerturbationPolicy(j, tuple(inp), b, cfg.hidden) for j, inp in targets.items()}
    sizes = [templates[j].n_params for j in templates]
    splits = np.cumsum(sizes)[:-1]

    def policies(theta):
        return {j: templates[j].with_theta(part) for j, part in zip(templates, np.split(theta, splits))}

    def objective(theta, n, s):
        env = make_perturbed_env(scm, policies(theta), base.label, base)
        values = simulate(scm, env.overrides, n, s, base.label)
        pred = _predict_values(f, values)
        return float(np.mean(obj.pointwise(base.label, pred, values[scm.dag.response], values, loss)))

    flags = []
    holdout_seed = _stream_seed(seed, 0xD0)
    best_theta, best_val = np.zeros(sum(sizes)), -np.inf
    closed_form = False
    if view is not None and isinstance(f, AffinePredictor) and loss.kind == "squared":
        loads = residual_loadings(view, base.label, f)
        scale = max(1.0, max(abs(v) for v in loads.values()))
        closed_form = all(abs(loads[j]) <= 1e-12 * scale for j in targets)
    if b == 0.0:
        flags.append("zero bound: objective cannot move")
    elif closed_form and obj.kind == "leaderRisk":
        # the residual ignores every perturbed node, so all policies are best responses
        flags.append("search skipped: objective constant in the perturbation")
    else:
        for r in range(cfg.restarts):
            rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(r, 1))))
            theta = np.concatenate([templates[j].init_theta(rng, cfg.init_scale) for j in templates])
            sigma = cfg.sigma0
            try:
                for it in range(cfg.iterations):
                    s = _stream_seed(seed, r, it + 2)
                    parent = objective(theta, cfg.batch, s)
                    cands = theta + sigma * rng.standard_normal((cfg.population, theta.shape[0]))
                    vals = np.array([objective(c, cfg.batch, s) for c in cands])
                    if not np.all(np.isfinite(vals)) or not np.isfinite(parent):
                        raise FloatingPointError("non-finite objective")
                    wins = float(np.mean(vals > parent))
                    k = int(np.argmax(vals))
                    if vals[k] > parent:
                        theta = cands[k]
                    sigma *= math.exp((wins - 0.2) / 0.8 / 3.0)
                hv = objective(theta, cfg.n_holdout, holdout_seed)
            except (FloatingPointError, ArithmeticError, RuntimeError) as exc:
                flags.append(f"restart {r} aborted: {exc}")
                continue
            if hv > best_val:
                best_theta, best_val = theta, hv
    pol = policies(best_theta)
    env = make_perturbed_env(scm, pol, base.label, base)
    es = _stream_seed(seed, 0xE0) if eval_seed is None else eval_seed
    values = simulate(scm, env.overrides, cfg.n_eval, es, base.label)
    pred = _predict_values(f, values)
    y = values[scm.dag.response]
    risk, risk_se = _mean_se(eval_loss(loss, y, pred))
    fval, _ = _mean_se(obj.pointwise(base.label, pred, y, values, loss))
    if closed_form:
        risk, risk_se = population_risk(view, base.label, f), 0.0
        flags.append("analytic: residual does not load on perturbed nodes")
    out = GameOutcome(name, b, (base.label,), fval, risk, risk, {base.label: risk}, {base.label: fval},
                      {base.label: risk_se}, pol, tuple(flags))
    return pol, out


# ---------------------------------------------------------------------------
# exact theory oracles on discrete SCMs


@dataclass
class OracleReport:
    name: str
    ok: bool
    details: dict = field(default_factory=dict)

    def __str__(self):
        return f"{self.name}: {'pass' if self.ok else 'FAIL'} {self.details}"


def conditional_mean_predictor(scm: Scm, env: Environment, S: Sequence[str]) -> TablePredictor:
    joint = enumerate_joint(scm, env.overrides)
    S = tuple(S)
    table = joint.conditional_mean(scm.dag.response, S)
    default = joint.expect(joint.column(scm.dag.response))
    return TablePredictor(S, scm.covariates, table, default, scm.task)


def invariant_table_predictor(scm: Scm, family: EnvironmentFamily, S: Sequence[str], tol: float = 1e-12):
    """Conditional mean of the response given ``X_S`` pooled over cells seen in any environment.

    Also returns the largest disagreement between environments on shared cells.
    """
    table: dict = {}
    gap = 0.0
    for e in family.environments:
        t = conditional_mean_predictor(scm, e, S)
        for k, v in t.table.items():
            if k in table:
                gap = max(gap, abs(table[k] - v))
            else:
                table[k] = v
    first = conditional_mean_predictor(scm, family.environments[0], S)
    return TablePredictor(tuple(S), scm.covariates, table, first.default, scm.task), gap


def _risk_exact(f, scm, env, loss) -> float:
    return evaluate_env(f, scm, env, LEADER_RISK, loss, Backend("exact")).risk


def oracle_lemma1(scm: Scm, family: EnvironmentFamily, loss: Loss | None = None, tol: float = 1e-12) -> OracleReport:
    """In every environment the stable-blanket mean is the best predictor among those ignoring forbidden nodes."""
    loss = loss or default_loss(scm.task)
    _, forb = forbidden_descendants(scm.dag)
    sb = tuple(v for v in scm.covariates if v in stable_blanket(scm.dag))
    allowed = tuple(v for v in scm.covariates if v not in forb)
    f_sb, gap = invariant_table_predictor(scm, family, sb)
    ok = gap <= 1e-10
    rows = {}
    for e in family.environments:
        r_sb = _risk_exact(f_sb, scm, e, loss)
        best = conditional_mean_predictor(scm, e, allowed)
        r_best = _risk_exact(best, scm, e, loss)
        joint = enumerate_joint(scm, e.overrides)
        X = joint.matrix(scm.covariates)
        cellwise = float(np.max(np.abs(best.predict(X) - f_sb.predict(X)))) if X.shape[0] else 0.0
        rows[e.label] = (r_sb, r_best, cellwise)
        ok &= r_best >= r_sb - tol and cellwise <= 1e-10
    return OracleReport("lemma1", bool(ok), {"risks": rows, "invariance_gap": gap})


def oracle_theorem2(scm: Scm, family: EnvironmentFamily, obj: FollowerObjective = LEADER_RISK,
                    loss: Loss | None = None, tol: float = 1e-12) -> OracleReport:
    """Worst risk over the follower's best responses: stable blanket against parents."""
    loss = loss or default_loss(scm.task)
    sb = tuple(v for v in scm.covariates if v in stable_blanket(scm.dag))
    pa = tuple(v for v in scm.covariates if v in scm.dag.parents(scm.dag.response))
    f_sb, _ = invariant_table_predictor(scm, family, sb)
    f_pa, _ = invariant_table_predictor(scm, family, pa)
    out_sb = follower_grid_response(f_sb, scm, family, obj, 1.0, Backend("exact"), loss, name="sb")
    out_pa = follower_grid_response(f_pa, scm, family, obj, 1.0, Backend("exact"), loss, name="pa")
    ok = out_sb.leader_risk <= out_pa.leader_risk + tol
    return OracleReport("theorem2", bool(ok), {"sb": (out_sb.chosen, out_sb.leader_risk),
                                               "pa": (out_pa.chosen, out_pa.leader_risk)})


def random_cost(scm: Scm, family: EnvironmentFamily, rng: np.random.Generator, scale: float = 0.5):
    """State-dependent cost ``c_e(x)`` tabulated over covariate configurations, drawn once per environment."""
    tables: dict = {e.label: {} for e in family.environments}
    seeds = {e.label: int(rng.integers(2 ** 31)) for e in family.environments}

    def cost(env, values):
        cols = np.column_stack([values[c] for c in scm.covariates])
        t = tables[env]
        out = np.empty(cols.shape[0])
        for i, row in enumerate(map(tuple, cols)):
            if row not in t:
                # deterministic per configuration regardless of visiting order
                t[row] = float(np.random.default_rng([seeds[env], *(int(v * 1000) for v in row)]).uniform(0, scale))
            out[i] = t[row]
        return out

    return cost


def oracle_individuals(scm: Scm, O: Sequence[str], kernel: Callable, grid_check: int = 20,
                       rng: np.random.Generator | None = None, tol: float = 1e-12) -> OracleReport:
    """Averaging individual followers who observe ``X_O`` equals one population follower.

    ``kernel(values) -> array`` scores every joint state. Individual side: for
    each observation the best constants for the children of the environment
    node. Population side: the best deterministic assignment functions of their
    permitted inputs found by exhaustive search, with selected candidates
    re-evaluated by full enumeration of the modified SCM.
    """
    rng = rng or np.random.default_rng(0)
    dag = scm.dag
    targets = tuple(v for v in dag.topological_order() if v in dag.children(dag.env))
    O = tuple(O)
    nd = set(dag.nodes) - dag.descendants(targets) - {dag.env}
    if not set(O) <= nd or set(O) & set(targets):
        raise GameError("observed nodes must be non-descendants of the intervened nodes")
    for j in targets:
        if not (set(dag.parents(j)) - {dag.env}) <= set(O) | set(targets):
            raise GameError(f"parents of {j} are not all observed or intervened")
    supports = {j: scm.mechanisms[j].support for j in targets}
    if any(s is None for s in supports.values()):
        raise GameError("intervened nodes need finite supports")
    combos = list(itertools.product(*(supports[j] for j in targets)))

    def point(c):
        return {j: DiscreteTable.from_mapping((), {(): [1.0 if s == cj else 0.0 for s in supports[j]]},
                                              supports[j]) for j, cj in zip(targets, c)}

    base = enumerate_joint(scm)
    obs_cells = sorted(base.marginal(O).items())
    p_obs = np.array([p for _, p in obs_cells])
    cells = [c for c, _ in obs_cells]
    U = np.zeros((len(cells), len(combos)))
    for ci, c in enumerate(combos):
        joint = enumerate_joint(scm, point(c))
        vals = {v: joint.column(v) for v in joint.labels}
        k = kernel(vals)
        num = {}
        den = {}
        for row, p, kv in zip(map(tuple, joint.matrix(O)), joint.probs, k):
            num[row] = num.get(row, 0.0) + p * kv
            den[row] = den.get(row, 0.0) + p
        U[:, ci] = [num[x] / den[x] if den.get(x, 0) > 0 else -np.inf for x in cells]
    individual = float(p_obs @ U.max(axis=1))

    # population follower: g_j reads the observed nodes and its intervened parents
    inputs = {j: tuple(O) + tuple(p for p in targets if p in dag.parents(j)) for j in targets}
    cfg_space = {j: list(itertools.product(*(sorted({x[O.index(v)] for x in cells}) if v in O else supports[v]
                                              for v in inputs[j]))) for j in targets}
    n_funcs = 1
    for j in targets:
        n_funcs *= len(supports[j]) ** len(cfg_space[j])
    if n_funcs > 2 ** 16:
        raise GameError("population search space too large for exhaustive grid")

    def resolve(g, x):
        c = {}
        for j in targets:
            key = tuple(x[O.index(v)] if v in O else c[v] for v in inputs[j])
            c[j] = g[j][key]
        return tuple(c[j] for j in targets)

    combo_index = {c: i for i, c in enumerate(combos)}
    choices = [list(itertools.product(supports[j], repeat=len(cfg_space[j]))) for j in targets]
    best_val, best_g = -np.inf, None
    all_g = []
    for pick in itertools.product(*choices):
        g = {j: dict(zip(cfg_space[j], vals)) for j, vals in zip(targets, pick)}
        val = float(sum(p * U[i, combo_index[resolve(g, x)]] for i, (x, p) in enumerate(zip(cells, p_obs))))
        all_g.append((g, val))
        if val > best_val + 1e-15:
            best_val, best_g = val, g

    def enumerate_value(g):
        over = {}
        for j in targets:
            rows = {}
            for key, cj in g[j].items():
                rows[tuple(float(k) for k in key)] = [1.0 if s == cj else 0.0 for s in supports[j]]
            # unseen parent configurations default to the first support value
            pars = inputs[j]
            spaces = [supports[v] if v in targets else scm.mechanisms[v].support for v in pars]
            for key in itertools.product(*spaces):
                key = tuple(float(k) for k in key)
                rows.setdefault(key, [1.0] + [0.0] * (len(supports[j]) - 1))
            over[j] = DiscreteTable.from_mapping(pars, rows, supports[j])
        aug = Scm(dag, scm.mechanisms, scm.task, {j: tuple(v for v in O if v not in dag.parents(j))
                                                  for j in targets if set(O) - set(dag.parents(j))})
        joint = enumerate_joint(aug, over)
        vals = {v: joint.column(v) for v in joint.labels}
        return joint.expect(kernel(vals))

    sample = rng.choice(len(all_g), min(grid_check, len(all_g)), replace=False)
    checks = [(best_g, best_val)] + [all_g[i] for i in sample]
    cross = max(abs(enumerate_value(g) - v) for g, v in checks)
    ok = abs(individual - best_val) <= tol and cross <= 1e-10
    return OracleReport("individuals", bool(ok), {"individual": individual, "population": best_val,
                                                  "enumeration_gap": cross, "functions": n_funcs})


# ---------------------------------------------------------------------------
# random model generators for property sweeps


def random_binary_scm(dag: Dag, rng: np.random.Generator, n_envs: int = 3, task: str = "classification"):
    """Binary SCM with random tables; each environment redraws the tables of the environment's children."""
    mechs = {}
    for v in dag.nodes:
        if v == dag.env:
            continue
        pars = tuple(p for p in dag.covariates + (dag.response,) if p in dag.parents(v))
        mechs[v] = _random_table(pars, rng)
    scm = Scm(dag, mechs, task)
    envs = [Environment(0)]
    for e in range(1, n_envs):
        over = {j: _random_table(tuple(p for p in mechs[j].parents), rng) for j in dag.children(dag.env)}
        envs.append(Environment(e, over))
    return scm, EnvironmentFamily(tuple(envs), tuple(range(n_envs)), 0)


def _random_table(parents, rng):
    rows = {cfg: rng.uniform(0.05, 0.95) for cfg in itertools.product((0.0, 1.0), repeat=len(parents))}
    return DiscreteTable.bernoulli(parents, rows)


def random_linear_scm(dag: Dag, rng: np.random.Generator, n_shift_envs: int = 2):
    """Linear-Gaussian SCM with mean-shift environments and, for each, a strong counterpart on the intervened children of Y."""
    mechs = {}
    for v in dag.nodes:
        if v == dag.env:
            continue
        pars = tuple(p for p in dag.nodes if p in dag.parents(v) and p != dag.env)
        coefs = tuple(rng.choice([-1.0, 1.0]) * rng.uniform(0.5, 1.5) for _ in pars)
        mechs[v] = LinearGaussian(pars, coefs, 0.0, float(rng.uniform(0.5, 1.5)))
    scm = Scm(dag, mechs, "regression")
    ch_int, _ = forbidden_descendants(dag)
    envs = []
    label = 0
    for s in range(n_shift_envs + 1):
        over = {}
        for j in dag.children(dag.env):
            m = mechs[j]
            shift = 0.0 if s == 0 else float(rng.normal(0, 2))
            over[j] = LinearGaussian(m.parents, m.coefs, shift, m.noise_std)
        envs.append(Environment(label, over))
        strong = dict(over)
        for j in ch_int:
            strong[j] = LinearGaussian((), (), float(rng.normal(0, 2)), float(rng.uniform(0.5, 3.0)))
        envs.append(Environment(label + 1, strong))
        label += 2
    return scm, EnvironmentFamily(tuple(envs), (0,), 0)


def random_star_dag(rng: np.random.Generator, n_covariates: int = 5, star: bool = True, max_tries: int = 1000) -> Dag:
    """Random DAG whose environment node intervenes on a child of Y, with the star condition as requested."""
    for _ in range(max_tries):
        dag = random_dag(n_covariates, rng, edge_prob=0.4, env_prob=0.35, min_env_children=1)
        ch_int, _ = forbidden_descendants(dag)
        if not ch_int:
            continue
        if check_star_condition(dag) == star:
            return dag
    raise GameError("could not draw a graph with the requested star condition")


def thm4_sweep(n_scms: int = 20, n_predictors: int = 100, seed: int = 0, n_covariates: int = 5) -> OracleReport:
    """Worst-case risk of the stable-blanket regression against random affine predictors."""
    rng = np.random.default_rng(seed)
    worst_margin = np.inf
    fails = 0
    for _ in range(n_scms):
        dag = random_star_dag(rng, n_covariates)
        scm, fam = random_linear_scm(dag, rng)
        view = LinearScmView.from_scm(scm, fam)
        sb = [v for v in dag.covariates if v in stable_blanket(dag)]
        f_sb = population_regression(view, 0, sb)
        wc_sb = max(population_risk(view, e, f_sb) for e in view.envs)
        cov = dag.covariates
        for k in range(n_predictors):
            if k % 2 == 0:
                w = rng.normal(0, 1, len(cov)) * (rng.random(len(cov)) < 0.6)
                f = AffinePredictor(cov, w, float(rng.normal(0, 1)), cov)
            else:
                w = np.array([f_sb.weight(v) for v in cov]) + rng.normal(0, 0.2, len(cov))
                f = AffinePredictor(cov, w, f_sb.intercept + float(rng.normal(0, 0.2)), cov)
            wc = max(population_risk(view, e, f) for e in view.envs)
            margin = wc - wc_sb
            worst_margin = min(worst_margin, margin)
            if margin < -1e-9:
                fails += 1
    return OracleReport("thm4", fails == 0, {"fails": fails, "min_margin": worst_margin})


def accuracy_exact(f, scm: Scm, env: Environment, threshold: float = 0.5) -> float:
    """Probability that thresholding ``f`` recovers a binary response."""
    joint = enumerate_joint(scm, env.overrides)
    values = {v: joint.column(v) for v in joint.labels}
    yhat = (_predict_values(f, values) > threshold).astype(np.float64)
    return joint.expect((yhat == values[scm.dag.response]).astype(np.float64))


def random_individuals_case(rng: np.random.Generator, n_covariates: int = 3, max_tries: int = 1000):
    """Random binary SCM, observation set and tabulated kernel meeting the individual-follower preconditions.

    ``O`` collects every covariate outside the descendants of the intervened
    nodes; graphs where an intervened node has a parent that is neither
    observed nor intervened are redrawn.
    """
    for _ in range(max_tries):
        dag = random_dag(n_covariates, rng, edge_prob=0.5, env_prob=0.4, min_env_children=1)
        targets = dag.children(dag.env)
        below = dag.descendants(targets)
        O = tuple(v for v in dag.covariates if v not in below and v not in targets)
        if any(not (set(dag.parents(j)) - {dag.env}) <= set(O) | set(targets) for j in targets):
            continue
        scm, _ = random_binary_scm(dag, rng, n_envs=1)
        order = tuple(v for v in dag.nodes if v != dag.env)
        weights = rng.normal(0, 1, len(order))
        pair = rng.normal(0, 1, (len(order), len(order)))

        def kernel(values, order=order, weights=weights, pair=pair):
            M = np.column_stack([values[v] for v in order])
            return M @ weights + np.einsum("ni,ij,nj->n", M, np.triu(pair, 1), M)

        return scm, O, kernel
    raise GameError("could not draw a graph meeting the observation preconditions")


def oracle_sweep(kind: str, n: int = 50, seed: int = 0) -> OracleReport:
    """Run one exact oracle on ``n`` random binary SCMs.

    ``lemma1`` and ``thm2`` use the example graph with redrawn tables per
    environment; ``thm2`` checks the risk objective and ten random affine
    objectives with state costs per model; ``individuals`` uses small random graphs.
    """
    from .graph import FIG2

    rng = np.random.default_rng(seed)
    fails = []
    for i in range(n):
        if kind == "individuals":
            scm, O, kernel = random_individuals_case(rng)
            rep = oracle_individuals(scm, O, kernel, rng=rng)
            reps = [rep]
        else:
            scm, fam = random_binary_scm(FIG2, rng, n_envs=3, task="classification")
            if kind == "lemma1":
                reps = [oracle_lemma1(scm, fam)]
            elif kind == "thm2":
                reps = [oracle_theorem2(scm, fam)]
                for _ in range(10):
                    obj = FollowerObjective("affinePredMinusCost", 1.0, float(rng.normal()),
                                            float(rng.choice([0.0, 1.0]) * rng.normal()),
                                            random_cost(scm, fam, rng))
                    reps.append(oracle_theorem2(scm, fam, obj))
            else:
                raise GameError(f"unknown oracle {kind!r}")
        fails.extend((i, str(r)) for r in reps if not r.ok)
    return OracleReport(f"{kind} sweep", not fails, {"models": n, "failures": fails[:5], "n_failures": len(fails)})

"""Command-line entry point: scenario parsing, experiment runs and thin wrappers around the library."""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from . import __version__
from .gaussian import (AffinePredictor, LinearScmView, counterexample_construct, population_regression)
from .graph import (Dag, GraphError, forbidden_descendants, markov_blanket, stable_blanket,
                    star_violators)
from .models import builtin_names, builtin_text
from .predictors import LearnerConfig, Loss, TablePredictor, default_loss, dump_json, fit
from .scm import (NOISE, Dataset, ScmError, UnsupportedError, eval_expression, sample_pooled, scm_from_dict,
                  simulate)

EXIT_RUN, EXIT_JSON, EXIT_SCHEMA, EXIT_SEMANTIC = 1, 2, 3, 4
EXPERIMENTS = ("perturbation-game", "grid-game", "risk-table", "theory-sweep", "learning")
SUBSET_RULES = ("pa", "sb", "mb", "all", "explicit", "affine", "table", "learned-imp", "learned-sc")


class ScenarioError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------------------
# schema

_NUM = {"type": "number"}
_EXPR: dict = {}  # numbers, labels, "$param" strings or prefix arrays; checked when evaluated
_LABELS = {"type": "array", "items": {"type": "string"}}


def _obj(props: Mapping, required=()) -> dict:
    return {"type": "object", "additionalProperties": False, "properties": dict(props), "required": list(required)}


_NOISE = _obj({"dist": {"enum": ["gaussian", "bernoulli", "uniform", "logistic"]}, "std": _NUM, "p": _NUM,
               "low": _NUM, "high": _NUM, "scale": _NUM})
_MECH = _obj({"kind": {"enum": ["linear", "expression", "table", "point"]},
              "coefs": {"type": "object", "additionalProperties": _EXPR}, "intercept": _EXPR, "noise_std": _EXPR,
              "parents": _LABELS, "expr": _EXPR, "noise": _NOISE, "p1": _EXPR,
              "probs": {"type": "object", "additionalProperties": {"type": "array"}},
              "support": {"type": "array", "items": _NUM}, "value": _EXPR}, ["kind"])
_LEARNER = _obj({k: {} for k in ("kind", "lam", "interactions", "hidden", "lr", "weight_decay", "batch",
                                 "max_epochs", "max_steps", "patience", "val_frac", "trees", "depth",
                                 "min_leaf", "max_iter")})
_LEADER = _obj({"name": {"type": "string", "minLength": 1}, "subset": {"enum": list(SUBSET_RULES)},
                "fit": {"enum": ["population", "learner"]}, "labels": _LABELS, "learner": _LEARNER,
                "weights": {"type": "object", "additionalProperties": _EXPR}, "intercept": _EXPR,
                "table": {"type": "object", "additionalProperties": _EXPR}}, ["name", "subset"])
_OBJECTIVE = _obj({"kind": {"enum": ["leaderRisk", "meanPrediction", "affinePredMinusCost"]},
                   "sign": _NUM, "alpha": _NUM, "beta": _NUM})
_OPTIMIZER = _obj({k: {} for k in ("population", "iterations", "restarts", "batch", "n_holdout", "n_eval",
                                   "hidden", "sigma0", "init_scale")})
_FOLLOWER = _obj({"kind": {"enum": ["perturbation", "grid"]}, "objective": _OBJECTIVE,
                  "targets": {"type": "object", "additionalProperties": _LABELS}, "optimizer": _OPTIMIZER,
                  "backend": {"enum": ["exact", "analytic", "mc"]}, "n_mc": {"type": "integer", "minimum": 2},
                  "scale": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0}},
                  "report": {"enum": ["max", "mean"]}}, ["kind"])
_BOUND = {"type": "number", "minimum": 0, "maximum": 1}
_REPLICATION = _obj({"reps": {"type": "integer", "minimum": 1}, "seed": {"type": "integer", "minimum": 0},
                     "n_train": {"type": "integer", "minimum": 10},
                     "train_sizes": {"type": "array", "minItems": 1, "items": {"type": "integer", "minimum": 10}},
                     "n_eval": {"type": "integer", "minimum": 2}, "n_per_env": {"type": "integer", "minimum": 10}})
_ENV = _obj({"label": {"type": "integer"}, "name": {"type": "string"}, "coords": {"type": "array"},
             "overrides": {"type": "object", "additionalProperties": _MECH}}, ["label"])
_DAG = _obj({"nodes": {**_LABELS, "minItems": 2}, "edges": {"type": "array", "items": {
    "type": "array", "items": {"type": "string"}, "minItems": 2, "maxItems": 2}},
    "response": {"type": "string"}, "env": {"type": "string"},
    "action_sets": {"type": "object", "additionalProperties": _LABELS}}, ["nodes", "edges"])
_SWEEP = _obj({"scms": {"type": "integer", "minimum": 1}, "predictors": {"type": "integer", "minimum": 1},
               "dags": {"type": "integer", "minimum": 1}})

SCHEMA = {
    **_obj({
        "name": {"type": "string"}, "description": {"type": "string"}, "experiment": {"enum": list(EXPERIMENTS)},
        "task": {"enum": ["regression", "classification"]}, "params": {"type": "object", "additionalProperties": _NUM},
        "dag": _DAG, "mechanisms": {"type": "object", "additionalProperties": _MECH},
        "environments": {"type": "array", "minItems": 1, "items": _ENV},
        "training": {"type": "array", "minItems": 1, "items": {"type": "integer"}},
        "reference": {"type": "integer"}, "leaders": {"type": "array", "minItems": 1, "items": _LEADER},
        "follower": _FOLLOWER, "backend": {"enum": ["exact", "analytic", "mc"]},
        "loss": {"enum": ["squared", "brier", "log"]},
        "bounds": {"oneOf": [{"type": "string", "pattern": r"^[^:]+:[^:]+:[^:]+$"},
                             {"type": "array", "minItems": 1, "items": _BOUND}]},
        "search": _obj({"alpha_inv": _NUM, "alpha_pred": _NUM, "B": {"type": "integer"},
                        "test": {"enum": ["ird", "gcm", "itp", "iep"]}, "learner": _LEARNER,
                        "screening": {"type": "integer", "minimum": 1}, "max_size": {"type": "integer"}}),
        "sweeps": _obj({k: _SWEEP for k in ("thm4", "counterexample", "lemma1", "thm2", "individuals")}),
        "replication": _REPLICATION,
    }, ["experiment"]),
    "allOf": [
        {"if": {"properties": {"experiment": {"const": "theory-sweep"}}},
         "then": {"required": ["sweeps"]},
         "else": {"required": ["dag", "mechanisms", "environments", "leaders"]}},
        {"if": {"properties": {"experiment": {"enum": ["perturbation-game", "grid-game"]}}},
         "then": {"required": ["follower", "bounds"]}},
    ],
}


# ---------------------------------------------------------------------------
# parsing


@dataclass
class Scenario:
    doc: dict
    params: dict
    scm: Any = None
    family: Any = None
    bounds: tuple = (1.0,)

    @property
    def name(self) -> str:
        return self.doc.get("name", "scenario")

    @property
    def experiment(self) -> str:
        return self.doc["experiment"]

    @property
    def replication(self) -> dict:
        return self.doc.get("replication", {})

    @property
    def leaders(self) -> list:
        return self.doc.get("leaders", [])

    @property
    def loss(self) -> Loss:
        return Loss(self.doc["loss"]) if "loss" in self.doc else default_loss(self.scm.task)


def load_document(source: str) -> tuple[dict, str]:
    """Read a scenario from a built-in name or a path; malformed JSON maps to exit code 2."""
    if source in builtin_names() and not Path(source).exists():
        text, where = builtin_text(source), f"<builtin {source}>"
    else:
        try:
            text, where = Path(source).read_text(encoding="utf-8"), source
        except OSError as exc:
            raise ScenarioError(EXIT_JSON, f"{source}: cannot read: {exc.strerror}") from exc
    try:
        return json.loads(text), where
    except json.JSONDecodeError as exc:
        raise ScenarioError(EXIT_JSON, f"{where}:{exc.lineno}:{exc.colno}: malformed JSON: {exc.msg}") from exc


def check_schema(doc: Any, where: str = "<scenario>") -> None:
    from jsonschema import Draft202012Validator

    errors = sorted(Draft202012Validator(SCHEMA).iter_errors(doc), key=lambda e: (len(e.path), list(map(str, e.path))))
    if errors:
        lines = [f"{where}: field /{'/'.join(map(str, e.path))}: {e.message}" for e in errors[:10]]
        raise ScenarioError(EXIT_SCHEMA, "\n".join(lines))


def parse_bounds(spec) -> tuple[float, ...]:
    if isinstance(spec, str):
        try:
            lo, hi, step = (float(v) for v in spec.split(":"))
        except ValueError as exc:
            raise ScenarioError(EXIT_SCHEMA, f"bound grid {spec!r} is not lo:hi:step") from exc
        if step <= 0 or hi < lo:
            raise ScenarioError(EXIT_SEMANTIC, f"bound grid {spec!r} is empty")
        n = int(math.floor((hi - lo) / step + 1e-9)) + 1
        vals = tuple(round(lo + i * step, 12) for i in range(n))
    else:
        vals = tuple(float(v) for v in spec)
    if any(not 0.0 <= v <= 1.0 for v in vals):
        raise ScenarioError(EXIT_SEMANTIC, f"bounds must lie in [0, 1], got {vals}")
    return vals


def parse_scenario(source: str, params: Mapping[str, float] | None = None) -> Scenario:
    """Load, validate and build a scenario. Raises :class:`ScenarioError` with exit codes 2, 3 or 4."""
    doc, where = load_document(source)
    check_schema(doc, where)
    pars = {k: float(v) for k, v in doc.get("params", {}).items()}
    for k, v in (params or {}).items():
        if k not in pars:
            raise ScenarioError(EXIT_SEMANTIC, f"{where}: unknown parameter {k!r}")
        pars[k] = float(v)
    sc = Scenario(doc, pars)
    if "bounds" in doc:
        sc.bounds = parse_bounds(doc["bounds"])
    if doc["experiment"] == "theory-sweep":
        return sc
    try:
        sc.scm, sc.family = scm_from_dict(doc, pars)
        _check_semantics(sc)
    except ScenarioError:
        raise
    except (GraphError, ScmError, KeyError, ValueError, TypeError) as exc:
        raise ScenarioError(EXIT_SEMANTIC, f"{where}: {type(exc).__name__}: {exc}") from exc
    return sc


def _check_semantics(sc: Scenario) -> None:
    scm, doc = sc.scm, sc.doc
    cov = set(scm.covariates)
    names = [ld["name"] for ld in sc.leaders]
    if len(set(names)) != len(names):
        raise ScenarioError(EXIT_SEMANTIC, "leader names must be unique")
    for ld in sc.leaders:
        used = set(ld.get("labels", ())) | set(ld.get("weights", {}))
        if used - cov:
            raise ScenarioError(EXIT_SEMANTIC, f"leader {ld['name']}: unknown covariates {sorted(used - cov)}")
        rule = ld["subset"]
        if rule in ("learned-imp", "learned-sc") and sc.experiment != "learning":
            raise ScenarioError(EXIT_SEMANTIC, f"leader {ld['name']}: learned subsets need a learning experiment")
        if rule in ("explicit", "table") and "labels" not in ld:
            raise ScenarioError(EXIT_SEMANTIC, f"leader {ld['name']}: rule {rule} needs labels")
    fol = doc.get("follower")
    if fol and fol["kind"] == "perturbation":
        targets = fol.get("targets") or {}
        if not targets:
            raise ScenarioError(EXIT_SEMANTIC, "perturbation follower needs targets")
        for j, inputs in targets.items():
            if j not in scm.dag.nodes or j not in scm.dag.children(scm.dag.env):
                raise ScenarioError(EXIT_SEMANTIC, f"perturbation target {j} is not a child of {scm.dag.env}")
            bad = set(inputs) - scm.allowed_inputs(j) - {NOISE}
            if bad:
                raise ScenarioError(EXIT_SEMANTIC, f"perturbation of {j} reads forbidden inputs {sorted(bad)}")
    if fol and fol["kind"] == "grid" and "scale" in fol:
        dims = {len(e.params) for e in sc.family.environments}
        if dims != {len(fol["scale"])}:
            raise ScenarioError(EXIT_SEMANTIC, "grid scale length differs from environment coordinates")


# ---------------------------------------------------------------------------
# leaders


def _stream(seed: int, *key) -> int:
    k = tuple(zlib.crc32(str(x).encode()) if not isinstance(x, int) else x for x in key)
    return int(np.random.SeedSequence(int(seed), spawn_key=k).generate_state(1)[0])


def _is_discrete(scm) -> bool:
    return all(m.support is not None for m in scm.mechanisms.values())


def subset_for(sc: Scenario, ld: Mapping) -> tuple[str, ...]:
    dag = sc.scm.dag
    rule = ld["subset"]
    if rule == "pa":
        chosen = set(dag.parents(dag.response))
    elif rule == "sb":
        chosen = stable_blanket(dag)
    elif rule == "mb":
        chosen = markov_blanket(dag)
    elif rule in ("all", "learned-imp", "learned-sc"):
        chosen = set(dag.covariates)
    elif rule == "affine":
        chosen = set(ld["weights"])
    else:
        chosen = set(ld["labels"])
    return tuple(v for v in dag.covariates if v in chosen)


def training_data(sc: Scenario, seed: int, n_total: int) -> Dataset:
    envs = sc.family.training
    per_env = max(1, n_total // len(envs))
    return sample_pooled(sc.scm, sc.family, envs, per_env, _stream(seed, "train"))


def build_leader(sc: Scenario, ld: Mapping, seed: int, n_train: int | None = None):
    """A fitted predictor for one leader spec, sharing training data across leaders of a replicate."""
    scm, rule = sc.scm, ld["subset"]
    S = subset_for(sc, ld)
    ev = lambda v: float(eval_expression(v, {}, None, sc.params))  # noqa: E731
    if rule == "affine":
        return AffinePredictor(S, np.array([ev(ld["weights"][v]) for v in S]), ev(ld.get("intercept", 0.0)),
                               scm.covariates, task=scm.task)
    if rule == "table":
        table = {tuple(float(x) for x in k.split(",")): ev(v) for k, v in ld["table"].items()}
        return TablePredictor(S, scm.covariates, table, 0.5, scm.task)
    how = ld.get("fit", "population" if n_train is None else "learner")
    if how == "population":
        ref = sc.family.reference
        try:
            view = LinearScmView.from_scm(scm, sc.family)
            f = population_regression(view, ref, S)
            return f.with_columns(scm.covariates)
        except UnsupportedError:
            pass
        if _is_discrete(scm):
            from .game import conditional_mean_predictor

            return conditional_mean_predictor(scm, sc.family[ref], S)
        raise ScenarioError(EXIT_SEMANTIC, f"leader {ld['name']}: population fit needs a linear-Gaussian "
                                           "or discrete model")
    n = n_train or sc.replication.get("n_train", 4000)
    data = training_data(sc, seed, n)
    cfg = LearnerConfig.from_dict(ld["learner"]) if "learner" in ld else LearnerConfig.default(scm.task)
    return fit(data, S, cfg, _stream(seed, ld["name"], "fit"))


# ---------------------------------------------------------------------------
# experiment cells


@dataclass(frozen=True)
class Cell:
    leader: int | None
    replicate: int
    seed: int
    n_train: int | None = None
    extra: str = ""


def make_cells(sc: Scenario, reps: int, base_seed: int) -> list[Cell]:
    exp = sc.experiment
    if exp == "theory-sweep":
        return [Cell(None, r, base_seed + r, extra=k) for r in range(reps) for k in sc.doc["sweeps"]]
    if exp == "learning":
        return [Cell(None, r, base_seed + r) for r in range(reps)]
    sizes = sc.replication.get("train_sizes")
    sizes = [None] if exp != "perturbation-game" or not sizes else sizes
    return [Cell(i, r, base_seed + r, n) for n in sizes for r in range(reps) for i in range(len(sc.leaders))]


def run_cell(sc: Scenario, cell: Cell) -> list[dict]:
    return {"perturbation-game": _cell_perturbation, "grid-game": _cell_grid, "risk-table": _cell_table,
            "theory-sweep": _cell_sweep, "learning": _cell_learning}[sc.experiment](sc, cell)


def _cell_perturbation(sc: Scenario, cell: Cell) -> list[dict]:
    from .game import FollowerObjective, OptimizerConfig, follower_perturbation_response

    ld = sc.leaders[cell.leader]
    fol = sc.doc["follower"]
    learned = ld.get("fit") == "learner"
    f = build_leader(sc, ld, cell.seed, cell.n_train if learned else None)
    obj = FollowerObjective(**fol.get("objective", {}))
    cfg = OptimizerConfig.from_dict({**fol.get("optimizer", {}),
                                     **({"n_eval": sc.replication["n_eval"]} if "n_eval" in sc.replication else {})})
    targets = {j: tuple(v) for j, v in fol["targets"].items()}
    view = None
    try:
        view = LinearScmView.from_scm(sc.scm, sc.family)
    except UnsupportedError:
        pass
    base = sc.family[sc.family.reference]
    rows = []
    for b in sc.bounds:
        _, out = follower_perturbation_response(
            f, sc.scm, targets, obj, b, cfg, seed=_stream(cell.seed, ld["name"], "follower"),
            eval_seed=_stream(cell.seed, "eval"), base=base, loss=sc.loss,
            view=view if isinstance(f, AffinePredictor) else None, name=ld["name"], label=base.label)
        row = out.row(cell.replicate, cell.seed)
        if sc.replication.get("train_sizes"):
            row["n_train"] = cell.n_train
        rows.append(row)
    return rows


def _cell_grid(sc: Scenario, cell: Cell) -> list[dict]:
    from .game import Backend, FollowerObjective, follower_grid_response

    ld = sc.leaders[cell.leader]
    fol = sc.doc["follower"]
    f = build_leader(sc, ld, cell.seed)
    obj = FollowerObjective(**fol.get("objective", {}))
    backend = Backend(fol.get("backend", "mc"), fol.get("n_mc", sc.replication.get("n_eval", 100000)),
                      _stream(cell.seed, "eval"))
    rows = []
    for b in sc.bounds:
        out = follower_grid_response(f, sc.scm, sc.family, obj, b, backend, sc.loss, fol.get("scale"), ld["name"])
        if fol.get("report") == "mean":
            out.leader_risk = float(np.mean([out.risks[e] for e in out.chosen]))
        rows.append(out.row(cell.replicate, cell.seed))
    return rows


def _cell_table(sc: Scenario, cell: Cell) -> list[dict]:
    from .game import Backend, LEADER_RISK, accuracy_exact, evaluate_env

    ld = sc.leaders[cell.leader]
    f = build_leader(sc, ld, cell.seed)
    kind = sc.doc.get("backend", "mc")
    backend = Backend(kind, sc.replication.get("n_eval", 100000), _stream(cell.seed, "eval"))
    rows = []
    for e in sc.family.environments:
        ev = evaluate_env(f, sc.scm, e, LEADER_RISK, sc.loss, backend)
        acc = accuracy_exact(f, sc.scm, e) if kind == "exact" and sc.scm.task == "classification" else None
        rows.append({"predictor": ld["name"], "env": e.label, "env_name": e.name,
                     "training": int(e.label in sc.family.training), "risk": ev.risk, "risk_se": ev.risk_se,
                     "accuracy": acc, "replicate": cell.replicate, "seed": cell.seed})
    return rows


def _cell_sweep(sc: Scenario, cell: Cell) -> list[dict]:
    from .game import oracle_sweep, random_star_dag, thm4_sweep

    kind, spec = cell.extra, sc.doc["sweeps"][cell.extra]
    if kind == "thm4":
        rep = thm4_sweep(spec.get("scms", 20), spec.get("predictors", 100), cell.seed)
        n = spec.get("scms", 20)
    elif kind == "counterexample":
        n = spec.get("dags", 20)
        rng = np.random.default_rng(cell.seed)
        certs = [counterexample_construct(random_star_dag(rng, 5, star=False), rng)[2] for _ in range(n)]
        fails = [str(c) for c in certs if not c.ok]
        from .game import OracleReport

        rep = OracleReport("counterexample", not fails, {"failures": fails[:3]})
    else:
        n = spec.get("scms", 50)
        rep = oracle_sweep(kind, n, cell.seed)
    return [{"oracle": kind, "trials": n, "passed": int(rep.ok), "details": json.dumps(rep.details, default=str),
             "replicate": cell.replicate, "seed": cell.seed}]


def search_config(sc: Scenario):
    from .learn import SubsetSearchConfig

    d = dict(sc.doc.get("search", {}))
    if "learner" in d:
        d["learner"] = LearnerConfig.from_dict(d["learner"])
    return SubsetSearchConfig(**d)


def _cell_learning(sc: Scenario, cell: Cell) -> list[dict]:
    from .learn import candidate_subsets, imp, prepare, stabilized

    config = search_config(sc)
    n_per_env = sc.replication.get("n_per_env", 2000)
    data = sample_pooled(sc.scm, sc.family, sc.family.training, n_per_env, _stream(cell.seed, "train"))
    cands = candidate_subsets(data, config)
    prepared = None
    _, forb = forbidden_descendants(sc.scm.dag)
    n_eval = sc.replication.get("n_eval", 10000)
    tests = {e.label: simulate(sc.scm, e.overrides, n_eval, _stream(cell.seed, "eval", e.label), e.label)
             for e in sc.family.environments}
    rows = []
    for ld in sc.leaders:
        rule = ld["subset"]
        selected = ""
        if rule in ("learned-imp", "learned-sc"):
            prepared = prepared or prepare(data, cands, config, _stream(cell.seed, "search"))
            if rule == "learned-imp":
                model, res = imp(data, cands, config, _stream(cell.seed, "search"), prepared)
                w_forb = float(bool(set(model.subset) & forb))
            else:
                model, res = stabilized(data, cands, config, _stream(cell.seed, "search"), prepared)
                w_forb = model.weight_on(forb)
            selected = "|".join("+".join(s.subset) or "{}" for s in res.scores if s.weight > 0)
        else:
            model = build_leader(sc, {**ld, "fit": ld.get("fit", "learner")}, cell.seed, n_per_env * len(sc.family.training))
            w_forb = float(bool(set(model.subset) & forb))
            selected = "+".join(model.subset) or "{}"
        row = {"predictor": ld["name"], "selected": selected, "weight_forbidden": w_forb}
        risks = {}
        for lab, vals in tests.items():
            X = np.column_stack([vals[c] for c in model.columns])
            pred = model.predict(X)
            risks[lab] = float(np.mean(sc.loss(vals[sc.scm.dag.response], pred)))
            row[f"risk_e{lab}"] = risks[lab]
        row["worst_case"] = max(risks.values())
        row.update(replicate=cell.replicate, seed=cell.seed)
        rows.append(row)
    return rows


# ---------------------------------------------------------------------------
# running and output


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_table(rows: Sequence[Mapping], fmt: str = "csv") -> str:
    if fmt == "json":
        return json.dumps(list(rows), indent=1, default=_fmt) + "\n"
    if not rows:
        return ""
    cols = list(rows[0])
    for r in rows[1:]:
        cols += [c for c in r if c not in cols]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for r in rows:
        w.writerow([_fmt(r.get(c)) for c in cols])
    return buf.getvalue()


def _summary(values: Sequence[float]) -> dict:
    v = np.asarray(values, dtype=np.float64)
    m = float(np.mean(v))
    sd = float(np.std(v, ddof=1)) if v.size > 1 else 0.0
    h = 1.96 * sd / math.sqrt(v.size)
    return {"mean": m, "sd": sd, "ci_lo": m - h, "ci_hi": m + h, "reps": int(v.size)}


def aggregate(experiment: str, rows: Sequence[Mapping]) -> list[dict]:
    """Mean and normal-approximation 95% interval over replicates."""
    if experiment in ("perturbation-game", "grid-game"):
        keys, metric = ("predictor", "n_train", "b"), "leader_risk"
    elif experiment == "risk-table":
        keys, metric = ("predictor", "env"), "risk"
    elif experiment == "learning":
        keys, metric = ("predictor",), "worst_case"
    else:
        keys, metric = ("oracle",), "passed"
    groups: dict = {}
    for r in rows:
        groups.setdefault(tuple(r.get(k) for k in keys), []).append(r)
    out = []
    for key, rs in groups.items():
        row = {k: v for k, v in zip(keys, key) if v is not None or k != "n_train"}
        row["metric"] = metric
        row.update(_summary([r[metric] for r in rs]))
        if experiment == "risk-table" and rs[0].get("accuracy") is not None:
            row["accuracy"] = float(np.mean([r["accuracy"] for r in rs]))
        if experiment == "learning":
            row["zero_forbidden_weight"] = float(np.mean([r["weight_forbidden"] == 0 for r in rs]))
        out.append(row)
    return out


_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f")


def render_svg(agg: Sequence[Mapping], title: str = "", width: int = 1000, height: int = 600) -> str:
    """Risk against bound, one polyline per predictor with a shaded interval band."""
    series: dict = {}
    for r in agg:
        name = r["predictor"] + (f" (n={r['n_train']})" if r.get("n_train") is not None else "")
        series.setdefault(name, []).append((float(r["b"]), r["mean"], r["ci_lo"], r["ci_hi"]))
    left, right, top, bottom = 80, 200, 40, 60
    pw, ph = width - left - right, height - top - bottom
    xs = [p[0] for s in series.values() for p in s] or [0.0, 1.0]
    ys = [v for s in series.values() for p in s for v in p[1:]] or [0.0, 1.0]
    x0, x1 = min(xs), max(xs) if max(xs) > min(xs) else min(xs) + 1.0
    y0, y1 = min(ys), max(ys)
    pad = 0.05 * (y1 - y0 or 1.0)
    y0, y1 = y0 - pad, y1 + pad
    X = lambda x: left + (x - x0) / (x1 - x0) * pw  # noqa: E731
    Y = lambda y: top + (1 - (y - y0) / (y1 - y0)) * ph  # noqa: E731
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">',
           f'<rect width="{width}" height="{height}" fill="white"/>',
           f'<text x="{left}" y="24" font-size="16">{_esc(title)}</text>',
           f'<line x1="{left}" y1="{top + ph}" x2="{left + pw}" y2="{top + ph}" stroke="black"/>',
           f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}" stroke="black"/>']
    for i in range(6):
        xv, yv = x0 + (x1 - x0) * i / 5, y0 + (y1 - y0) * i / 5
        out.append(f'<text x="{X(xv):.1f}" y="{top + ph + 18}" text-anchor="middle">{xv:.2g}</text>')
        out.append(f'<text x="{left - 6}" y="{Y(yv) + 4:.1f}" text-anchor="end">{yv:.3g}</text>')
    out.append(f'<text x="{left + pw / 2}" y="{height - 16}" text-anchor="middle">bound b</text>')
    out.append(f'<text x="20" y="{top + ph / 2}" transform="rotate(-90 20 {top + ph / 2})" '
               'text-anchor="middle">deployment risk</text>')
    for k, (name, pts) in enumerate(series.items()):
        pts = sorted(pts)
        c = _PALETTE[k % len(_PALETTE)]
        band = [f"{X(p[0]):.2f},{Y(p[3]):.2f}" for p in pts] + [f"{X(p[0]):.2f},{Y(p[2]):.2f}" for p in pts[::-1]]
        out.append(f'<polygon points="{" ".join(band)}" fill="{c}" fill-opacity="0.2" stroke="none"/>')
        line = " ".join(f"{X(p[0]):.2f},{Y(p[1]):.2f}" for p in pts)
        out.append(f'<polyline points="{line}" fill="none" stroke="{c}" stroke-width="2"/>')
        ly = top + 16 * k + 10
        out.append(f'<line x1="{left + pw + 16}" y1="{ly}" x2="{left + pw + 40}" y2="{ly}" stroke="{c}" '
                   'stroke-width="2"/>')
        out.append(f'<text x="{left + pw + 46}" y="{ly + 4}">{_esc(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _esc(s: str) -> str:
    return str(s).replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def _run_one(args):
    sc, cell = args
    try:
        return run_cell(sc, cell), None
    except Exception as exc:  # noqa: BLE001 - recorded per cell
        return [], f"{type(exc).__name__}: {exc}"


@dataclass
class RunResult:
    rows: list
    aggregate: list
    errors: list = field(default_factory=list)
    files: list = field(default_factory=list)


def run_scenario(sc: Scenario, reps: int | None = None, seed: int | None = None, workers: int = 1,
                 out: str | Path | None = None, fmt: str = "csv", svg: bool = True) -> RunResult:
    """Execute every (predictor, replicate) cell; results are ordered by cell, independent of ``workers``."""
    reps = reps if reps is not None else sc.replication.get("reps", 1)
    seed = seed if seed is not None else sc.replication.get("seed", 0)
    cells = make_cells(sc, reps, seed)
    jobs = [(sc, c) for c in cells]
    if workers > 1 and len(cells) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_one, jobs))
    else:
        results = [_run_one(j) for j in jobs]
    rows, errors = [], []
    for cell, (rs, err) in zip(cells, results):
        rows.extend(rs)
        if err:
            name = sc.leaders[cell.leader]["name"] if cell.leader is not None else cell.extra
            errors.append({"cell": name, "replicate": cell.replicate, "seed": cell.seed,
                           "n_train": cell.n_train, "error": err})
    agg = aggregate(sc.experiment, rows) if rows else []
    res = RunResult(rows, agg, errors)
    if out is not None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        ext = "json" if fmt == "json" else "csv"
        for name, table in (("rows", rows), ("aggregate", agg), ("errors", errors)):
            p = out / f"{name}.{ext}"
            p.write_text(write_table(table, fmt) if table else ("[]\n" if fmt == "json" else ""), encoding="utf-8")
            res.files.append(p)
        if svg and sc.experiment in ("perturbation-game", "grid-game") and agg:
            p = out / "plot.svg"
            p.write_text(render_svg(agg, sc.name), encoding="utf-8")
            res.files.append(p)
    return res


# ---------------------------------------------------------------------------
# command handlers


def _default_workers() -> int:
    try:
        return max(1, int(os.environ.get("PIG_WORKERS", "1")))
    except ValueError:
        return 1


def _params(args) -> dict:
    out = {}
    for item in args.param or ():
        k, _, v = item.partition("=")
        if not _:
            raise ScenarioError(EXIT_SCHEMA, f"--param expects name=value, got {item!r}")
        out[k] = float(v)
    if getattr(args, "p", None) is not None:
        out["p"] = args.p
    return out


def cmd_run(args) -> int:
    sc = parse_scenario(args.scenario, _params(args))
    if args.b_grid:
        sc.bounds = parse_bounds(args.b_grid)
    if args.train_sizes:
        sizes = [int(v) for v in args.train_sizes.split(",")]
        sc.doc = {**sc.doc, "replication": {**sc.replication, "train_sizes": sizes}}
    if args.n_train:
        sc.doc = {**sc.doc, "replication": {**sc.replication, "n_train": args.n_train}}
    out = args.out or os.path.join("pig-out", sc.name)
    res = run_scenario(sc, args.reps, args.seed, args.workers, out, args.format, not args.no_svg)
    sys.stdout.write(write_table(res.aggregate, args.format))
    for e in res.errors:
        print(f"cell {e['cell']} replicate {e['replicate']} failed: {e['error']}", file=sys.stderr)
    print(f"wrote {', '.join(str(p) for p in res.files)}", file=sys.stderr)
    return EXIT_RUN if res.errors and not res.rows else 0


def cmd_validate(args) -> int:
    sc = parse_scenario(args.scenario, _params(args))
    print(f"{sc.name}: ok ({sc.experiment})")
    return 0


def cmd_list(args) -> int:
    for name in builtin_names():
        doc = json.loads(builtin_text(name))
        print(f"{name:22s} {doc['experiment']:18s} {doc.get('description', '')}")
    return 0


def cmd_show(args) -> int:
    sys.stdout.write(builtin_text(args.name))
    return 0


def _load_dag(source: str) -> tuple[Dag, dict]:
    doc, where = load_document(source)
    d = doc.get("dag", doc) if isinstance(doc, dict) else None
    if not isinstance(d, dict) or "nodes" not in d:
        raise ScenarioError(EXIT_SCHEMA, f"{where}: expected a DAG object or a scenario with a dag")
    try:
        dag = Dag.from_dict(d)
    except (GraphError, KeyError, TypeError, ValueError) as exc:
        raise ScenarioError(EXIT_SEMANTIC, f"{where}: {exc}") from exc
    return dag, {k: tuple(v) for k, v in d.get("action_sets", {}).items()}


def _labels(nodes, dag) -> str:
    return ",".join(v for v in dag.nodes if v in nodes)


def cmd_graph(args) -> int:
    dag, _ = _load_dag(args.source)
    try:
        if args.what == "sb":
            print(_labels(stable_blanket(dag), dag))
        elif args.what == "mb":
            print(_labels(markov_blanket(dag), dag))
        elif args.what == "forb":
            print(_labels(forbidden_descendants(dag)[1], dag))
        elif args.what == "star":
            bad = star_violators(dag)
            print("ok" if not bad else "violated: " + _labels(bad, dag))
        else:
            if not args.x or not args.y:
                raise ScenarioError(EXIT_SCHEMA, "dsep needs --x and --y")
            split = lambda s: [v for v in (s or "").split(",") if v]  # noqa: E731
            print(str(dag.d_separated(split(args.x), split(args.y), split(args.given))).lower())
    except GraphError as exc:
        raise ScenarioError(EXIT_SEMANTIC, str(exc)) from exc
    return 0


def _read_data(path: str, task: str | None) -> Dataset:
    try:
        return Dataset.from_csv(path, task)
    except OSError as exc:
        raise ScenarioError(EXIT_JSON, f"{path}: cannot read: {exc.strerror}") from exc
    except (KeyError, ValueError) as exc:
        raise ScenarioError(EXIT_SCHEMA, f"{path}: {exc}") from exc


def _emit(rows, args):
    text = write_table(rows, args.format)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text, encoding="utf-8")
    sys.stdout.write(text)


def cmd_test_invariance(args) -> int:
    from .invariance import run_test

    data = _read_data(args.data, args.task)
    S = tuple(v for v in args.subset.split(",") if v)
    cfg = LearnerConfig(kind=args.learner) if args.learner else None
    try:
        rep = run_test(args.test, data, S, cfg, args.seed)
    except (KeyError, ValueError) as exc:
        raise ScenarioError(EXIT_SEMANTIC, str(exc)) from exc
    _emit([rep.row()], args)
    return 0


def cmd_learn(args) -> int:
    from .learn import SubsetSearchConfig, candidate_subsets, imp, stabilized

    data = _read_data(args.data, args.task)
    try:
        config = SubsetSearchConfig(args.alpha_inv, args.alpha_pred, args.B, args.test,
                                    LearnerConfig(kind=args.learner) if args.learner else None,
                                    args.screening, args.max_size)
        cands = candidate_subsets(data, config)
    except ValueError as exc:
        raise ScenarioError(EXIT_SEMANTIC, str(exc)) from exc
    model, res = (imp if args.method == "imp" else stabilized)(data, cands, config, args.seed)
    if args.model_out:
        dump_json(model, args.model_out)
    if args.format == "json":
        _emit([{"subset": "+".join(s.subset), "s_inv": s.s_inv, "s_pred": s.s_pred,
                "passed_inv": int(s.passed_inv), "passed_pred": int(s.passed_pred), "weight": s.weight}
               for s in res.scores], args)
    else:
        text = res.csv()
        if args.out:
            Path(args.out).write_text(text, encoding="utf-8")
        sys.stdout.write(text)
    return 0


def cmd_oracle(args) -> int:
    from .game import (OracleReport, oracle_individuals, oracle_lemma1, oracle_sweep, oracle_theorem2,
                       thm4_sweep)

    rng = np.random.default_rng(args.seed)
    if args.which == "thm4":
        rep = thm4_sweep(args.n or 20, args.predictors, args.seed)
    elif args.which == "counterexample":
        if not args.source:
            raise ScenarioError(EXIT_SCHEMA, "counterexample needs a DAG file")
        dag, _ = _load_dag(args.source)
        try:
            _, _, cert = counterexample_construct(dag, rng)
        except (GraphError, ValueError) as exc:
            raise ScenarioError(EXIT_SEMANTIC, str(exc)) from exc
        rep = OracleReport("counterexample", cert.ok, {"violator": cert.violator, "gap_factor": cert.gap_factor,
                                                       "risks_f": cert.risks_f, "risks_sb": cert.risks_sb})
    elif not args.source:
        rep = oracle_sweep(args.which, args.n or 50, args.seed)
    else:
        sc = parse_scenario(args.source, _params(args))
        if not _is_discrete(sc.scm):
            raise ScenarioError(EXIT_SEMANTIC, "exact oracles need a discrete scenario")
        if args.which == "lemma1":
            rep = oracle_lemma1(sc.scm, sc.family, sc.loss)
        elif args.which == "thm2":
            rep = oracle_theorem2(sc.scm, sc.family, loss=sc.loss)
        else:
            O = tuple(v for v in (args.observe or "").split(",") if v)
            sb = tuple(v for v in sc.scm.covariates if v in stable_blanket(sc.scm.dag))
            from .game import invariant_table_predictor

            f_sb, _ = invariant_table_predictor(sc.scm, sc.family, sb)
            loss = sc.loss
            y = sc.scm.dag.response

            def kernel(values):
                X = np.column_stack([values[c] for c in f_sb.columns])
                return loss(values[y], f_sb.predict(X))

            try:
                rep = oracle_individuals(sc.scm, O, kernel, rng=rng)
            except ValueError as exc:
                raise ScenarioError(EXIT_SEMANTIC, str(exc)) from exc
    _emit([{"oracle": rep.name, "passed": int(rep.ok), "details": json.dumps(rep.details, default=str),
            "seed": args.seed}], args)
    return 0 if rep.ok else EXIT_RUN


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pig", description="Invariant prediction under strategic environment shifts.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_help="output file"):
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", help=out_help)
        p.add_argument("--format", choices=("csv", "json"), default="csv")

    def param_flags(p):
        p.add_argument("--param", action="append", metavar="NAME=VALUE", help="override a scenario parameter")
        p.add_argument("--p", type=float, help="shorthand for --param p=VALUE")

    p = sub.add_parser("run", help="run a scenario (built-in name or JSON path)")
    p.add_argument("scenario")
    p.add_argument("--reps", type=int)
    p.add_argument("--b-grid", help="bound grid lo:hi:step")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory (default pig-out/<name>)")
    p.add_argument("--workers", type=int, default=_default_workers())
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    p.add_argument("--train-sizes", help="comma-separated leader training sizes")
    p.add_argument("--n-train", type=int)
    p.add_argument("--no-svg", action="store_true")
    param_flags(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("validate", help="parse and validate a scenario")
    p.add_argument("scenario")
    param_flags(p)
    p.set_defaults(func=cmd_validate)

    sub.add_parser("list", help="list built-in scenarios").set_defaults(func=cmd_list)
    p = sub.add_parser("show", help="print a built-in scenario")
    p.add_argument("name", choices=builtin_names())
    p.set_defaults(func=cmd_show)

    p = sub.add_parser("graph", help="graph queries on a DAG or scenario file")
    p.add_argument("what", choices=("sb", "mb", "forb", "star", "dsep"))
    p.add_argument("source")
    p.add_argument("--x")
    p.add_argument("--y")
    p.add_argument("--given")
    common(p)
    p.set_defaults(func=cmd_graph)

    p = sub.add_parser("test-invariance", help="test invariance of one subset on a data CSV")
    p.add_argument("data")
    p.add_argument("--subset", default="")
    p.add_argument("--test", choices=("ird", "gcm", "itp", "iep"), default="gcm")
    p.add_argument("--task", choices=("regression", "classification"))
    p.add_argument("--learner", choices=("ols", "ridge", "logistic", "mlp", "stumps"))
    common(p)
    p.set_defaults(func=cmd_test_invariance)

    p = sub.add_parser("learn", help="invariant subset search on a data CSV")
    p.add_argument("method", choices=("imp", "sc"))
    p.add_argument("data")
    p.add_argument("--test", choices=("ird", "gcm", "itp", "iep"), default="gcm")
    p.add_argument("--alpha-inv", type=float, default=0.05)
    p.add_argument("--alpha-pred", type=float, default=0.05)
    p.add_argument("-B", type=int, default=250)
    p.add_argument("--screening", type=int)
    p.add_argument("--max-size", type=int)
    p.add_argument("--task", choices=("regression", "classification"))
    p.add_argument("--learner", choices=("ols", "ridge", "logistic", "mlp", "stumps"))
    p.add_argument("--model-out", help="write the fitted model as JSON")
    common(p)
    p.set_defaults(func=cmd_learn)

    p = sub.add_parser("oracle", help="exact theory checks")
    p.add_argument("which", choices=("lemma1", "thm2", "thm4", "individuals", "counterexample"))
    p.add_argument("source", nargs="?", help="scenario or DAG file; omit for a random sweep")
    p.add_argument("--n", type=int, help="models in a random sweep")
    p.add_argument("--predictors", type=int, default=100)
    p.add_argument("--observe", help="observed covariates for the individuals check")
    param_flags(p)
    common(p)
    p.set_defaults(func=cmd_oracle)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ScenarioError as exc:
        print(f"pig: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())

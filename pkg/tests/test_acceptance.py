"""End-to-end acceptance checks, one test per criterion.

Each test records PASS or FAIL with a short detail line; the summary is printed
at the end of the pytest run (see ``conftest.py``). Run just this file with
``pytest tests/test_acceptance.py -v``.
"""

import itertools
from collections import defaultdict

import numpy as np
import pytest
from scipy.stats import spearmanr

from pig import cli
from pig import game as Gm
from pig import graph as g
from pig import invariance as I
from pig.gaussian import AffinePredictor, LinearScmView, counterexample_construct, population_regression
from pig.models import builtin_model
from pig.predictors import Loss, TablePredictor, mlp_init, mlp_loss_grad
from pig.scm import sample_pooled

from _oracles import chi2_tail, f_tail, normal_tail, path_blocked, simple_paths, t_tail

SB = ("X1", "X2", "X3")


def scenario(name, **changes):
    sc = cli.parse_scenario(name)
    if "leaders" in changes:
        keep = changes.pop("leaders")
        sc.doc = {**sc.doc, "leaders": [ld for ld in sc.leaders if ld["name"] in keep]}
    if "bounds" in changes:
        sc.bounds = tuple(changes.pop("bounds"))
    if changes:
        sc.doc = {**sc.doc, "replication": {**sc.replication, **changes}}
    return sc


def by_replicate(rows, key="leader_risk"):
    out = defaultdict(dict)
    for r in rows:
        out[(r["predictor"], r["replicate"], r.get("n_train"))][r["b"]] = r[key]
    return out


@pytest.mark.criterion(1, "graph suite")
def test_graph_suite(criterion):
    assert g.stable_blanket(g.FIG2) == set(SB)
    assert g.forbidden_descendants(g.FIG2)[1] == {"X4", "X5"}
    assert g.stable_blanket(g.STAR_EXAMPLE) == set()
    acts = {"X4": {"X1", "X3"}}
    assert g.validate_augmentation(g.FIG2, acts).ok
    aug = g.augment(g.FIG2, acts, acts)
    assert g.stable_blanket(aug) == set(SB) and g.forbidden_descendants(aug)[1] == {"X4", "X5"}
    assert criterion.elapsed < 1.0


@pytest.mark.criterion(2, "d-separation vs path enumeration")
def test_dsep_oracle(criterion):
    rng = np.random.default_rng(20240)
    checks = 0
    for _ in range(200):
        dag = g.random_dag(int(rng.integers(1, 9)), rng, edge_prob=float(rng.uniform(0.2, 0.6)))
        assert len(dag.nodes) <= 10
        pairs = [("Y", "E")]
        a, b = rng.choice(len(dag.nodes), 2, replace=False)
        pairs.append((dag.nodes[a], dag.nodes[b]))
        for x, y in pairs:
            paths = simple_paths(dag.nodes, dag.edges, x, y)
            others = [v for v in dag.nodes if v not in (x, y)]
            for r in range(min(4, len(others)) + 1):
                for Z in itertools.combinations(others, r):
                    want = all(path_blocked(p, dag.edges, set(Z)) for p in paths)
                    assert dag.d_separated(x, y, Z) == want, (dag.edges, x, y, Z)
                    checks += 1
    criterion.note(f"{checks} queries")
    assert criterion.elapsed < 60.0


@pytest.mark.criterion(3, "linear example analytics")
def test_strict_example(criterion):
    scm, fam = builtin_model("strict-b2")
    phi = AffinePredictor(("X1", "X2"), [1 / 3, -1 / 3], 0.0, scm.covariates)
    f_sb = population_regression(LinearScmView.from_scm(scm, fam), 0, [])
    wc_phi, risks = Gm.worst_case_risk(phi, scm, fam, Loss("squared"), Gm.Backend("analytic"))
    wc_sb, sb = Gm.worst_case_risk(f_sb, scm, fam, Loss("squared"), Gm.Backend("analytic"))
    for e in (0, 1):
        assert abs(risks[e] - 2 / 3) <= 1e-9
    for e, delta in zip((2, 3, 4), (0, 1, 2)):
        assert abs(risks[e] - (1 + (2 + delta ** 2) / 9)) <= 1e-9
    assert all(abs(r - 1.0) <= 1e-9 for r in sb.values())
    assert wc_phi > wc_sb
    criterion.note(f"worst case {wc_phi:.6f} vs {wc_sb:.6f}")
    assert criterion.elapsed < 1.0


@pytest.mark.criterion(4, "binary star-violating game")
def test_star_game(criterion):
    scm, fam = builtin_model("star", {"p": 0.25})
    table = {(0.0, 0.0): 0.0, (1.0, 0.0): 1.0, (0.0, 1.0): 0.25, (1.0, 1.0): 0.75}
    fp = TablePredictor(("X1", "X2"), scm.covariates, table)
    f_sb, _ = Gm.invariant_table_predictor(scm, fam, ())
    brier = Loss("brier")
    exact_fp = Gm.follower_grid_response(fp, scm, fam, b=1.0, backend=Gm.Backend("exact"), loss=brier)
    exact_sb = Gm.follower_grid_response(f_sb, scm, fam, b=1.0, backend=Gm.Backend("exact"), loss=brier)
    assert abs(exact_fp.leader_risk - 0.1875) <= 1e-12 and exact_fp.chosen == (2,)
    assert abs(exact_sb.leader_risk - 0.25) <= 1e-12
    mc = Gm.Backend("mc", 100_000, 4)
    mc_fp = Gm.follower_grid_response(fp, scm, fam, b=1.0, backend=mc, loss=brier)
    mc_sb = Gm.follower_grid_response(f_sb, scm, fam, b=1.0, backend=mc, loss=brier)
    assert abs(mc_fp.leader_risk - 0.1875) <= 0.01 and abs(mc_sb.leader_risk - 0.25) <= 0.01
    criterion.note(f"MC {mc_fp.leader_risk:.4f} / {mc_sb.leader_risk:.4f}")
    assert criterion.elapsed < 10.0


@pytest.mark.criterion(5, "binary enumeration accuracies")
def test_irm_enumeration(criterion):
    scm, fam = builtin_model("irm-b1")
    x1 = TablePredictor(("X1",), scm.covariates, {(0.0,): 0.0, (1.0,): 1.0})
    x2 = TablePredictor(("X2",), scm.covariates, {(0.0,): 0.0, (1.0,): 1.0})
    for e in (1, 2, 3, 8):
        assert abs(Gm.accuracy_exact(x1, scm, fam[e]) - 3 / 4) <= 1e-12
    for e, want in ((1, 9 / 10), (3, 7 / 10), (8, 1 / 5)):
        assert abs(Gm.accuracy_exact(x2, scm, fam[e]) - want) <= 1e-12
    assert criterion.elapsed < 1.0


@pytest.mark.criterion(6, "linear perturbation game over the bound grid")
def test_linear_game(criterion):
    sc = scenario("fig2-linear")
    assert len(sc.bounds) == 11
    res = cli.run_scenario(sc, reps=10, seed=0)
    assert not res.errors
    curves = by_replicate(res.rows)
    grid = sorted(sc.bounds)
    for r in range(10):
        pa, sb, al = (curves[(n, r, None)] for n in ("PA", "SB", "all"))
        for c in (pa, sb):
            assert max(c.values()) - min(c.values()) < 1e-9
        assert all(sb[b] < pa[b] for b in grid)
    mean = lambda name, b: np.mean([curves[(name, r, None)][b] for r in range(10)])  # noqa: E731
    assert mean("all", 1.0) >= 1.5 * mean("all", 0.0)
    rho = spearmanr(grid, [mean("all", b) for b in grid])[0]
    criterion.note(f"SB {mean('SB', 1.0):.4f} < PA {mean('PA', 1.0):.4f}; all {mean('all', 0.0):.4f} -> "
                   f"{mean('all', 1.0):.4f}, spearman {rho:.3f}")
    assert criterion.elapsed < 300.0


@pytest.mark.criterion(7, "nonlinear game and training-size sweep")
def test_nonlinear_game(criterion):
    res = cli.run_scenario(scenario("fig2-nonlinear", bounds=[1.0]), reps=10, seed=0)
    assert not res.errors
    curves = by_replicate(res.rows)
    ordered = sum(curves[("SB", r, None)][1.0] <= curves[("PA", r, None)][1.0] <= curves[("all", r, None)][1.0]
                  for r in range(10))
    sweep = cli.run_scenario(scenario("trainsize-sweep", leaders={"SB"}), reps=10, seed=0)
    assert not sweep.errors
    sc = by_replicate(sweep.rows)
    sizes = (1000, 4000, 50000)
    flat = 0
    spans = []
    for r in range(10):
        span = [max(sc[("SB", r, n)].values()) - min(sc[("SB", r, n)].values()) for n in sizes]
        spans.append(span)
        flat += span[0] > span[1] > span[2]
    criterion.note(f"ordering {ordered}/10, shrinking {flat}/10, mean spans "
                   + "/".join(f"{v:.3f}" for v in np.mean(spans, axis=0)))
    assert ordered >= 8 and flat >= 8
    assert criterion.elapsed < 1800.0


def _rejections(name, kind, S, n_per_env, reps, seed0):
    scm, fam = builtin_model(name)
    ps = np.array([I.run_test(kind, sample_pooled(scm, fam, [0, 1, 2], n_per_env, seed0 + r), S, seed=r).p
                   for r in range(reps)])
    return float(np.mean(ps < 0.05))


@pytest.mark.criterion(8, "invariance test calibration and power")
def test_invariance_calibration(criterion):
    rates = {}
    for kind, name in (("ird", "sc-learning"), ("gcm", "sc-learning"), ("itp", "fig2-classification"),
                       ("iep", "fig2-classification")):
        rates[kind] = _rejections(name, kind, SB, 1000, 500, 500_000)
    power = {kind: _rejections("sc-learning", kind, ("X4",), 2000, 100, 900_000) for kind in ("ird", "gcm")}
    criterion.note("size " + ", ".join(f"{k} {v:.3f}" for k, v in rates.items())
                   + "; power " + ", ".join(f"{k} {v:.2f}" for k, v in power.items()))
    assert all(0.02 <= v <= 0.10 for v in rates.values())
    assert all(v >= 0.8 for v in power.values())
    assert criterion.elapsed < 1200.0


@pytest.mark.criterion(9, "stabilized ensemble and IMP on linear data")
def test_stabilized(criterion):
    sc = scenario("sc-learning", leaders={"SC", "IMP"})
    res = cli.run_scenario(sc, reps=100, seed=0)
    assert not res.errors
    sc_rows = [r for r in res.rows if r["predictor"] == "SC"]
    imp_rows = [r for r in res.rows if r["predictor"] == "IMP"]
    clean = np.mean([r["weight_forbidden"] == 0.0 for r in sc_rows])
    picked = np.mean([r["selected"] == "X1+X2+X3" for r in imp_rows])
    criterion.note(f"no forbidden weight {clean:.2f}, IMP picks blanket {picked:.2f}")
    assert len(sc_rows) == len(imp_rows) == 100
    assert clean >= 0.9 and picked >= 0.8
    assert criterion.elapsed < 1800.0


@pytest.mark.criterion(10, "theory oracles")
def test_theory_oracles(criterion):
    for kind in ("lemma1", "thm2", "individuals"):
        rep = Gm.oracle_sweep(kind, n=50, seed=0)
        assert rep.ok, str(rep)
    rep = Gm.thm4_sweep(n_scms=20, n_predictors=100, seed=0)
    assert rep.ok, str(rep)
    rng = np.random.default_rng(0)
    for _ in range(20):
        _, _, cert = counterexample_construct(Gm.random_star_dag(rng, 5, star=False), rng)
        assert cert.ok, str(cert)
    criterion.note(f"thm4 min margin {rep.details['min_margin']:.3g}")
    assert criterion.elapsed < 1200.0


@pytest.mark.criterion(11, "numerics")
def test_numerics(criterion):
    rng = np.random.default_rng(11)
    worst_tail = 0.0
    for i in range(1000):
        which = i % 4
        if which == 0:
            x = rng.uniform(-5, 9)
            got, want = I.tail("normal", x), normal_tail(x)
        elif which == 1:
            x, d = rng.uniform(-6, 12), float(rng.choice([1, 2, 4, 9, 25, 120]))
            got, want = I.tail("t", x, d), t_tail(x, d)
        elif which == 2:
            x, d = rng.uniform(0, 40), float(rng.integers(1, 12))
            got, want = I.tail("chi2", x, d), chi2_tail(x, d)
        else:
            x, d1, d2 = rng.uniform(0, 10), float(rng.integers(1, 6)), float(rng.choice([3, 10, 60, 2000]))
            got, want = I.tail("f", x, d1, d2), f_tail(x, d1, d2)
        worst_tail = max(worst_tail, abs(got - want))
    worst_grad = 0.0
    h = 1e-6
    for trial in range(20):
        sizes = [4, 6, 5, 1]
        theta = mlp_init(sizes, rng) + rng.normal(0, 0.2, sum(a * b + b for a, b in zip(sizes[:-1], sizes[1:])))
        X = rng.normal(size=(30, 4))
        task = "classification" if trial % 2 else "regression"
        y = (rng.random(30) < 0.5).astype(float) if task == "classification" else rng.normal(size=30)
        _, grad = mlp_loss_grad(theta, sizes, X, y, task)
        for k in rng.choice(theta.size, 5, replace=False):
            e = np.zeros_like(theta)
            e[k] = h
            fd = (mlp_loss_grad(theta + e, sizes, X, y, task)[0] - mlp_loss_grad(theta - e, sizes, X, y, task)[0]) / (2 * h)
            worst_grad = max(worst_grad, abs(fd - grad[k]) / max(abs(fd), abs(grad[k]), 1e-3))
    criterion.note(f"tail error {worst_tail:.2e}, gradient rel. error {worst_grad:.2e}")
    assert worst_tail <= 1e-8 and worst_grad <= 1e-4


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))

import itertools
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pig import gaussian as G
from pig.game import random_linear_scm, random_star_dag
from pig.graph import FIG2, STAR_EXAMPLE, GraphError, stable_blanket
from pig.models import builtin_model

from _oracles import linear_sem_sample

SB = ("X1", "X2", "X3")
COVS = ("X1", "X2", "X3", "X4", "X5")


@pytest.fixture(scope="module")
def strict():
    return G.LinearScmView.from_scm(*builtin_model("strict-b2"))


@pytest.fixture(scope="module")
def shifts():
    return G.LinearScmView.from_scm(*builtin_model("sc-learning"))


def test_strict_example_moments(strict):
    _, cov = G.joint_moments(strict, 0)
    x1, y = strict.index("X1"), strict.index("Y")
    assert cov[x1, x1] == pytest.approx(2.0)
    assert cov[y, x1] == pytest.approx(1.0)
    mean, _ = G.joint_moments(strict, 1)
    assert mean[x1] == pytest.approx(1.0) and mean[strict.index("X2")] == pytest.approx(1.0)


def test_strict_example_feature_weight_and_risks(strict):
    f = G.population_regression(strict, None, [], features={"d": {"X1": 1.0, "X2": -1.0}}, pooled=[0, 1])
    assert f.feature_weights["d"] == pytest.approx(1 / 3)
    assert f.weight("X1") == pytest.approx(1 / 3) and f.weight("X2") == pytest.approx(-1 / 3)
    assert f.intercept == pytest.approx(0.0, abs=1e-12)
    risks = G.risk_table(strict, f)
    for e in (0, 1):
        assert risks[e] == pytest.approx(2 / 3)
    for e, delta in zip((2, 3, 4), (0.0, 1.0, 2.0)):
        assert risks[e] == pytest.approx(1 + (2 + delta ** 2) / 9)
    f_sb = G.population_regression(strict, 0, [])
    assert all(r == pytest.approx(1.0) for r in G.risk_table(strict, f_sb).values())


def test_sampled_sem_matches_moments():
    scm, fam = builtin_model("sc-learning")
    view = G.LinearScmView.from_scm(scm, fam)
    order = [v for v in FIG2.topological_order() if v in view.labels]
    perm = [view.index(v) for v in order]
    for env in (1, 3):
        B = view.B[env][np.ix_(perm, perm)]
        X = linear_sem_sample(B, np.sqrt(view.omega[env][perm]), view.delta[env][perm], 200_000,
                              np.random.default_rng(env))
        mean, cov = G.joint_moments(view, env)
        C = cov[np.ix_(perm, perm)]
        sd = np.sqrt(np.diag(C))
        n = X.shape[0]
        # five standard errors per entry
        assert np.all(np.abs(X.mean(0) - mean[perm]) <= 5 * sd / np.sqrt(n))
        assert np.all(np.abs(np.cov(X.T) - C) <= 5 * np.sqrt(2) * np.outer(sd, sd) / np.sqrt(n))


subsets = st.lists(st.sampled_from(COVS), unique=True, max_size=5)


@settings(max_examples=40, deadline=None)
@given(subsets, st.sampled_from([0, 1, 2, 3]))
def test_residual_is_orthogonal_to_inputs(shifts, S, env):
    f = G.population_regression(shifts, env, S)
    mean, cov = G.joint_moments(shifts, env)
    r = np.zeros(len(shifts.labels))
    r[shifts.index("Y")] = 1.0
    for v, w in zip(f.subset, f.weights):
        r[shifts.index(v)] -= w
    assert r @ mean - f.intercept == pytest.approx(0.0, abs=1e-9)
    for v in S:
        assert (r @ cov)[shifts.index(v)] == pytest.approx(0.0, abs=1e-9)


@settings(max_examples=40, deadline=None)
@given(subsets, subsets, st.sampled_from([0, 1, 2, 3]))
def test_risk_is_monotone_in_the_subset(shifts, A, extra, env):
    small = G.population_regression(shifts, env, A)
    big = G.population_regression(shifts, env, sorted(set(A) | set(extra)))
    assert G.population_risk(shifts, env, big) <= G.population_risk(shifts, env, small) + 1e-10


@settings(max_examples=40, deadline=None)
@given(subsets, st.integers(0, 2 ** 31))
def test_regression_beats_nearby_predictors(shifts, S, seed):
    rng = np.random.default_rng(seed)
    f = G.population_regression(shifts, 0, S)
    best = G.population_risk(shifts, 0, f)
    for _ in range(10):
        g = G.AffinePredictor(f.subset, f.weights + rng.normal(0, 0.3, len(S)),
                              f.intercept + rng.normal(0, 0.3), f.columns)
        assert G.population_risk(shifts, 0, g) >= best - 1e-12


def test_stable_blanket_weights_are_invariant(shifts):
    ref = G.population_regression(shifts, 0, SB)
    for env in (1, 2, 3):
        f = G.population_regression(shifts, env, SB)
        np.testing.assert_allclose(f.weights, ref.weights, atol=1e-10)
        assert f.intercept == pytest.approx(ref.intercept, abs=1e-10)
    risks = G.risk_table(shifts, ref)
    assert max(risks.values()) - min(risks.values()) < 1e-10
    mb = [G.population_regression(shifts, e, COVS[:4]) for e in (0, 3)]
    assert np.abs(mb[0].weights - mb[1].weights).max() > 0.1


def test_nonforbidden_invariant_predictors_never_beat_the_blanket(shifts):
    """Among predictors using only non-forbidden covariates and invariant across the family, none has lower risk."""
    f_sb = G.population_regression(shifts, 0, SB)
    r_sb = G.population_risk(shifts, 0, f_sb)
    for k in range(4):
        for S in itertools.combinations(SB, k):
            f = G.population_regression(shifts, 0, S)
            risks = G.risk_table(shifts, f)
            assert min(risks.values()) >= r_sb - 1e-12


def test_residual_loadings(shifts):
    f = G.population_regression(shifts, 0, SB)
    load = G.residual_loadings(shifts, 0, f)
    assert load["X4"] == pytest.approx(0.0, abs=1e-12) and load["X5"] == pytest.approx(0.0, abs=1e-12)
    assert abs(load["X1"]) < 1e-10 and abs(load["Y"]) > 0.1
    g = G.population_regression(shifts, 0, COVS)
    assert abs(G.residual_loadings(shifts, 0, g)["X4"]) > 0.1


def test_conditioning_warning(shifts):
    with pytest.warns(G.ConditioningWarning):
        f = G.population_regression(shifts, 0, [], features={"a": {"X1": 1.0}, "b": {"X1": 2.0}})
    assert np.isfinite(f.weights).all()
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        G.population_regression(shifts, 0, SB)


def test_unsupported_mechanisms_are_rejected():
    from pig.scm import UnsupportedError
    with pytest.raises(UnsupportedError):
        G.LinearScmView.from_scm(*builtin_model("fig2-nonlinear"))


def test_counterexample_on_star_example():
    _, f, cert = G.counterexample_construct(STAR_EXAMPLE, 0)
    assert cert.ok and cert.violator == "X1" and str(cert).startswith("pass")
    assert all(cert.risks_f[e] < cert.risks_sb[e] for e in cert.risks_f)
    assert "xbar" in f.feature_weights and cert.gap_factor != 0


def test_counterexample_refuses_star_graphs():
    with pytest.raises(GraphError):
        G.counterexample_construct(FIG2)


def test_counterexample_on_random_violating_graphs():
    rng = np.random.default_rng(5)
    for _ in range(20):
        dag = random_star_dag(rng, 5, star=False)
        _, _, cert = G.counterexample_construct(dag, rng)
        assert cert.ok, str(cert)


def test_blanket_fit_is_minimax_on_random_star_graphs():
    rng = np.random.default_rng(9)
    for _ in range(10):
        dag = random_star_dag(rng, 4)
        scm, fam = random_linear_scm(dag, rng)
        view = G.LinearScmView.from_scm(scm, fam)
        sb = [v for v in dag.covariates if v in stable_blanket(dag)]
        f_sb = G.population_regression(view, 0, sb)
        wc = max(G.risk_table(view, f_sb).values())
        for e in view.envs:
            g = G.population_regression(view, e, dag.covariates)
            assert max(G.risk_table(view, g).values()) >= wc - 1e-9

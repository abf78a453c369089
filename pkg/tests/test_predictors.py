import json
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from sklearn.linear_model import LogisticRegression

from pig import predictors as P
from pig.gaussian import AffinePredictor
from pig.scm import Dataset, enumerate_discrete, sample, sample_pooled
from pig.models import builtin_model

probs = st.floats(0.01, 0.99)


@settings(max_examples=200, deadline=None)
@given(probs, probs)
def test_scoring_rules_are_strictly_proper(p, q):
    for kind in ("brier", "log"):
        at = lambda r: p * P.eval_loss(kind, 1.0, r) + (1 - p) * P.eval_loss(kind, 0.0, r)
        if abs(p - q) > 1e-6:
            assert at(p) < at(q)
        else:
            assert at(p) <= at(q) + 1e-12


def test_loss_values():
    assert P.eval_loss("squared", 3.0, 1.0) == 4.0
    assert P.eval_loss("brier", 1.0, 0.25) == 0.5625
    assert P.eval_loss("log", 1.0, 0.5) == pytest.approx(np.log(2))
    np.testing.assert_allclose(P.Loss("log")(np.array([0.0, 1.0]), np.array([0.1, 0.9])), -np.log(0.9))
    with pytest.raises(ValueError):
        P.Loss("hinge")
    with pytest.raises(ValueError):
        P.LearnerConfig("forest")


def _regression_data(n, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, 2))
    y = 2.0 * x[:, 0] - 0.5 + rng.normal(0, 1, n)
    return Dataset(x, y, np.zeros(n), ("A", "B"))


def test_ols_recovers_slope():
    f = P.fit(_regression_data(2000, 0), ["A"], P.LearnerConfig("ols"))
    assert f.model.coef[0] == pytest.approx(2.0, abs=0.05)
    assert f.model.intercept == pytest.approx(-0.5, abs=0.06)


def test_rank_deficient_ols_warns():
    d = _regression_data(200, 1)
    d = Dataset(np.column_stack([d.X[:, 0], d.X[:, 0]]), d.y, d.env, ("A", "B"))
    with pytest.warns(P.FitWarning, match="rank"):
        P.fit(d, ["A", "B"], P.LearnerConfig("ols"))


def _classification(n, seed, d=3):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, d))
    z = 0.3 + X @ np.linspace(1.0, -0.7, d)
    y = (rng.random(n) < 1 / (1 + np.exp(-z))).astype(float)
    return X, y


def test_logistic_matches_reference_implementation():
    X, y = _classification(3000, 2)
    ours = P.fit_logistic(X, y, lam=0.0)
    ref = LogisticRegression(penalty=None, tol=1e-12, max_iter=10_000).fit(X, y)
    np.testing.assert_allclose(ours.coef, ref.coef_[0], atol=1e-4)
    assert ours.intercept == pytest.approx(ref.intercept_[0], abs=1e-4)
    np.testing.assert_allclose(ours.predict(X), ref.predict_proba(X)[:, 1], atol=1e-5)


def test_multinomial_matches_reference_implementation():
    rng = np.random.default_rng(3)
    X = rng.normal(size=(3000, 2))
    logits = np.column_stack([np.zeros(3000), 1 + X[:, 0], -0.5 + X[:, 1] - X[:, 0]])
    p = np.exp(logits) / np.exp(logits).sum(1, keepdims=True)
    labels = np.array([rng.choice(3, p=row) for row in p])
    ours = P.fit_multinomial(X, labels, 3, lam=0.0)
    ref = LogisticRegression(penalty=None, tol=1e-12, max_iter=10_000).fit(X, labels)
    np.testing.assert_allclose(ours.predict_proba(X), ref.predict_proba(X), atol=1e-5)


def test_mlp_gradient_against_finite_differences():
    rng = np.random.default_rng(4)
    worst = 0.0
    h = 1e-6
    for trial in range(10):
        sizes = [3, 5, 4, 1]
        theta = P.mlp_init(sizes, rng) + rng.normal(0, 0.3, sum(a * b + b for a, b in zip(sizes[:-1], sizes[1:])))
        X = rng.normal(size=(25, 3))
        task = "classification" if trial % 2 else "regression"
        y = (rng.random(25) < 0.5).astype(float) if task == "classification" else rng.normal(size=25)
        _, g = P.mlp_loss_grad(theta, sizes, X, y, task)
        for k in rng.choice(theta.size, 10, replace=False):
            e = np.zeros_like(theta)
            e[k] = h
            fd = (P.mlp_loss_grad(theta + e, sizes, X, y, task)[0]
                  - P.mlp_loss_grad(theta - e, sizes, X, y, task)[0]) / (2 * h)
            worst = max(worst, abs(fd - g[k]) / max(abs(fd), abs(g[k]), 1e-3))
    assert worst <= 1e-4


def test_mlp_fits_a_smooth_function():
    rng = np.random.default_rng(5)
    X = rng.uniform(-2, 2, (2000, 1))
    y = np.sin(2 * X[:, 0]) + rng.normal(0, 0.1, 2000)
    cfg = P.LearnerConfig("mlp", hidden=(32, 32), lr=1e-2, max_epochs=100, max_steps=3000, patience=10)
    m = P.fit_mlp(X, y, cfg, "regression", np.random.default_rng(0))
    grid = np.linspace(-1.8, 1.8, 50)[:, None]
    assert np.mean((m.predict(grid) - np.sin(2 * grid[:, 0])) ** 2) < 0.02


@pytest.mark.parametrize("cfg", [P.LearnerConfig("logistic", interactions=True),
                                 P.LearnerConfig("stumps", trees=30, depth=2, min_leaf=20)])
def test_star_example_learners_reach_four_point_risk(cfg):
    scm, fam = builtin_model("star")
    data = sample_pooled(scm, fam, [0, 1, 2], 4000, 0)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", P.FitWarning)
        f = P.fit(data, ["X1", "X2"], cfg)
    joint = enumerate_discrete(scm, fam, 2)
    X = np.column_stack([joint.column(c) for c in data.columns])
    risk = joint.expect(P.eval_loss("brier", joint.column("Y"), f.predict(X)))
    assert risk <= 0.1975


def test_fit_checks_inputs():
    d = _regression_data(50, 6)
    with pytest.raises(P.SchemaError):
        P.fit(d, ["Z"])
    with pytest.raises(ValueError):
        P.fit(d, ["A"], P.LearnerConfig("logistic"))
    f = P.fit(d, [])
    assert f.learner == "constant"
    np.testing.assert_allclose(f.predict(d.X), d.y.mean())
    with pytest.raises(P.SchemaError):
        f.predict(np.zeros((2, 5)))


@settings(max_examples=25, deadline=None)
@given(st.sampled_from(["ridge", "stumps"]), st.integers(0, 1000))
def test_predictions_depend_only_on_the_subset(kind, seed):
    d = _regression_data(300, seed)
    f = P.fit(d, ["A"], P.LearnerConfig(kind, trees=5))
    X2 = d.X.copy()
    X2[:, 1] = np.random.default_rng(seed).normal(size=d.n) * 100
    np.testing.assert_array_equal(f.predict(d.X), f.predict(X2))


def test_ensemble_behaviour():
    d = _regression_data(300, 7)
    a = P.fit(d, ["A"])
    b = P.fit(d, ["B"])
    ens = P.EnsembleModel([(a, 3.0), (b, 1.0)])
    assert [w for _, w in ens.members] == [0.75, 0.25]
    np.testing.assert_allclose(ens.predict(d.X), 0.75 * a.predict(d.X) + 0.25 * b.predict(d.X))
    assert ens.weight_on(["B"]) == 0.25 and ens.subset == ("A", "B")
    for bad in ([], [(a, -1.0)], [(a, 0.0)]):
        with pytest.raises(ValueError):
            P.EnsembleModel(bad)
    assert json.loads(P.dump_json(ens))["members"][0]["weight"] == 0.75


def test_empirical_risk_of_fixed_affine_rule():
    scm, fam = builtin_model("strict-b2")
    data = sample(scm, fam, 0, 200_000, 1)
    phi = AffinePredictor(("X1", "X2"), [1 / 3, -1 / 3], 0.0, data.columns)
    assert P.empirical_risk(data, phi) == pytest.approx(2 / 3, abs=0.01)
    with pytest.raises(ValueError):
        P.empirical_risk(data, phi, env=4)

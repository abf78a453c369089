import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pig import invariance as I
from pig.models import builtin_model
from pig.predictors import LearnerConfig
from pig.scm import Dataset, sample_pooled

from _oracles import (anova_f, auc_bruteforce, bootstrap_auc_diff_var, chi2_tail, f_tail, normal_tail,
                      t_tail)

SB = ("X1", "X2", "X3")


def _close(got, want):
    return abs(got - want) <= 1e-8 * max(1.0, abs(want)) or abs(got - want) <= 1e-8 * abs(want) + 1e-300


def test_tails_against_numerical_integration():
    rng = np.random.default_rng(0)
    bad = []
    for _ in range(250):
        x = float(rng.uniform(-4, 8))
        if not _close(I.tail("normal", x), normal_tail(x)):
            bad.append(("normal", x))
        d = float(rng.choice([1, 2, 3, 7, 30, 200]))
        if not _close(I.tail("t", x, d), t_tail(x, d)):
            bad.append(("t", x, d))
        y = float(rng.uniform(0, 25))
        if not _close(I.tail("chi2", y, d), chi2_tail(y, d)):
            bad.append(("chi2", y, d))
        d2 = float(rng.choice([5, 20, 500]))
        z = float(rng.uniform(0, 8))
        if not _close(I.tail("f", z, d, d2), f_tail(z, d, d2)):
            bad.append(("f", z, d, d2))
    assert not bad


def test_tail_reference_points():
    assert I.tail("chi2", 3.841459, 1) == pytest.approx(0.05, abs=1e-7)
    assert I.tail("normal", 1.959964) == pytest.approx(0.025, abs=1e-7)
    assert I.tail("f", 0.0, 2, 10) == 1.0 and I.tail("chi2", -1.0, 3) == 1.0
    with pytest.raises(ValueError):
        I.tail("gamma", 1.0)


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 5), st.integers(0, 2 ** 31))
def test_anova_matches_oracle(k, seed):
    rng = np.random.default_rng(seed)
    groups = rng.integers(0, k, 60)
    groups[:k] = np.arange(k)
    v = rng.normal(size=60) + 0.3 * groups
    F, p, d1, d2 = I.anova_f(v, groups, k)
    want = anova_f([v[groups == g] for g in range(k)])
    assert F == pytest.approx(want, rel=1e-9)
    assert (d1, d2) == (k - 1, 60 - k)
    assert p == pytest.approx(f_tail(want, d1, d2), rel=1e-6, abs=1e-12)


def test_anova_degenerate_cases():
    g = np.array([0, 0, 1, 1])
    assert I.anova_f(np.ones(4), g, 2)[:2] == (0.0, 1.0)
    F, p, _, _ = I.anova_f(np.array([1.0, 1.0, 2.0, 2.0]), g, 2)
    assert F == np.inf and p == 0.0


def test_gcm_statistic_zero_residuals():
    assert I.gcm_statistic(np.zeros((50, 2))) == (0.0, 2)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_delong_auc_matches_bruteforce(seed):
    rng = np.random.default_rng(seed)
    y = (rng.random(80) < 0.4).astype(float)
    y[:2] = [0, 1]
    a = np.round(y + rng.normal(0, 1, 80), 1)
    b = rng.normal(0, 1, 80)
    auc_a, auc_b, var, _ = I.delong(a, b, y)
    assert auc_a == pytest.approx(auc_bruteforce(a, y), abs=1e-12)
    assert auc_b == pytest.approx(auc_bruteforce(b, y), abs=1e-12)
    assert var >= 0


def test_delong_variance_against_bootstrap():
    rng = np.random.default_rng(1)
    n = 300
    y = (rng.random(n) < 0.5).astype(float)
    a = y + rng.normal(0, 1.0, n)
    b = y + rng.normal(0, 1.5, n)
    _, _, var, _ = I.delong(a, b, y)
    boot = bootstrap_auc_diff_var(a, b, y, 800, np.random.default_rng(2))
    assert var == pytest.approx(boot, rel=0.2)


def test_identical_scores_are_not_significant():
    rng = np.random.default_rng(3)
    y = (rng.random(100) < 0.5).astype(float)
    s = rng.normal(size=100)
    z, p = I.delong_one_sided(s, s, y)
    assert z == 0.0 and p >= 0.5
    with pytest.raises(I.InvarianceError):
        I.delong(s, s, np.zeros(100))


@pytest.fixture(scope="module")
def shifted():
    scm, fam = builtin_model("sc-learning")
    return sample_pooled(scm, fam, [0, 1, 2], 600, 4)


@pytest.mark.parametrize("kind", ["ird", "gcm"])
def test_regression_tests_separate_blanket_from_forbidden(shifted, kind):
    ok = I.run_test(kind, shifted, SB, seed=1)
    bad = I.run_test(kind, shifted, ("X4",), seed=1)
    assert ok.p > 0.01 and bad.p < 1e-6
    assert ok.row()["subset"] == "X1+X2+X3"


def test_report_csv(shifted):
    text = I.reports_csv([I.run_test("gcm", shifted, (), seed=0)])
    assert text.splitlines()[0] == "subset,test,statistic,dof,p"
    assert text.splitlines()[1].startswith("{},gcm,")


@pytest.fixture(scope="module")
def binary():
    scm, fam = builtin_model("fig2-classification")
    return sample_pooled(scm, fam, [0, 1, 2], 600, 5)


@pytest.mark.parametrize("kind,bad_set", [("itp", ()), ("iep", ()), ("iep", ("X4",))])
def test_classification_tests_have_power(binary, kind, bad_set):
    # the shifts on X1 move Y itself, so the empty set is far from invariant
    ok = I.run_test(kind, binary, SB, seed=2)
    bad = I.run_test(kind, binary, bad_set, seed=2)
    assert ok.p > 0.01 and bad.p < 1e-3


def test_input_checks(shifted, binary):
    with pytest.raises(I.InvarianceError):
        I.run_test("itp", shifted, SB)
    with pytest.raises(I.InvarianceError):
        I.run_test("gcm", shifted.filter_env(0), SB)
    with pytest.raises(ValueError):
        I.run_test("kci", shifted, SB)


def test_gcm_constant_outcome_gives_zero_statistic():
    rng = np.random.default_rng(6)
    X = rng.normal(size=(200, 1))
    d = Dataset(X, np.zeros(200), np.repeat([0, 1], 100), ("A",))
    rep = I.run_test("gcm", d, ("A",), LearnerConfig("ols"))
    assert rep.statistic == 0.0 and rep.p == 1.0


def test_iep_zero_difference():
    # a constant response makes the permuted copy identical, so every paired difference is zero
    d = Dataset(np.zeros((40, 1)), np.zeros(40), np.repeat([0, 1], 20), ("A",), "classification")
    rep = I.run_test("iep", d, ("A",))
    assert rep.p >= 0.5

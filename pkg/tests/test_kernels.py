import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from pig import _kernels as K

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.integers(1, 60), elements=st.sampled_from([0.0, 1.0, 2.5, -3.0]) | finite))
def test_midrank_paths_agree(x):
    a, b = K.midrank_numpy(x), K.midrank_numba(x)
    np.testing.assert_array_equal(a, b)
    assert a.sum() == pytest.approx(x.size * (x.size + 1) / 2)


def test_midrank_ties():
    np.testing.assert_array_equal(K.midrank_numpy(np.array([3.0, 1.0, 3.0, 2.0])), [3.5, 1.0, 3.5, 2.0])


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 4), st.lists(st.integers(1, 8), min_size=0, max_size=3), st.integers(0, 2 ** 31),
       st.floats(0.0, 3.0))
def test_policy_forward_paths_agree(n_in, hidden, seed, bound):
    rng = np.random.default_rng(seed)
    sizes = np.array([n_in, *hidden, 1])
    theta = rng.normal(0, 1, K.policy_param_count(n_in, tuple(hidden)))
    X = rng.normal(0, 2, (37, n_in))
    a = K.policy_forward_numpy(X, theta, sizes, bound)
    b = K.policy_forward_numba(X, theta, sizes, bound)
    np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-12)
    assert np.all(np.abs(a) <= bound)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 6), st.integers(1, 200), st.integers(0, 2 ** 31))
def test_group_moments_paths_agree(k, n, seed):
    rng = np.random.default_rng(seed)
    v = rng.normal(0, 1, n)
    grp = rng.integers(0, k, n)
    for a, b in zip(K.group_moments_numpy(v, grp, k), K.group_moments_numba(v, grp, k)):
        np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 120), st.integers(1, 10), st.integers(0, 2 ** 31))
def test_best_split_paths_agree(n, min_leaf, seed):
    rng = np.random.default_rng(seed)
    xs = np.sort(rng.normal(0, 1, n))
    ys = np.where(xs > 0.3, 2.0, 0.0) + rng.normal(0, 0.1, n)
    ga, ta = K.best_split_numpy(xs, ys, min_leaf)
    gb, tb = K.best_split_numba(xs, ys, min_leaf)
    assert ga == pytest.approx(gb, rel=1e-9, abs=1e-9)
    assert (np.isnan(ta) and np.isnan(tb)) or ta == tb


def test_best_split_finds_step():
    xs = np.linspace(-1, 1, 101)
    ys = (xs > 0.2).astype(float)
    _, t = K.best_split_numpy(xs, ys, 5)
    assert 0.18 < t < 0.22


@pytest.mark.parametrize("flag,expected", [("0", "False"), ("1", "True")])
def test_env_flag_selects_path(flag, expected):
    code = "from pig import _kernels as K; print(K.USE_NUMBA and K.HAVE_NUMBA)"
    env = {**os.environ, "PIG_NUMBA": flag}
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == expected

"""Tests of the hypothesis that the response is independent of the environment given ``X_S``.

Four tests share one contract: ``(data, S) -> InvarianceReport`` with a p-value.
Nuisance regressions are cross-fitted over five folds stratified by environment
(and by class for classification).
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import special

from . import _kernels
from .predictors import LearnerConfig, fit_matrix, fit_multinomial
from .scm import Dataset

TESTS = ("ird", "gcm", "itp", "iep")


class InvarianceError(ValueError):
    pass


@dataclass(frozen=True)
class InvarianceReport:
    subset: tuple[str, ...]
    test: str
    p: float
    statistic: float
    dof: tuple = ()
    flags: tuple = ()

    def row(self) -> dict:
        return {"subset": "+".join(self.subset) or "{}", "test": self.test, "statistic": self.statistic,
                "dof": ";".join(str(d) for d in self.dof), "p": self.p}


def reports_csv(reports: Sequence[InvarianceReport]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, ["subset", "test", "statistic", "dof", "p"], lineterminator="\n")
    w.writeheader()
    for r in reports:
        w.writerow(r.row())
    return buf.getvalue()


# ---------------------------------------------------------------------------
# tail probabilities


def tail(dist: str, x, *dof) -> float | np.ndarray:
    """Upper-tail probability ``P(T > x)`` for ``f``, ``t``, ``chi2`` or ``normal``."""
    x = np.asarray(x, dtype=np.float64)
    if dist == "normal":
        out = special.ndtr(-x)
    elif dist == "t":
        (d,) = dof
        out = special.stdtr(d, -x)
    elif dist == "chi2":
        (d,) = dof
        out = np.where(x <= 0, 1.0, special.chdtrc(d, np.maximum(x, 0.0)))
    elif dist == "f":
        d1, d2 = dof
        out = np.where(x <= 0, 1.0, special.fdtrc(d1, d2, np.maximum(x, 0.0)))
    else:
        raise ValueError(f"unknown distribution {dist!r}")
    return float(out) if out.ndim == 0 else out


def _p(v) -> float:
    return float(min(max(v, 0.0), 1.0))


# ---------------------------------------------------------------------------
# cross-fitting


def fold_ids(strata: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Assign rows to ``k`` folds round-robin within each stratum after shuffling."""
    folds = np.empty(strata.shape[0], dtype=np.int64)
    for s in np.unique(strata):
        idx = np.flatnonzero(strata == s)
        idx = idx[rng.permutation(idx.shape[0])]
        folds[idx] = (np.arange(idx.shape[0]) + rng.integers(k)) % k
    return folds


def _strata(data: Dataset) -> np.ndarray:
    if data.task == "classification":
        return data.env * 2 + data.y.astype(np.int64)
    return data.env


def cross_fit(X: np.ndarray, y: np.ndarray, folds: np.ndarray, cfg: LearnerConfig, task: str,
              seed: int = 0) -> np.ndarray:
    out = np.empty(y.shape[0])
    for k in np.unique(folds):
        te = folds == k
        model = fit_matrix(X[~te], y[~te], cfg, task, seed + int(k))
        out[te] = model.predict(X[te])
    return out


def cross_fit_multinomial(X: np.ndarray, labels: np.ndarray, k: int, folds: np.ndarray) -> np.ndarray:
    P = np.empty((labels.shape[0], k))
    for f in np.unique(folds):
        te = folds == f
        model = fit_multinomial(X[~te], labels[~te], k)
        P[te] = model.predict_proba(X[te])
    return P


def _env_codes(data: Dataset):
    envs, codes = np.unique(data.env, return_inverse=True)
    return envs, codes.reshape(-1)


def _one_hot(codes: np.ndarray, k: int, drop_first: bool = True) -> np.ndarray:
    H = np.zeros((codes.shape[0], k))
    H[np.arange(codes.shape[0]), codes] = 1.0
    return H[:, 1:] if drop_first else H


def _check_envs(data: Dataset, min_rows: int = 1):
    envs, codes = _env_codes(data)
    if envs.shape[0] < 2:
        raise InvarianceError("invariance tests need at least two environments")
    counts = np.bincount(codes)
    if counts.min() < min_rows:
        raise InvarianceError(f"each environment needs at least {min_rows} rows")
    return envs, codes


# ---------------------------------------------------------------------------
# the four tests


def anova_f(values: np.ndarray, groups: np.ndarray, k: int) -> tuple[float, float, int, int]:
    """One-way ANOVA ``(F, p, df_between, df_within)``."""
    counts, sums, sumsq = _kernels.group_moments(values, groups, k)
    n = values.shape[0]
    grand = sums.sum() / n
    means = sums / counts
    ss_between = float(np.sum(counts * (means - grand) ** 2))
    ss_within = float(np.sum(sumsq - sums * means))
    df1, df2 = k - 1, n - k
    ms_between = ss_between / df1
    ms_within = max(ss_within, 0.0) / df2
    if ms_within <= 1e-300 * max(1.0, ms_between):
        return (np.inf, 0.0, df1, df2) if ms_between > 0 else (0.0, 1.0, df1, df2)
    F = ms_between / ms_within
    return F, _p(tail("f", F, df1, df2)), df1, df2


def test_ird(data: Dataset, S: Sequence[str], config: LearnerConfig | None = None, seed: int = 0,
             folds: int = 5) -> InvarianceReport:
    """Residual mean differences across environments (one-way ANOVA on cross-fit residuals)."""
    S = tuple(S)
    envs, codes = _check_envs(data, 3)
    cfg = config or LearnerConfig.default(data.task)
    rng = np.random.default_rng(seed)
    fid = fold_ids(_strata(data), folds, rng)
    pred = cross_fit(data.cols(S), data.y, fid, cfg, data.task, seed)
    F, p, d1, d2 = anova_f(data.y - pred, codes, envs.shape[0])
    return InvarianceReport(S, "ird", p, F, (d1, d2))


def gcm_statistic(L: np.ndarray) -> tuple[float, int]:
    """``n * mean^T pinv(cov) mean`` for the per-row product matrix ``L`` and the covariance rank."""
    n, m = L.shape
    mean = L.mean(axis=0)
    C = np.atleast_2d(np.cov(L, rowvar=False, bias=True))
    if not np.any(C):
        return (0.0 if not np.any(mean) else np.inf), m
    w, V = np.linalg.eigh(C)
    keep = w > 1e-12 * max(w.max(), 1e-300)
    rank = int(keep.sum())
    proj = V[:, keep].T @ mean
    return float(n * np.sum(proj ** 2 / w[keep])), rank


def test_gcm(data: Dataset, S: Sequence[str], config: LearnerConfig | None = None, seed: int = 0,
             folds: int = 5) -> InvarianceReport:
    """Generalized covariance measure between response and environment residuals given ``X_S``."""
    S = tuple(S)
    envs, codes = _check_envs(data)
    k = envs.shape[0]
    cfg = config or LearnerConfig.default(data.task)
    rng = np.random.default_rng(seed)
    fid = fold_ids(_strata(data), folds, rng)
    XS = data.cols(S)
    ry = data.y - cross_fit(XS, data.y, fid, cfg, data.task, seed)
    P = cross_fit_multinomial(XS, codes, k, fid)
    RE = _one_hot(codes, k) - P[:, 1:]
    L = ry[:, None] * RE
    T, rank = gcm_statistic(L)
    flags = () if rank == k - 1 else (f"rank-deficient covariance (rank {rank})",)
    if rank == 0:
        return InvarianceReport(S, "gcm", 1.0 if T == 0 else 0.0, T, (0,), flags)
    return InvarianceReport(S, "gcm", _p(tail("chi2", T, rank)), T, (rank,), flags)


def delong(scores_a: np.ndarray, scores_b: np.ndarray, labels: np.ndarray):
    """Paired DeLong: ``(auc_a, auc_b, var(auc_a - auc_b))`` from midrank structural components."""
    labels = np.asarray(labels).astype(bool)
    pos, neg = np.flatnonzero(labels), np.flatnonzero(~labels)
    m, n = pos.shape[0], neg.shape[0]
    if m == 0 or n == 0:
        raise InvarianceError("both classes are needed for an AUC")
    aucs, v10, v01 = [], [], []
    for s in (np.asarray(scores_a, float), np.asarray(scores_b, float)):
        tx = _kernels.midrank(s[pos])
        ty = _kernels.midrank(s[neg])
        tz = _kernels.midrank(np.concatenate([s[pos], s[neg]]))
        aucs.append(float(tz[:m].sum() / m / n - (m + 1.0) / 2.0 / n))
        v01.append((tz[:m] - tx) / n)
        v10.append(1.0 - (tz[m:] - ty) / m)
    sx = np.cov(np.vstack(v01))
    sy = np.cov(np.vstack(v10))
    S = sx / m + sy / n
    c = np.array([1.0, -1.0])
    return aucs[0], aucs[1], float(c @ S @ c), S


def delong_one_sided(scores_a, scores_b, labels) -> tuple[float, float]:
    """z statistic and p-value for ``AUC(a) > AUC(b)``."""
    a, b, var, _ = delong(scores_a, scores_b, labels)
    if not var > 1e-300:
        return 0.0, 1.0
    z = (a - b) / np.sqrt(var)
    return float(z), _p(tail("normal", z))


def test_itp(data: Dataset, S: Sequence[str], config: LearnerConfig | None = None, seed: int = 0,
             folds: int = 5) -> InvarianceReport:
    """AUC of a classifier on ``(X_S, E)`` against one on ``(X_S, permuted E)`` (one-sided DeLong)."""
    S = tuple(S)
    if data.task != "classification":
        raise InvarianceError("the prediction test needs a classification task")
    if np.unique(data.y).size < 2:
        raise InvarianceError("both response classes must be present")
    envs, codes = _check_envs(data)
    k = envs.shape[0]
    cfg = config or LearnerConfig.default("classification")
    rng = np.random.default_rng(seed)
    fid = fold_ids(_strata(data), folds, rng)
    perm = rng.permutation(codes.shape[0])
    XS = data.cols(S)
    with_e = np.column_stack([XS, _one_hot(codes, k)])
    with_p = np.column_stack([XS, _one_hot(codes[perm], k)])
    sa = cross_fit(with_e, data.y, fid, cfg, "classification", seed)
    sb = cross_fit(with_p, data.y, fid, cfg, "classification", seed)
    z, p = delong_one_sided(sa, sb, data.y)
    return InvarianceReport(S, "itp", p, z, ())


def test_iep(data: Dataset, S: Sequence[str], config: LearnerConfig | None = None, seed: int = 0,
             folds: int = 5) -> InvarianceReport:
    """Does ``Y`` help predict ``E`` given ``X_S``? One-sided paired t-test on cross-entropies."""
    S = tuple(S)
    envs, codes = _check_envs(data)
    k = envs.shape[0]
    rng = np.random.default_rng(seed)
    fid = fold_ids(_strata(data), folds, rng)
    perm = rng.permutation(codes.shape[0])
    XS = data.cols(S)
    rows = np.arange(codes.shape[0])
    P_true = cross_fit_multinomial(np.column_stack([XS, data.y]), codes, k, fid)
    P_perm = cross_fit_multinomial(np.column_stack([XS, data.y[perm]]), codes, k, fid)
    eps = 1e-12
    d = -np.log(np.maximum(P_true[rows, codes], eps)) + np.log(np.maximum(P_perm[rows, codes], eps))
    n = d.shape[0]
    sd = float(np.std(d, ddof=1))
    mean = float(np.mean(d))
    if not sd > 1e-300:
        return InvarianceReport(S, "iep", 1.0 if mean >= 0 else 0.0, 0.0, (n - 1,))
    t = mean / (sd / np.sqrt(n))
    # small t (true-Y losses lower) is evidence against invariance
    return InvarianceReport(S, "iep", _p(1.0 - tail("t", t, n - 1)), t, (n - 1,))


TEST_FUNCS = {"ird": test_ird, "gcm": test_gcm, "itp": test_itp, "iep": test_iep}


def run_test(kind: str, data: Dataset, S: Sequence[str], config: LearnerConfig | None = None,
             seed: int = 0) -> InvarianceReport:
    if kind not in TEST_FUNCS:
        raise ValueError(f"unknown invariance test {kind!r}")
    return TEST_FUNCS[kind](data, S, config, seed)

for _f in TEST_FUNCS.values():
    _f.__test__ = False

"""Subset search: screening, the invariance filter, IMP and two-stage stabilized ensembles."""

from __future__ import annotations

import csv
import io
import itertools
import warnings
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .invariance import TESTS, cross_fit, fold_ids, run_test, _strata
from .predictors import (ConstantModel, EnsembleModel, LearnerConfig, SubsetPredictor, eval_loss, fit)
from .scm import Dataset

MAX_UNSCREENED = 16


@dataclass(frozen=True)
class SubsetSearchConfig:
    alpha_inv: float = 0.05
    alpha_pred: float = 0.05
    B: int = 250
    test: str = "gcm"
    learner: LearnerConfig | None = None
    screening: int | None = None  # None: keep all; k: top-k on an L1 path
    max_size: int | None = None
    folds: int = 5

    def __post_init__(self):
        if not 0 < self.alpha_inv < 1 or not 0 < self.alpha_pred < 1:
            raise ValueError("thresholds must lie in (0, 1)")
        if self.B < 10:
            raise ValueError("at least 10 bootstrap samples are needed")
        if self.test not in TESTS:
            raise ValueError(f"unknown test {self.test!r}")
        if self.screening is not None and self.screening < 1:
            raise ValueError("screening keeps at least one covariate")

    def learner_for(self, task: str) -> LearnerConfig:
        return self.learner or LearnerConfig.default(task)


@dataclass
class SubsetScore:
    subset: tuple[str, ...]
    s_inv: float = float("nan")
    s_pred: float = float("nan")
    passed_inv: bool = False
    passed_pred: bool = False
    weight: float = 0.0
    reason: str = ""


@dataclass
class SearchResult:
    scores: list[SubsetScore]
    selected: tuple[str, ...] | None = None
    cutoff: float = float("nan")
    flags: tuple = ()

    def csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["subset", "s_inv", "s_pred", "passed_inv", "passed_pred", "weight"])
        for s in self.scores:
            w.writerow(["+".join(s.subset) or "{}", s.s_inv, s.s_pred, int(s.passed_inv),
                        int(s.passed_pred), s.weight])
        return buf.getvalue()


# ---------------------------------------------------------------------------
# candidates and screening


def screen(data: Dataset, config: SubsetSearchConfig) -> tuple[str, ...]:
    """Keep all covariates, or the first ``k`` to enter an L1 path."""
    k = config.screening
    if k is None:
        return data.columns
    d = len(data.columns)
    if k >= d:
        if k > d:
            warnings.warn(f"screening size {k} exceeds {d} covariates; keeping all")
        return data.columns
    X = (data.X - data.X.mean(axis=0)) / np.where(data.X.std(axis=0) > 0, data.X.std(axis=0), 1.0)
    if data.task == "regression":
        from sklearn.linear_model import lasso_path

        _, coefs, _ = lasso_path(X, data.y - data.y.mean(), n_alphas=200)
        path = coefs.T  # alphas descend
    else:
        from sklearn.linear_model import LogisticRegression
        from sklearn.svm import l1_min_c

        c0 = l1_min_c(X, data.y, loss="log")
        path = []
        for c in c0 * np.logspace(0, 4, 60):
            m = LogisticRegression(penalty="l1", C=c, solver="liblinear", max_iter=1000).fit(X, data.y)
            path.append(m.coef_[0])
        path = np.array(path)
    for coef in path:
        if np.count_nonzero(coef) >= k:
            top = np.argsort(-np.abs(coef), kind="mergesort")[:k]
            return tuple(data.columns[i] for i in sorted(top))
    return data.columns


def all_subsets(columns: Sequence[str], max_size: int | None = None) -> list[tuple[str, ...]]:
    columns = tuple(columns)
    if len(columns) > MAX_UNSCREENED:
        raise ValueError(f"{len(columns)} covariates: screening is required above {MAX_UNSCREENED}")
    top = len(columns) if max_size is None else min(max_size, len(columns))
    return [c for r in range(top + 1) for c in itertools.combinations(columns, r)]


def candidate_subsets(data: Dataset, config: SubsetSearchConfig) -> list[tuple[str, ...]]:
    return all_subsets(screen(data, config), config.max_size)


# ---------------------------------------------------------------------------
# stage one: invariance


def invariant_subsets(data: Dataset, candidates: Sequence[Sequence[str]], config: SubsetSearchConfig,
                      seed: int = 0) -> list[SubsetScore]:
    if not candidates:
        raise ValueError("candidate list is empty")
    learner = config.learner_for(data.task)
    out = []
    for i, S in enumerate(candidates):
        S = tuple(S)
        sc = SubsetScore(S)
        try:
            rep = run_test(config.test, data, S, learner, seed + 7919 * i)
            sc.s_inv = rep.p
            sc.passed_inv = rep.p >= config.alpha_inv
        except Exception as exc:  # noqa: BLE001 - a failed test rejects the subset
            sc.s_inv = 0.0
            sc.reason = f"{type(exc).__name__}: {exc}"
        out.append(sc)
    return out


# ---------------------------------------------------------------------------
# stage two: prediction


def oof_losses(data: Dataset, S: Sequence[str], learner: LearnerConfig, folds: np.ndarray,
               seed: int = 0) -> np.ndarray:
    """Per-row out-of-fold loss: squared error, or cross-entropy for classification."""
    pred = cross_fit(data.cols(tuple(S)), data.y, folds, learner, data.task, seed)
    return eval_loss("log" if data.task == "classification" else "squared", data.y, pred)


def _order_key(S, columns):
    return (len(S), [columns.index(v) for v in S])


def _best(scores: list[SubsetScore], columns) -> SubsetScore:
    return min(scores, key=lambda s: (-s.s_pred, *_order_key(s.subset, columns)))


def _score_predictions(data, scores, config, seed):
    learner = config.learner_for(data.task)
    folds = fold_ids(_strata(data), config.folds, np.random.default_rng(seed))
    losses = {}
    for sc in scores:
        if sc.passed_inv:
            losses[sc.subset] = oof_losses(data, sc.subset, learner, folds, seed)
            sc.s_pred = -float(np.mean(losses[sc.subset]))
    return losses


def _fallback(data: Dataset) -> SubsetPredictor:
    return SubsetPredictor((), data.columns, data.task, "constant",
                           ConstantModel(float(np.mean(data.y)), data.task), ("no invariant subset",))


def prepare(data: Dataset, candidates: Sequence[Sequence[str]], config: SubsetSearchConfig,
            seed: int = 0) -> tuple[list[SubsetScore], dict]:
    """Invariance p-values and out-of-fold losses, shareable between :func:`imp` and :func:`stabilized`."""
    scores = invariant_subsets(data, candidates, config, seed)
    return scores, _score_predictions(data, scores, config, seed)


def _unpack(prepared, data, candidates, config, seed):
    scores, losses = prepared if prepared is not None else prepare(data, candidates, config, seed)
    return [replace(s) for s in scores], losses


def imp(data: Dataset, candidates: Sequence[Sequence[str]], config: SubsetSearchConfig,
        seed: int = 0, prepared=None) -> tuple[SubsetPredictor, SearchResult]:
    """Fit on the invariant subset with the best out-of-sample prediction score."""
    scores, _ = _unpack(prepared, data, candidates, config, seed)
    passed = [s for s in scores if s.passed_inv]
    if not passed:
        return _fallback(data), SearchResult(scores, None, flags=("no invariant subset",))
    best = _best(passed, data.columns)
    best.passed_pred = True
    best.weight = 1.0
    return fit(data, best.subset, config.learner_for(data.task), seed), SearchResult(scores, best.subset)


def bootstrap_cutoff(losses: np.ndarray, env: np.ndarray, B: int, alpha: float,
                     rng: np.random.Generator) -> tuple[float, np.ndarray]:
    """``alpha``-quantile of bootstrap prediction scores, resampling rows within environments."""
    groups = [np.flatnonzero(env == e) for e in np.unique(env)]
    n = losses.shape[0]
    boot = np.empty(B)
    for b in range(B):
        idx = np.concatenate([g[rng.integers(0, g.shape[0], g.shape[0])] for g in groups])
        boot[b] = -losses[idx].sum() / n
    return float(np.quantile(boot, alpha)), boot


def stabilized(data: Dataset, candidates: Sequence[Sequence[str]], config: SubsetSearchConfig,
               seed: int = 0, prepared=None) -> tuple[EnsembleModel, SearchResult]:
    """Two-stage ensemble: invariant subsets whose score clears a bootstrap cutoff, equally weighted."""
    scores, losses = _unpack(prepared, data, candidates, config, seed)
    passed = [s for s in scores if s.passed_inv]
    if not passed:
        return (EnsembleModel([(_fallback(data), 1.0)], ("no invariant subset",)),
                SearchResult(scores, None, flags=("no invariant subset",)))
    best = _best(passed, data.columns)
    boot_rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(0xB007,))))
    cutoff, boot = bootstrap_cutoff(losses[best.subset], data.env, config.B, config.alpha_pred, boot_rng)
    flags = ()
    if cutoff > best.s_pred + (boot.max() - boot.min()):
        flags = ("cutoff above best score",)
    members = [s for s in passed if s.s_pred >= cutoff] or [best]
    learner = config.learner_for(data.task)
    w = 1.0 / len(members)
    fitted = []
    for s in members:
        s.passed_pred = True
        s.weight = w
        fitted.append((fit(data, s.subset, learner, seed), w))
    ens = EnsembleModel(fitted, flags, {"cutoff": cutoff})
    return ens, SearchResult(scores, best.subset, cutoff, flags)

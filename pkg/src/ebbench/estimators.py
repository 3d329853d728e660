"""Subgroup estimators: direct, synthetic regression, empirical Bayes and relatives.

The empirical Bayes estimate for subgroup g is the precision-weighted
combination::

    mu_g = f(X_g) + A / (s2_g + A) * (Z_g - f(X_g))

where ``f`` is a regression fitted on *other* subgroups (two-fold
cross-fitting) and ``A`` is the positive part of the mean excess residual
variance. Fay-Herriot is this estimator with a linear ``f`` (ridge family on
linear features) and James-Stein the special case of a constant ``f``.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .core import GroupTable
from .intervals import (
    UndefinedKappaError,
    kappa_hat,
    normal_quantile,
    robust_eb_halfwidth,
    student_t_quantile,
    wilson_bounds,
)
from .metrics import MetricKind, MetricSummary, summary_arrays
from .regression import (
    FeatureBlock,
    FeatureMatrix,
    Family,
    RegressorSpec,
    cv_folds,
    fit,
    predict,
)

logger = logging.getLogger(__name__)

METHODS = ("dt", "sr", "eb", "js", "structreg")
CSV_COLUMNS = (
    "group_key", "model_id", "task_id", "n", "Z", "sigma2_hat", "f_hat", "A_hat",
    "weight", "estimate", "ci_lo", "ci_hi", "method", "seed",
)


class TooFewGroupsError(ValueError):
    pass


@dataclass
class ShrinkageFit:
    """Shrinkage parameters for the groups of one fold (and one pooling scope)."""

    A_hat: float
    group_index: np.ndarray
    prior_means: np.ndarray
    sigma2: np.ndarray
    weights: np.ndarray
    residuals: np.ndarray
    kappa_hat: float | None
    fold_id: int
    scope: str = "all"


@dataclass
class EstimateTable:
    method: str
    groups: GroupTable
    n: np.ndarray
    Z: np.ndarray
    sigma2: np.ndarray
    estimate: np.ndarray
    f_hat: np.ndarray | None = None
    A_hat: np.ndarray | None = None
    weight: np.ndarray | None = None
    ci_lo: np.ndarray | None = None
    ci_hi: np.ndarray | None = None
    seed: int | None = None
    metadata: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.groups)

    def rows(self):
        nan = np.full(len(self), np.nan)

        def col(a):
            return nan if a is None else a

        cols = [col(self.f_hat), col(self.A_hat), col(self.weight), col(self.ci_lo), col(self.ci_hi)]
        for i in range(len(self)):
            yield {
                "group_key": self.groups.group_keys[i],
                "model_id": self.groups.model_ids[i],
                "task_id": self.groups.task_ids[i],
                "n": int(self.n[i]),
                "Z": _fmt(self.Z[i]),
                "sigma2_hat": _fmt(self.sigma2[i]),
                "f_hat": _fmt(cols[0][i]),
                "A_hat": _fmt(cols[1][i]),
                "weight": _fmt(cols[2][i]),
                "estimate": _fmt(self.estimate[i]),
                "ci_lo": _fmt(cols[3][i]),
                "ci_hi": _fmt(cols[4][i]),
                "method": self.method,
                "seed": "" if self.seed is None else str(self.seed),
            }


def _fmt(x) -> str:
    x = float(x)
    return "" if math.isnan(x) else repr(x)


def write_estimates_csv(tables: Sequence[EstimateTable], fh) -> None:
    writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for t in tables:
        for row in t.rows():
            writer.writerow(row)


def estimates_csv(tables: Sequence[EstimateTable]) -> str:
    buf = io.StringIO()
    write_estimates_csv(tables, buf)
    return buf.getvalue()


def _clip(x, bounds):
    return x if bounds is None else np.clip(x, *bounds)


# --------------------------------------------------------------------------
# Building blocks
# --------------------------------------------------------------------------


def direct(summary: MetricSummary) -> float:
    return summary.Z


def estimate_A(residuals, variances) -> float:
    """Positive part of mean(residual^2 - variance)."""
    e = np.asarray(residuals, dtype=float)
    v = np.asarray(variances, dtype=float)
    if e.size == 0 or e.shape != v.shape:
        raise ValueError("estimate_A needs nonempty residual and variance vectors of equal length")
    return max(0.0, float(np.mean(e * e - v)))


def eb_combine(Z, f_hat, sigma2, A_hat):
    """``(s2 * f + A * Z) / (s2 + A)``; vectorized, scalar in gives scalar out."""
    Z, f_hat, sigma2 = (np.asarray(a, dtype=float) for a in (Z, f_hat, sigma2))
    total = sigma2 + A_hat
    if np.any(total <= 0):
        raise ValueError("EB combination is undefined when sigma2 = A_hat = 0")
    out = f_hat + (A_hat / total) * (Z - f_hat)
    return float(out) if out.ndim == 0 else out


def shrinkage_weight(sigma2, A_hat):
    sigma2 = np.asarray(sigma2, dtype=float)
    return A_hat / (sigma2 + A_hat) if A_hat > 0 else np.zeros_like(sigma2)


def dt_intervals(kind: MetricKind, Z, sigma2, n, successes=None, alpha: float = 0.05):
    """Per-group direct intervals: Wilson for binary, t for continuous.

    The t interval only needs ``s/sqrt(n)``, which is ``sqrt(sigma2)``. Units
    with n = 1 carry a pooled variance and get a normal interval.
    """
    Z, sigma2 = np.asarray(Z, dtype=float), np.asarray(sigma2, dtype=float)
    n = np.asarray(n, dtype=int)
    if kind is MetricKind.BINARY:
        k = np.rint(Z * n) if successes is None else np.asarray(successes)
        return wilson_bounds(k, n, alpha)
    q = np.where(n >= 2, student_t_quantile(1.0 - alpha / 2.0, np.maximum(n - 1, 1)), normal_quantile(1.0 - alpha / 2.0))
    half = q * np.sqrt(sigma2)
    return _clip(Z - half, kind.bounds), _clip(Z + half, kind.bounds)


def _summary_inputs(summaries: Sequence[MetricSummary]):
    if not summaries:
        raise ValueError("no summaries given")
    kinds = {s.metric_kind for s in summaries}
    if len(kinds) != 1:
        raise ValueError("summaries mix metric kinds")
    Z, s2, n = summary_arrays(summaries)
    groups = GroupTable([s.group_key for s in summaries], [s.model_id for s in summaries],
                        [s.task_id for s in summaries])
    k = None
    kind = kinds.pop()
    if kind is MetricKind.BINARY:
        k = np.array([s.success_count for s in summaries])
    return kind, Z, s2, n, k, groups


def direct_table(summaries: Sequence[MetricSummary], alpha: float = 0.05) -> EstimateTable:
    kind, Z, s2, n, k, groups = _summary_inputs(summaries)
    lo, hi = dt_intervals(kind, Z, s2, n, k, alpha)
    return EstimateTable("DT", groups, n, Z, s2, Z.copy(), ci_lo=lo, ci_hi=hi)


# --------------------------------------------------------------------------
# Synthetic regression
# --------------------------------------------------------------------------


def synthetic_regression(
    summaries: Sequence[MetricSummary], features: FeatureMatrix, spec: RegressorSpec | None = None
) -> EstimateTable:
    """Regression predictions of every subgroup's metric from its features."""
    kind, Z, s2, n, _, groups = _summary_inputs(summaries)
    f_hat = sr_predict(Z, features, spec)
    return EstimateTable("SR", groups, n, Z, s2, _clip(f_hat, kind.bounds), f_hat=f_hat, seed=(spec or RegressorSpec()).seed)


def sr_predict(Z, features: FeatureMatrix, spec: RegressorSpec | None = None) -> np.ndarray:
    model = fit(features, Z, None, spec or RegressorSpec())
    return predict(model, features)


# --------------------------------------------------------------------------
# Empirical Bayes with cross-fitting
# --------------------------------------------------------------------------


@dataclass
class EBResult:
    estimate: np.ndarray
    f_hat: np.ndarray
    A_hat: np.ndarray
    weight: np.ndarray
    half_width: np.ndarray
    fits: list[ShrinkageFit]


def _eb_fold_fit(Z, s2, f_hat, idx, fold_id, scope, alpha, use_kappa, table):
    A = estimate_A(Z[idx] - f_hat[idx], s2[idx])
    eps = Z[idx] - f_hat[idx]
    kap = None
    if A > 0:
        try:
            kap = kappa_hat(eps, s2[idx], A)
        except UndefinedKappaError:
            kap = None
    w = shrinkage_weight(s2[idx], A)
    half = robust_eb_halfwidth(s2[idx], A, alpha, kap if use_kappa else None, table)
    return ShrinkageFit(A, idx, f_hat[idx], s2[idx], w, eps, kap, fold_id, scope), half


def shrink(Z, s2, f_hat, idx_sets, alpha=0.05, use_kappa=False, table=None, bounds=None) -> EBResult:
    """Combine Z with prior means per index set (fold x scope) and build robust half-widths."""
    G = Z.size
    est = np.empty(G)
    A_col = np.empty(G)
    w_col = np.empty(G)
    half = np.empty(G)
    fits = []
    for fold_id, scope, idx in idx_sets:
        sf, h = _eb_fold_fit(Z, s2, f_hat, idx, fold_id, scope, alpha, use_kappa, table)
        fits.append(sf)
        est[idx] = eb_combine(Z[idx], f_hat[idx], s2[idx], sf.A_hat)
        A_col[idx] = sf.A_hat
        w_col[idx] = sf.weights
        half[idx] = h
    return EBResult(_clip(est, bounds), f_hat, A_col, w_col, half, fits)


def eb_fold_split(features: FeatureMatrix, seed: int) -> np.ndarray:
    """Two balanced folds of subgroups, stratified by model."""
    return cv_folds(features.n_rows, 2, seed, features.strata("model"))


def _scope_sets(fold_idx, model_ids, pool_scope, fold_id):
    if pool_scope == "all":
        return [(fold_id, "all", fold_idx)]
    if pool_scope != "per-model":
        raise ValueError(f"pool_scope must be 'all' or 'per-model', got {pool_scope!r}")
    models = np.asarray(model_ids, dtype=object)[fold_idx]
    return [(fold_id, str(m), fold_idx[models == m]) for m in sorted(set(models))]


def cross_fit_prior(Z, features: FeatureMatrix, spec: RegressorSpec, seed: int):
    """Out-of-fold prior means and the fold index of each subgroup."""
    folds = eb_fold_split(features, seed)
    f_hat = np.empty(Z.size)
    for k in (0, 1):
        train, test = np.flatnonzero(folds != k), np.flatnonzero(folds == k)
        model = fit(features.take(train), Z[train], None, spec)
        f_hat[test] = predict(model, features.take(test))
    return f_hat, folds


def eb_arrays(
    Z, s2, features: FeatureMatrix, spec: RegressorSpec, seed: int, pool_scope: str = "all",
    alpha: float = 0.05, use_kappa: bool = False, table=None, bounds=None, min_groups: int = 4,
) -> EBResult:
    Z = np.asarray(Z, dtype=float)
    s2 = np.asarray(s2, dtype=float)
    if Z.size < min_groups:
        raise TooFewGroupsError(f"empirical Bayes needs at least {min_groups} subgroups, got {Z.size}")
    f_hat, folds = cross_fit_prior(Z, features, spec, seed)
    sets = []
    for k in (0, 1):
        sets += _scope_sets(np.flatnonzero(folds == k), features.groups.model_ids, pool_scope, k)
    return shrink(Z, s2, f_hat, sets, alpha, use_kappa, table, bounds)


def eb_cross_fit(
    summaries: Sequence[MetricSummary],
    features: FeatureMatrix,
    spec: RegressorSpec | None = None,
    seed: int = 0,
    pool_scope: str = "all",
    alpha: float = 0.05,
    use_kappa: bool = False,
) -> tuple[EstimateTable, list[ShrinkageFit]]:
    """Cross-fitted empirical Bayes estimates with robust intervals.

    Subgroups are split into two model-stratified folds. The regressor is
    fit on one fold and predicts the other; A_hat and kappa_hat come from the
    held-out residuals, computed over the whole fold (``pool_scope='all'``)
    or separately per model (``'per-model'``). Folds are then swapped.
    """
    spec = spec or RegressorSpec()
    kind, Z, s2, n, _, groups = _summary_inputs(summaries)
    res = eb_arrays(Z, s2, features, spec, seed, pool_scope, alpha, use_kappa, bounds=kind.bounds)
    degenerate = [f for f in res.fits if f.A_hat == 0]
    if degenerate:
        logger.warning("A_hat = 0 in %d fold(s): estimates equal the regression and intervals collapse", len(degenerate))
    lo = _clip(res.estimate - res.half_width, kind.bounds)
    hi = _clip(res.estimate + res.half_width, kind.bounds)
    table = EstimateTable("EB", groups, n, Z, s2, res.estimate, res.f_hat, res.A_hat, res.weight, lo, hi, seed,
                          {"pool_scope": pool_scope, "family": spec.family.value})
    return table, res.fits


# --------------------------------------------------------------------------
# James-Stein and structured regression
# --------------------------------------------------------------------------


def precision_weighted_mean(Z, s2) -> float:
    w = 1.0 / np.asarray(s2, dtype=float)
    return float(w @ np.asarray(Z, dtype=float) / w.sum())


def js_arrays(Z, s2, alpha=0.05, use_kappa=False, table=None, bounds=None, min_groups=4) -> EBResult:
    Z = np.asarray(Z, dtype=float)
    s2 = np.asarray(s2, dtype=float)
    if Z.size < min_groups:
        raise TooFewGroupsError(f"James-Stein needs at least {min_groups} subgroups, got {Z.size}")
    f_hat = np.full(Z.size, precision_weighted_mean(Z, s2))
    return shrink(Z, s2, f_hat, [(0, "all", np.arange(Z.size))], alpha, use_kappa, table, bounds)


def james_stein(summaries: Sequence[MetricSummary], alpha: float = 0.05, use_kappa: bool = False,
                min_groups: int = 4) -> EstimateTable:
    """EB shrinkage toward the precision-weighted grand mean (no sample splitting)."""
    kind, Z, s2, n, _, groups = _summary_inputs(summaries)
    res = js_arrays(Z, s2, alpha, use_kappa, bounds=kind.bounds, min_groups=min_groups)
    lo = _clip(res.estimate - res.half_width, kind.bounds)
    hi = _clip(res.estimate + res.half_width, kind.bounds)
    return EstimateTable("JS", groups, n, Z, s2, res.estimate, res.f_hat, res.A_hat, res.weight, lo, hi)


def with_unit_intercepts(features: FeatureMatrix) -> FeatureMatrix:
    if "unit" in features.block_names:
        return features
    g = features.groups
    levels = tuple(f"{a}|{b}" for a, b in zip(g.group_keys, g.model_ids))
    rows = np.hstack([features.rows, np.eye(features.n_rows)])
    return FeatureMatrix(rows, features.blocks + (FeatureBlock("unit", features.n_rows, True, levels),), g)


def structreg_arrays(Z, s2, features: FeatureMatrix, grid=None, seed: int = 0, cv_folds: int = 2,
                     stratify_by: str | None = "task", bounds=None) -> np.ndarray:
    Z = np.asarray(Z, dtype=float)
    if Z.size < 2:
        raise TooFewGroupsError("structured regression needs at least 2 subgroups")
    fm = with_unit_intercepts(features)
    # unit intercepts make the design rank deficient and coordinate descent slow; 1e-6 keeps fitted values stable
    spec = RegressorSpec(Family.LASSO, grid=grid, cv_folds=cv_folds, stratify_by=stratify_by, seed=seed, tol=1e-6)
    model = fit(fm, Z, 1.0 / np.asarray(s2, dtype=float), spec)
    return _clip(predict(model, fm), bounds)


def structured_regression(
    summaries: Sequence[MetricSummary], features: FeatureMatrix, grid=None, seed: int = 0, cv_folds: int = 2
) -> EstimateTable:
    """Precision-weighted Lasso over per-unit intercepts plus the regression features; fitted values are the estimates."""
    kind, Z, s2, n, _, groups = _summary_inputs(summaries)
    est = structreg_arrays(Z, s2, features, grid, seed, cv_folds, bounds=kind.bounds)
    return EstimateTable("StructReg", groups, n, Z, s2, est, seed=seed)

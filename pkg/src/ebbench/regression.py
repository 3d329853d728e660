"""Subgroup-level features and the prior-mean regressors.

Three families share one interface: ridge (closed form via SVD), weighted
Lasso (cyclic coordinate descent with soft-thresholding) and boosted depth-1
trees. Hyperparameters are chosen by K-fold cross-validation on weighted
squared error, then the model is refit on all rows.

Penalties are scale sensitive, so for ridge and Lasso the continuous feature
blocks are standardized with training statistics before fitting and the
coefficients are mapped back to the original scale afterwards. Weights are
normalized to mean one: only their ratios matter, which makes a weighted fit
with equal weights identical to the unweighted one.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .core import DomainError, GroupTable, MissingFieldError, SchemaError, SubgroupData

DEFAULT_BLOCKS = ("embedding", "confidence", "model", "task")
KNOWN_BLOCKS = DEFAULT_BLOCKS + ("unit",)


@dataclass(frozen=True)
class FeatureBlock:
    name: str
    width: int
    indicator: bool
    levels: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {"name": self.name, "width": self.width, "indicator": self.indicator, "levels": list(self.levels)}

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureBlock":
        return cls(d["name"], int(d["width"]), bool(d["indicator"]), tuple(d.get("levels", ())))


@dataclass(frozen=True)
class FeatureMatrix:
    rows: np.ndarray
    blocks: tuple[FeatureBlock, ...]
    groups: GroupTable

    def __post_init__(self):
        rows = np.asarray(self.rows, dtype=float)
        if rows.ndim != 2:
            raise ValueError("feature rows must form a 2-D array")
        width = sum(b.width for b in self.blocks)
        if rows.shape[1] != width:
            raise SchemaError(f"block widths sum to {width} but rows have {rows.shape[1]} columns")
        if len(self.groups) != rows.shape[0]:
            raise SchemaError("group table and rows are misaligned")
        object.__setattr__(self, "rows", rows)

    @property
    def n_rows(self) -> int:
        return self.rows.shape[0]

    @property
    def block_names(self) -> tuple[str, ...]:
        return tuple(b.name for b in self.blocks)

    def _offsets(self) -> dict[str, slice]:
        out, start = {}, 0
        for b in self.blocks:
            out[b.name] = slice(start, start + b.width)
            start += b.width
        return out

    def block(self, name: str) -> np.ndarray:
        return self.rows[:, self._offsets()[name]]

    def indicator_mask(self) -> np.ndarray:
        return np.concatenate([np.full(b.width, b.indicator) for b in self.blocks]) if self.blocks else np.zeros(0, bool)

    def take(self, idx) -> "FeatureMatrix":
        idx = np.asarray(idx, dtype=int)
        return FeatureMatrix(self.rows[idx], self.blocks, self.groups.take(idx))

    def drop(self, names: Sequence[str]) -> "FeatureMatrix":
        names = set(names)
        offsets = self._offsets()
        keep = [b for b in self.blocks if b.name not in names]
        cols = [np.arange(offsets[b.name].start, offsets[b.name].stop) for b in keep]
        cols = np.concatenate(cols) if cols else np.zeros(0, dtype=int)
        return FeatureMatrix(self.rows[:, cols], tuple(keep), self.groups)

    def select(self, names: Sequence[str]) -> "FeatureMatrix":
        return self.drop([b.name for b in self.blocks if b.name not in set(names)])

    def strata(self, by: str | None) -> np.ndarray | None:
        if by is None:
            return None
        if by == "task":
            labels = self.groups.task_ids
        elif by == "model":
            labels = self.groups.model_ids
        else:
            raise ValueError(f"cannot stratify by {by!r}; use 'task' or 'model'")
        _, codes = np.unique(np.array(labels, dtype=object).astype(str), return_inverse=True)
        return codes


def one_hot(labels: Sequence[str], levels: Sequence[str]) -> np.ndarray:
    index = {lv: i for i, lv in enumerate(levels)}
    out = np.zeros((len(labels), len(levels)))
    for r, lab in enumerate(labels):
        out[r, index[lab]] = 1.0
    return out


def build_features(
    subgroups: Sequence[SubgroupData], blocks: Sequence[str] = DEFAULT_BLOCKS
) -> FeatureMatrix:
    """Per-subgroup features: mean embedding, mean confidence and one-hot model/task/unit indicators.

    Blocks appear in the fixed order embedding, confidence, model, task, unit,
    whatever order ``blocks`` lists them in. A block whose source field is
    missing from any record raises :class:`MissingFieldError`.
    """
    unknown = set(blocks) - set(KNOWN_BLOCKS)
    if unknown:
        raise ValueError(f"unknown feature blocks {sorted(unknown)}")
    groups = GroupTable.from_subgroups(subgroups)
    parts, schema = [], []
    if "embedding" in blocks:
        means = []
        for sg in subgroups:
            for rec in sg.records:
                if rec.embedding is None:
                    raise MissingFieldError("embedding", f"example {rec.example_id!r}")
            means.append(np.mean([rec.embedding for rec in sg.records], axis=0))
        dims = {m.shape[0] for m in means}
        if len(dims) > 1:
            raise SchemaError("subgroups disagree on embedding dimension")
        emb = np.vstack(means) if means else np.zeros((0, 0))
        parts.append(emb)
        schema.append(FeatureBlock("embedding", emb.shape[1], False))
    if "confidence" in blocks:
        conf = []
        for sg in subgroups:
            for rec in sg.records:
                if rec.confidence is None:
                    raise MissingFieldError("confidence", f"example {rec.example_id!r}")
            conf.append(np.mean([rec.confidence for rec in sg.records]))
        parts.append(np.array(conf, dtype=float).reshape(-1, 1))
        schema.append(FeatureBlock("confidence", 1, False))
    for name, labels in (("model", groups.model_ids), ("task", groups.task_ids)):
        if name in blocks:
            levels = tuple(sorted(set(labels)))
            parts.append(one_hot(labels, levels))
            schema.append(FeatureBlock(name, len(levels), True, levels))
    if "unit" in blocks:
        units = [f"{g}|{m}" for g, m in zip(groups.group_keys, groups.model_ids)]
        levels = tuple(units)
        parts.append(np.eye(len(units)))
        schema.append(FeatureBlock("unit", len(units), True, levels))
    rows = np.hstack(parts) if parts else np.zeros((len(subgroups), 0))
    return FeatureMatrix(rows, tuple(schema), groups)


# --------------------------------------------------------------------------
# Regressor specification and fitted model
# --------------------------------------------------------------------------


class Family(enum.Enum):
    RIDGE = "ridge"
    LASSO = "lasso"
    STUMPS = "stumps"

    @classmethod
    def parse(cls, value) -> "Family":
        if isinstance(value, Family):
            return value
        aliases = {"ridge": cls.RIDGE, "lasso": cls.LASSO, "weighted_lasso": cls.LASSO,
                   "weightedlasso": cls.LASSO, "stumps": cls.STUMPS, "boosted_stumps": cls.STUMPS,
                   "boostedstumps": cls.STUMPS}
        try:
            return aliases[str(value).lower()]
        except KeyError:
            raise ValueError(f"unknown regressor family {value!r}") from None


DEFAULT_GRIDS = {
    Family.RIDGE: tuple(float(x) for x in np.logspace(-3, 3, 13)),
    Family.STUMPS: (10, 25, 50, 100, 200),
}
LASSO_PATH_LENGTH = 20
LASSO_PATH_RATIO = 1e-4


@dataclass(frozen=True)
class RegressorSpec:
    """How to fit the prior-mean regressor.

    ``grid`` holds ridge/Lasso penalties or stump counts; ``None`` selects the
    family default (for Lasso a geometric path below the smallest penalty that
    zeroes every coefficient). A one-element grid skips cross-validation.
    """

    family: Family = Family.RIDGE
    grid: tuple | None = None
    cv_folds: int = 2
    stratify_by: str | None = "task"
    seed: int = 0
    standardize: bool = True
    fit_intercept: bool = True
    shrinkage: float = 0.1
    max_sweeps: int = 10_000
    tol: float = 1e-10

    def __post_init__(self):
        object.__setattr__(self, "family", Family.parse(self.family))
        if self.grid is not None:
            grid = tuple(self.grid)
            if not grid:
                raise ValueError("hyperparameter grid must be nonempty")
            object.__setattr__(self, "grid", grid)
        if self.cv_folds < 2:
            raise ValueError("cv_folds must be at least 2")

    def replace(self, **kw) -> "RegressorSpec":
        d = {f: getattr(self, f) for f in self.__dataclass_fields__}
        d.update(kw)
        return RegressorSpec(**d)


@dataclass(frozen=True)
class Stump:
    feature: int
    threshold: float
    left: float
    right: float

    def predict(self, X: np.ndarray) -> np.ndarray:
        return np.where(X[:, self.feature] <= self.threshold, self.left, self.right)


@dataclass
class RegressionModel:
    family: Family
    schema: tuple[FeatureBlock, ...]
    intercept: float = 0.0
    coef: np.ndarray | None = None
    stumps: list[Stump] = field(default_factory=list)
    hyperparameter: float | None = None
    cv_errors: dict = field(default_factory=dict)

    def dumps(self) -> str:
        return json.dumps(
            {
                "format": "ebbench-regression-model/1",
                "family": self.family.value,
                "schema": [b.to_dict() for b in self.schema],
                "intercept": self.intercept,
                "coef": None if self.coef is None else [float(c) for c in self.coef],
                "stumps": [[s.feature, s.threshold, s.left, s.right] for s in self.stumps],
                "hyperparameter": self.hyperparameter,
            },
            indent=1,
        )

    @classmethod
    def loads(cls, text: str) -> "RegressionModel":
        d = json.loads(text)
        if d.get("format") != "ebbench-regression-model/1":
            raise ValueError("not a serialized regression model")
        return cls(
            family=Family.parse(d["family"]),
            schema=tuple(FeatureBlock.from_dict(b) for b in d["schema"]),
            intercept=float(d["intercept"]),
            coef=None if d["coef"] is None else np.array(d["coef"], dtype=float),
            stumps=[Stump(int(f), float(t), float(lv), float(rv)) for f, t, lv, rv in d["stumps"]],
            hyperparameter=d["hyperparameter"],
        )


def predict(model: RegressionModel, features: FeatureMatrix | np.ndarray) -> np.ndarray:
    """Prior-mean predictions for each row of ``features``."""
    if isinstance(features, FeatureMatrix):
        if features.blocks != model.schema:
            raise SchemaError(
                f"feature schema {features.block_names} does not match the model's "
                f"{tuple(b.name for b in model.schema)}"
            )
        X = features.rows
    else:
        X = np.asarray(features, dtype=float)
        if X.ndim != 2 or X.shape[1] != sum(b.width for b in model.schema):
            raise SchemaError("feature array does not match the model schema")
    return _predict_raw(model, X)


def _predict_raw(model: RegressionModel, X: np.ndarray) -> np.ndarray:
    out = np.full(X.shape[0], model.intercept, dtype=float)
    if model.family is Family.STUMPS:
        for s in model.stumps:
            out += s.predict(X)
    elif model.coef is not None and model.coef.size:
        out += X @ model.coef
    return out


# --------------------------------------------------------------------------
# Solvers. All take normalized weights and return (intercept, coef) on the
# scale of the matrix they are given.
# --------------------------------------------------------------------------


def _center(X, y, w, fit_intercept):
    if not fit_intercept:
        return X, y, np.zeros(X.shape[1]), 0.0
    sw = w.sum()
    xm = (w @ X) / sw
    ym = float(w @ y) / sw
    return X - xm, y - ym, xm, ym


def ridge_path(X, y, w, lambdas, fit_intercept=True):
    """Solutions of min sum w (y - b0 - X b)^2 + lam |b|^2 for each lam."""
    Xc, yc, xm, ym = _center(X, y, w, fit_intercept)
    sq = np.sqrt(w)
    out = []
    if X.shape[1] == 0:
        return [(ym, np.zeros(0)) for _ in lambdas]
    U, s, Vt = np.linalg.svd(sq[:, None] * Xc, full_matrices=False)
    uy = U.T @ (sq * yc)
    cutoff = s.max() * max(X.shape) * np.finfo(float).eps if s.size else 0.0
    for lam in lambdas:
        if lam < 0:
            raise ValueError("ridge penalty must be nonnegative")
        with np.errstate(divide="ignore", invalid="ignore"):
            d = np.where(s > cutoff, s / (s * s + lam), 0.0)
        b = Vt.T @ (d * uy)
        out.append((ym - float(xm @ b), b))
    return out


def _gram(X, y, w, fit_intercept):
    Xc, yc, xm, ym = _center(X, y, w, fit_intercept)
    H = Xc.T @ (w[:, None] * Xc)
    q = Xc.T @ (w * yc)
    return H, q, xm, ym


def lasso_lambda_max(X, y, w, fit_intercept=True) -> float:
    """Smallest penalty at which every Lasso coefficient is zero."""
    _, q, _, _ = _gram(X, y, w, fit_intercept)
    return float(2.0 * np.abs(q).max()) if q.size else 0.0


def _cd_sweep(H, g, beta, lam_half, coords, diag):
    """One cyclic pass; updates beta and gradient g = q - H beta in place."""
    max_delta = 0.0
    for j in coords:
        hjj = diag[j]
        if hjj <= 0.0:
            continue
        old = beta[j]
        rho = g[j] + hjj * old
        if rho > lam_half:
            new = (rho - lam_half) / hjj
        elif rho < -lam_half:
            new = (rho + lam_half) / hjj
        else:
            new = 0.0
        delta = new - old
        if delta != 0.0:
            beta[j] = new
            g -= H[:, j] * delta
            if abs(delta) > max_delta:
                max_delta = abs(delta)
    return max_delta


def lasso_cd(H, q, lam, beta=None, max_sweeps=10_000, tol=1e-10):
    """Coordinate descent on b'Hb - 2q'b + lam |b|_1.

    Alternates full sweeps with sweeps over the active set; stops when a full
    sweep moves no coordinate by more than ``tol``. Returns (beta, sweeps).
    """
    p = q.size
    beta = np.zeros(p) if beta is None else np.array(beta, dtype=float)
    g = q - H @ beta
    diag = np.diag(H).copy()
    lam_half = 0.5 * lam
    everything = range(p)
    sweeps = 0
    while sweeps < max_sweeps:
        delta = _cd_sweep(H, g, beta, lam_half, everything, diag)
        sweeps += 1
        if delta < tol:
            break
        active = np.flatnonzero(beta).tolist()
        while sweeps < max_sweeps:
            delta = _cd_sweep(H, g, beta, lam_half, active, diag)
            sweeps += 1
            if delta < tol:
                break
    return beta, sweeps


def lasso_path(X, y, w, lambdas, fit_intercept=True, max_sweeps=10_000, tol=1e-10):
    """Warm-started Lasso solutions for ``lambdas`` (any order; solved largest first)."""
    H, q, xm, ym = _gram(X, y, w, fit_intercept)
    order = np.argsort(-np.asarray(lambdas, dtype=float), kind="stable")
    out = [None] * len(lambdas)
    beta = np.zeros(q.size)
    for i in order:
        beta, _ = lasso_cd(H, q, float(lambdas[i]), beta, max_sweeps, tol)
        out[i] = (ym - float(xm @ beta), beta.copy())
    return out


def lasso_objective(X, y, w, intercept, coef, lam) -> float:
    r = y - intercept - X @ coef
    return float(w @ (r * r) + lam * np.abs(coef).sum())


def _fit_stumps(X, y, w, n_trees, shrinkage):
    """Gradient boosting with depth-1 trees on weighted squared loss."""
    sw = w.sum()
    init = float(w @ y) / sw
    n, p = X.shape
    stumps: list[Stump] = []
    if p == 0 or n < 2:
        return init, stumps
    order = np.argsort(X, axis=0, kind="stable")
    Xs = np.take_along_axis(X, order, axis=0)
    valid = Xs[1:] > Xs[:-1]
    thresholds = 0.5 * (Xs[1:] + Xs[:-1])
    Ws = w[order]
    cw = np.cumsum(Ws, axis=0)[:-1]
    pred = np.full(n, init)
    for _ in range(n_trees):
        r = y - pred
        cs = np.cumsum((w * r)[order], axis=0)
        total = cs[-1]
        sl, wl = cs[:-1], cw
        sr, wr = total - sl, sw - wl
        with np.errstate(divide="ignore", invalid="ignore"):
            gain = np.where(valid, sl * sl / wl + sr * sr / np.maximum(wr, 1e-300), -np.inf)
        if not np.isfinite(gain).any():
            break
        i, j = np.unravel_index(np.argmax(gain), gain.shape)
        left = float(sl[i, j] / wl[i, j]) * shrinkage
        right = float(sr[i, j] / wr[i, j]) * shrinkage
        stump = Stump(int(j), float(thresholds[i, j]), left, right)
        stumps.append(stump)
        pred += stump.predict(X)
    return init, stumps


# --------------------------------------------------------------------------
# Cross-validated fitting
# --------------------------------------------------------------------------


def cv_folds(n: int, k: int, seed: int, strata=None) -> np.ndarray:
    """Fold index per row: seeded shuffle, then round-robin within each stratum."""
    if n < k:
        raise ValueError(f"cannot make {k} folds from {n} rows")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    folds = np.empty(n, dtype=int)
    if strata is None:
        folds[perm] = np.arange(n) % k
        return folds
    strata = np.asarray(strata)
    pos = 0
    for s in np.unique(strata):
        members = perm[strata[perm] == s]
        folds[members] = (pos + np.arange(members.size)) % k
        pos += members.size
    return folds


class _Scaler:
    def __init__(self, X, indicator, enabled):
        self.center = np.zeros(X.shape[1])
        self.scale = np.ones(X.shape[1])
        if enabled and X.shape[0] > 0:
            cont = ~indicator
            self.center[cont] = X[:, cont].mean(axis=0)
            sd = X[:, cont].std(axis=0)
            self.scale[cont] = np.where(sd > 0, sd, 1.0)

    def transform(self, X):
        return (X - self.center) / self.scale

    def unscale(self, intercept, coef):
        b = coef / self.scale
        return intercept - float(self.center @ b), b


def _solve_grid(family, X, y, w, grid, spec, indicator):
    """Fitted (intercept, coef | stumps) for every grid value on one training set."""
    if family is Family.STUMPS:
        init, stumps = _fit_stumps(X, y, w, int(max(grid)), spec.shrinkage)
        return [(init, stumps[: int(m)]) for m in grid]
    scaler = _Scaler(X, indicator, spec.standardize)
    Xs = scaler.transform(X)
    if family is Family.RIDGE:
        sols = ridge_path(Xs, y, w, grid, spec.fit_intercept)
    else:
        sols = lasso_path(Xs, y, w, grid, spec.fit_intercept, spec.max_sweeps, spec.tol)
    return [scaler.unscale(b0, b) for b0, b in sols]


def _predict_solution(family, sol, X):
    b0, rest = sol
    if family is Family.STUMPS:
        out = np.full(X.shape[0], b0)
        for s in rest:
            out += s.predict(X)
        return out
    return b0 + X @ rest if rest.size else np.full(X.shape[0], b0)


def _default_grid(family, X, y, w, spec, indicator):
    if spec.grid is not None:
        return tuple(spec.grid)
    if family is Family.LASSO:
        Xs = _Scaler(X, indicator, spec.standardize).transform(X)
        lmax = lasso_lambda_max(Xs, y, w, spec.fit_intercept)
        if lmax <= 0:
            return (0.0,)
        return tuple(float(v) for v in lmax * np.logspace(0, math.log10(LASSO_PATH_RATIO), LASSO_PATH_LENGTH))
    return DEFAULT_GRIDS[family]


def fit(features: FeatureMatrix, targets, weights=None, spec: RegressorSpec | None = None) -> RegressionModel:
    """Fit the prior-mean regressor, tuning its hyperparameter by cross-validation.

    Args:
        features: one row per subgroup.
        targets: values to regress (usually the direct estimates Z).
        weights: strictly positive row weights; all ones when omitted.
        spec: family, grid and CV settings.

    Returns:
        Model refit on all rows at the hyperparameter with the lowest
        cross-validated weighted squared error (first grid entry on ties).
    """
    spec = spec or RegressorSpec()
    X = features.rows
    y = np.asarray(targets, dtype=float)
    n = X.shape[0]
    if y.shape != (n,):
        raise ValueError(f"expected {n} targets, got shape {y.shape}")
    if not np.all(np.isfinite(y)):
        raise DomainError("regression targets must be finite")
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    if w.shape != (n,) or not np.all(w > 0) or not np.all(np.isfinite(w)):
        raise ValueError("weights must be finite and strictly positive, one per row")
    if n == 0:
        raise ValueError("cannot fit a regressor on zero rows")
    w = w / w.mean()
    indicator = features.indicator_mask()
    family = spec.family
    grid = _default_grid(family, X, y, w, spec, indicator)

    cv_err: dict = {}
    if len(grid) == 1:
        best = grid[0]
    else:
        if n < spec.cv_folds:
            raise ValueError(f"{n} rows cannot be split into {spec.cv_folds} folds")
        folds = cv_folds(n, spec.cv_folds, spec.seed, features.strata(spec.stratify_by))
        errs = np.zeros(len(grid))
        for k in range(spec.cv_folds):
            tr, te = folds != k, folds == k
            if not te.any() or not tr.any():
                continue
            sols = _solve_grid(family, X[tr], y[tr], w[tr], grid, spec, indicator)
            for i, sol in enumerate(sols):
                r = y[te] - _predict_solution(family, sol, X[te])
                errs[i] += float(w[te] @ (r * r))
        best = grid[int(np.argmin(errs))]
        cv_err = {float(g): float(e) for g, e in zip(grid, errs)}

    if family is Family.LASSO and spec.grid is None:
        # refit along the full path for warm starts down to the chosen penalty
        path = [g for g in grid if g >= best]
        sol = _solve_grid(family, X, y, w, path, spec, indicator)[-1]
    else:
        sol = _solve_grid(family, X, y, w, (best,), spec, indicator)[0]
    if family is Family.STUMPS:
        return RegressionModel(family, features.blocks, float(sol[0]), None, list(sol[1]), float(best), cv_err)
    return RegressionModel(family, features.blocks, float(sol[0]), np.asarray(sol[1]), [], float(best), cv_err)

"""Repeated-sampling evaluation of the subgroup estimators.

Two data sources feed the same trial loop:

* :class:`DatasetSource` resamples evaluation examples from a full dataset
  and scores estimates against the full-data subgroup means.
* :class:`SynthSource` draws subgroup means from ``N(f(X_g), A)`` and
  observations around them, either one Gaussian aggregate ``N(mu_g, s2_g)``
  per subgroup or ``Binomial(n_g, mu_g)`` counts.

Every trial gets its own random stream derived from ``(seed, trial index)``,
and results are reduced in trial order, so reports do not depend on the
number of worker processes.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .core import Dataset, EvalRecord, GroupTable, SubgroupData, partition_by_group
from .estimators import dt_intervals, eb_arrays, js_arrays, sr_predict, structreg_arrays
from .intervals import critical_value_table, normal_quantile
from .metrics import MetricKind, binary_variance, summarize_all, summary_arrays
from .regression import DEFAULT_BLOCKS, FeatureBlock, FeatureMatrix, RegressorSpec, build_features, one_hot

logger = logging.getLogger(__name__)

HARNESS_METHODS = ("dt", "sr", "eb", "js", "structreg", "oracle")
SIZE_BUCKET_EDGE = 15
MAX_FAILURE_RATE = 0.01


class BenchmarkError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# Sampling
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SamplingScheme:
    """Proportional(min_target, qualifier_size) or EqualSize(n_per_group, drop_factor)."""

    mode: str = "proportional"
    min_target: int = 10
    qualifier_size: int = 50
    n_per_group: int = 20
    drop_factor: float = 4.0

    def __post_init__(self):
        if self.mode not in ("proportional", "equal"):
            raise ValueError(f"sampling mode must be 'proportional' or 'equal', got {self.mode!r}")
        if self.min_target < 1 or self.n_per_group < 1:
            raise ValueError("sample sizes must be at least 1")
        if self.drop_factor < 1:
            raise ValueError("drop_factor must be at least 1")

    def sample_sizes(self, sizes) -> np.ndarray:
        """Per-group sample sizes; 0 marks a dropped group."""
        N = np.asarray(sizes, dtype=int)
        if N.size == 0:
            raise ValueError("cannot sample from an empty partition")
        if self.mode == "equal":
            keep = N >= self.drop_factor * self.n_per_group
            return np.where(keep, self.n_per_group, 0)
        qualified = N[N >= self.qualifier_size]
        if qualified.size == 0:
            raise ValueError(f"no group has at least {self.qualifier_size} observations")
        scale = self.min_target / qualified.min()
        n = np.floor(scale * N + 0.5).astype(int)
        return np.clip(n, 1, N)


def _group_examples(subgroups: Sequence[SubgroupData]) -> dict[str, list[str]]:
    out: dict[str, set] = {}
    for sg in subgroups:
        out.setdefault(sg.group_key, set()).update(r.example_id for r in sg.records)
    return {g: sorted(ids) for g, ids in sorted(out.items())}


def sample_subgroups(subgroups: Sequence[SubgroupData], scheme: SamplingScheme, rng) -> list[SubgroupData]:
    """Sample examples per group without replacement, shared across models.

    Group sizes count distinct example_ids, so every model is scored on the
    same sampled questions of a group.
    """
    examples = _group_examples(subgroups)
    keys = list(examples)
    sizes = scheme.sample_sizes([len(examples[g]) for g in keys])
    chosen: dict[str, set] = {}
    for g, m in zip(keys, sizes):
        if m > 0:
            ids = examples[g]
            pick = rng.choice(len(ids), size=int(m), replace=False)
            chosen[g] = {ids[i] for i in pick}
    out = []
    for sg in subgroups:
        if sg.group_key not in chosen:
            continue
        recs = tuple(r for r in sg.records if r.example_id in chosen[sg.group_key])
        if recs:
            out.append(SubgroupData(sg.group_key, recs, sg.model_id, sg.task_id))
    return out


def sample_eval(dataset: Dataset, scheme: SamplingScheme, seed: int = 0, assignment=None) -> Dataset:
    """Evaluation sample drawn from ``dataset`` under ``scheme``."""
    parts = partition_by_group(dataset, assignment)
    if not parts:
        raise ValueError("cannot sample from an empty partition")
    sampled = sample_subgroups(parts, scheme, np.random.default_rng(seed))
    records = tuple(r for sg in sampled for r in sg.records)
    if assignment is not None:
        records = tuple(_with_group(r, assignment[r.example_id]) for r in records)
    return Dataset(records, dataset.metric_kind, dataset.embedding_dim)


def _with_group(rec: EvalRecord, group: str) -> EvalRecord:
    return EvalRecord(rec.example_id, rec.model_id, rec.task_id, rec.score, group, rec.confidence, rec.embedding)


# --------------------------------------------------------------------------
# Synthetic data
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class PriorMean:
    """f(X_g) = intercept + emb . embedding_coef + confidence_coef * conf + model/task effects."""

    intercept: float = 0.5
    embedding_coef: tuple[float, ...] = ()
    confidence_coef: float = 0.0
    model_effects: tuple[float, ...] = ()
    task_effects: tuple[float, ...] = ()

    @property
    def kind(self) -> str:
        if self.model_effects or self.task_effects:
            return "lookup"
        if any(self.embedding_coef) or self.confidence_coef:
            return "linear"
        return "constant"


@dataclass(frozen=True)
class SynthSpec:
    """Generative model for synthetic subgroups.

    Subgroups are (topic, model) pairs: ``groups_per_model`` topics, each
    evaluated on ``n_models`` models. Topic j has task ``j % n_tasks`` and a
    standard normal embedding shared by all models; each unit has a
    Uniform(0.2, 0.9) confidence.
    """

    n_models: int = 1
    groups_per_model: int = 200
    n_tasks: int = 1
    embedding_dim: int = 5
    prior_mean: PriorMean = PriorMean()
    A: float = 0.01
    outcome: str = "gaussian"
    sigma2: tuple[float, ...] | None = None
    sigma2_range: tuple[float, float] = (0.005, 0.05)
    n_per_group: int | tuple[int, ...] = 20
    seed: int = 0

    def __post_init__(self):
        if self.outcome not in ("gaussian", "binomial"):
            raise ValueError("outcome must be 'gaussian' or 'binomial'")
        if self.A < 0:
            raise ValueError("A must be nonnegative")
        if self.n_models < 1 or self.groups_per_model < 1 or self.n_tasks < 1:
            raise ValueError("counts must be positive")
        if self.sigma2 is not None:
            if len(self.sigma2) != self.G or min(self.sigma2) <= 0:
                raise ValueError("sigma2 needs one positive value per subgroup")
        elif not 0 < self.sigma2_range[0] <= self.sigma2_range[1]:
            raise ValueError("sigma2_range must be positive and ordered")

    @property
    def G(self) -> int:
        return self.n_models * self.groups_per_model

    @property
    def metric_kind(self) -> MetricKind:
        return MetricKind.BINARY if self.outcome == "binomial" else MetricKind.UNBOUNDED


@dataclass
class TrialData:
    Z: np.ndarray
    s2: np.ndarray
    n: np.ndarray
    truth: np.ndarray
    features: FeatureMatrix
    kind: MetricKind
    k: np.ndarray | None = None
    index: np.ndarray | None = None
    f_true: np.ndarray | None = None
    s2_true: np.ndarray | None = None
    A_true: float | None = None


class SynthSource:
    """Fixed design (features, prior means, noise levels) plus per-trial draws."""

    def __init__(self, spec: SynthSpec):
        self.spec = spec
        self.kind = spec.metric_kind
        rng = np.random.default_rng(np.random.SeedSequence(spec.seed, spawn_key=(0xD351,)))
        T, M = spec.groups_per_model, spec.n_models
        emb = rng.normal(size=(T, spec.embedding_dim))
        conf = rng.uniform(0.2, 0.9, size=(T, M))
        keys, models, tasks, topic_idx, model_idx = [], [], [], [], []
        for j in range(T):
            for m in range(M):
                keys.append(f"topic{j:04d}")
                models.append(f"model{m:02d}")
                tasks.append(f"task{j % spec.n_tasks:02d}")
                topic_idx.append(j)
                model_idx.append(m)
        topic_idx, model_idx = np.array(topic_idx), np.array(model_idx)
        self.groups = GroupTable(keys, models, tasks)
        self.embedding = emb[topic_idx]
        self.confidence = conf[topic_idx, model_idx]
        self.task_idx = topic_idx % spec.n_tasks
        self.model_idx = model_idx
        pm = spec.prior_mean
        f = np.full(spec.G, pm.intercept, dtype=float)
        if pm.embedding_coef:
            coef = np.asarray(pm.embedding_coef, dtype=float)
            if coef.size != spec.embedding_dim:
                raise ValueError("embedding_coef length must equal embedding_dim")
            f += self.embedding @ coef
        f += pm.confidence_coef * self.confidence
        if pm.model_effects:
            if len(pm.model_effects) != M:
                raise ValueError("need one model effect per model")
            f += np.asarray(pm.model_effects)[model_idx]
        if pm.task_effects:
            if len(pm.task_effects) != spec.n_tasks:
                raise ValueError("need one task effect per task")
            f += np.asarray(pm.task_effects)[self.task_idx]
        self.f = f
        if spec.outcome == "gaussian":
            self.sigma2 = (np.asarray(spec.sigma2, dtype=float) if spec.sigma2 is not None
                           else np.linspace(*spec.sigma2_range, spec.G))
            self.n = np.ones(spec.G, dtype=int)
        else:
            npg = spec.n_per_group
            self.n = np.full(spec.G, npg, dtype=int) if np.isscalar(npg) else np.asarray(npg, dtype=int)
            if self.n.shape != (spec.G,) or self.n.min() < 1:
                raise ValueError("n_per_group must be a positive int or one per subgroup")
            self.sigma2 = None
        self.features = self._features()

    def _features(self) -> FeatureMatrix:
        g = self.groups
        mlev = tuple(sorted(set(g.model_ids)))
        tlev = tuple(sorted(set(g.task_ids)))
        rows = np.hstack([self.embedding, self.confidence[:, None], one_hot(g.model_ids, mlev), one_hot(g.task_ids, tlev)])
        blocks = (
            FeatureBlock("embedding", self.embedding.shape[1], False),
            FeatureBlock("confidence", 1, False),
            FeatureBlock("model", len(mlev), True, mlev),
            FeatureBlock("task", len(tlev), True, tlev),
        )
        return FeatureMatrix(rows, blocks, g)

    def draw_mu(self, rng) -> np.ndarray:
        return self.f + math.sqrt(self.spec.A) * rng.standard_normal(self.spec.G)

    def draw(self, rng) -> TrialData:
        mu = self.draw_mu(rng)
        if self.spec.outcome == "gaussian":
            Z = mu + np.sqrt(self.sigma2) * rng.standard_normal(self.spec.G)
            return TrialData(Z, self.sigma2.copy(), self.n, mu, self.features, self.kind,
                             f_true=self.f, s2_true=self.sigma2, A_true=self.spec.A)
        p = np.clip(mu, 0.0, 1.0)
        k = rng.binomial(self.n, p)
        Z = k / self.n
        return TrialData(Z, binary_variance(k, self.n), self.n, p, self.features, self.kind, k=k,
                         f_true=self.f, s2_true=p * (1 - p) / self.n, A_true=self.spec.A)


def synth_generate(spec: SynthSpec):
    """Draw one synthetic dataset; returns (Dataset, {(group_key, model_id): mu_g}).

    Gaussian outcomes give one aggregate record per subgroup whose score is
    Z_g. Binomial outcomes give n_g per-example 0/1 records. Subgroup means
    that fall outside [0, 1] under the binomial model are clamped and logged.
    """
    src = SynthSource(spec)
    rng = np.random.default_rng(np.random.SeedSequence(spec.seed, spawn_key=(0xDA7A,)))
    mu = src.draw_mu(rng)
    g = src.groups
    records = []
    if spec.outcome == "gaussian":
        Z = mu + np.sqrt(src.sigma2) * rng.standard_normal(spec.G)
        for i in range(spec.G):
            records.append(EvalRecord(f"{g.group_keys[i]}:0", g.model_ids[i], g.task_ids[i], float(Z[i]),
                                      g.group_keys[i], float(src.confidence[i]), tuple(src.embedding[i])))
        truth = mu
    else:
        clipped = int(((mu < 0) | (mu > 1)).sum())
        if clipped:
            logger.warning("%d subgroup means fell outside [0, 1] and were clamped", clipped)
        truth = np.clip(mu, 0.0, 1.0)
        for i in range(spec.G):
            outcomes = rng.random(src.n[i]) < truth[i]
            for e, y in enumerate(outcomes):
                records.append(EvalRecord(f"{g.group_keys[i]}:{e}", g.model_ids[i], g.task_ids[i], float(y),
                                          g.group_keys[i], float(src.confidence[i]), tuple(src.embedding[i])))
    ds = Dataset(tuple(records), spec.metric_kind, spec.embedding_dim)
    return ds, {(gk, m): float(t) for gk, m, t in zip(g.group_keys, g.model_ids, truth)}


class DatasetSource:
    """Resample a real dataset; ground truth is each unit's full-data mean."""

    def __init__(self, dataset: Dataset, scheme: SamplingScheme, blocks: Sequence[str] = DEFAULT_BLOCKS,
                 assignment=None):
        self.kind = dataset.metric_kind
        self.scheme = scheme
        self.blocks = tuple(blocks)
        self.parts = partition_by_group(dataset, assignment)
        if not self.parts:
            raise ValueError("dataset has no records")
        sizes = scheme.sample_sizes([len(v) for v in _group_examples(self.parts).values()])
        kept = {g for g, m in zip(_group_examples(self.parts), sizes) if m > 0}
        self.units = [sg for sg in self.parts if sg.group_key in kept]
        self.unit_index = {sg.key: i for i, sg in enumerate(self.units)}
        self.groups = GroupTable.from_subgroups(self.units)
        self.truth = np.array([sg.scores().mean() for sg in self.units])
        self.full_size = np.array([sg.n for sg in self.units])

    def draw(self, rng) -> TrialData:
        sampled = sample_subgroups(self.parts, self.scheme, rng)
        sampled = [sg for sg in sampled if sg.key in self.unit_index]
        summaries = summarize_all(sampled, self.kind)
        Z, s2, n = summary_arrays(summaries)
        k = np.array([s.success_count for s in summaries]) if self.kind is MetricKind.BINARY else None
        index = np.array([self.unit_index[sg.key] for sg in sampled])
        return TrialData(Z, s2, n, self.truth[index], build_features(sampled, self.blocks), self.kind, k, index)


# --------------------------------------------------------------------------
# Trials
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class BenchmarkConfig:
    methods: tuple[str, ...] = ("dt", "sr", "eb")
    regressor: RegressorSpec = RegressorSpec()
    alpha: float = 0.05
    pool_scope: str = "all"
    use_kappa: bool = False
    feature_sets: tuple[tuple[str, ...] | None, ...] = (None,)

    def __post_init__(self):
        unknown = set(self.methods) - set(HARNESS_METHODS)
        if unknown:
            raise ValueError(f"unknown methods {sorted(unknown)}")
        if not self.methods:
            raise ValueError("at least one method is required")


def trial_streams(seed: int, trial: int):
    """(data rng, integer fit seed) for one trial, independent of execution order."""
    data = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(trial, 0)))
    fit_seed = int(np.random.SeedSequence(seed, spawn_key=(trial, 1)).generate_state(1)[0])
    return data, fit_seed


def _methods_for(td: TrialData, features: FeatureMatrix, cfg: BenchmarkConfig, fit_seed: int, methods):
    bounds = td.kind.bounds
    nan = np.full(td.Z.size, np.nan)
    out = {}
    spec = cfg.regressor.replace(seed=fit_seed)
    table = critical_value_table(cfg.alpha)
    for m in methods:
        if m == "dt":
            if td.s2_true is not None and td.k is None:
                half = normal_quantile(1 - cfg.alpha / 2) * np.sqrt(td.s2_true)
                lo, hi = td.Z - half, td.Z + half
            else:
                lo, hi = dt_intervals(td.kind, td.Z, td.s2, td.n, td.k, cfg.alpha)
            out[m] = (td.Z, lo, hi)
        elif m == "sr":
            f = sr_predict(td.Z, features, spec)
            out[m] = (f if bounds is None else np.clip(f, *bounds), nan, nan)
        elif m == "eb":
            r = eb_arrays(td.Z, td.s2, features, spec, fit_seed, cfg.pool_scope, cfg.alpha, cfg.use_kappa, table, bounds)
            lo, hi = r.estimate - r.half_width, r.estimate + r.half_width
            if bounds is not None:
                lo, hi = np.clip(lo, *bounds), np.clip(hi, *bounds)
            out[m] = (r.estimate, lo, hi)
        elif m == "js":
            r = js_arrays(td.Z, td.s2, cfg.alpha, cfg.use_kappa, table, bounds)
            lo, hi = r.estimate - r.half_width, r.estimate + r.half_width
            if bounds is not None:
                lo, hi = np.clip(lo, *bounds), np.clip(hi, *bounds)
            out[m] = (r.estimate, lo, hi)
        elif m == "structreg":
            out[m] = (structreg_arrays(td.Z, td.s2, features, seed=fit_seed, bounds=bounds), nan, nan)
        elif m == "oracle":
            if td.f_true is None:
                raise BenchmarkError("the oracle combiner needs synthetic ground-truth parameters")
            s2 = td.s2_true if td.k is None else td.s2
            w = td.A_true / (s2 + td.A_true)
            est = td.f_true + w * (td.Z - td.f_true)
            half = normal_quantile(1 - cfg.alpha / 2) * np.sqrt(w * s2)
            out[m] = (est if bounds is None else np.clip(est, *bounds), est - half, est + half)
    return out


def run_trial(source, cfg: BenchmarkConfig, seed: int, trial: int):
    """One trial: a draw plus every method on every feature set.

    Returns ``(index, truth, n, {feature_set_pos: {method: (est, lo, hi)}})``;
    methods that ignore features are computed once and shared.
    """
    rng, fit_seed = trial_streams(seed, trial)
    td = source.draw(rng)
    results = {}
    shared = None
    for pos, fs in enumerate(cfg.feature_sets):
        features = td.features if fs is None else td.features.select(fs)
        methods = [m for m in cfg.methods if m in ("sr", "eb", "structreg")]
        res = _methods_for(td, features, cfg, fit_seed, methods)
        if shared is None:
            shared = _methods_for(td, features, cfg, fit_seed, [m for m in cfg.methods if m not in res])
        res.update(shared)
        results[pos] = res
    return td.index, td.truth, td.n, results


_WORKER_STATE: dict = {}


def _init_worker(source, cfg, seed):
    _WORKER_STATE.update(source=source, cfg=cfg, seed=seed)


def _safe_trial(source, cfg, seed, trial):
    try:
        return run_trial(source, cfg, seed, trial)
    except Exception as exc:  # failure policy: log, exclude, threshold
        logger.warning("trial %d failed: %s: %s", trial, type(exc).__name__, exc)
        return None


def _worker_trial(trial):
    s = _WORKER_STATE
    return _safe_trial(s["source"], s["cfg"], s["seed"], trial)


def _execute(source, cfg, T, seed, workers):
    if workers <= 1:
        return [_safe_trial(source, cfg, seed, t) for t in range(T)]
    with ProcessPoolExecutor(max_workers=workers, initializer=_init_worker, initargs=(source, cfg, seed)) as pool:
        return list(pool.map(_worker_trial, range(T), chunksize=max(1, T // (4 * workers))))


# --------------------------------------------------------------------------
# Reports
# --------------------------------------------------------------------------


@dataclass
class TrialReport:
    """Monte-Carlo summary per (method, subgroup) and per method.

    Errors are ``estimate - truth``; with ``bias`` their mean and ``variance``
    their (1/T) spread, ``mse = bias^2 + variance`` holds exactly per group.
    """

    methods: list[str]
    groups: GroupTable
    T: int
    failures: int
    per_group: dict = field(default_factory=dict)
    per_method: dict = field(default_factory=dict)
    trial_avg_sq_err: dict = field(default_factory=dict)
    mean_n: np.ndarray | None = None

    def avg_mse(self, method: str) -> float:
        return self.per_method[method]["avg_mse"]

    def paired_difference(self, a: str, b: str) -> tuple[float, float]:
        """Mean and standard error over trials of avg-MSE(a) - avg-MSE(b)."""
        d = self.trial_avg_sq_err[a] - self.trial_avg_sq_err[b]
        return float(d.mean()), float(d.std(ddof=1) / math.sqrt(d.size)) if d.size > 1 else float("nan")

    def ratio_se(self, a: str, b: str) -> tuple[float, float]:
        """avg-MSE(a)/avg-MSE(b) and its delta-method standard error."""
        x, y = self.trial_avg_sq_err[a], self.trial_avg_sq_err[b]
        r = x.mean() / y.mean()
        resid = (x - r * y) / y.mean()
        return float(r), float(resid.std(ddof=1) / math.sqrt(x.size))

    def groups_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["method", "group_key", "model_id", "task_id", "mean_n", "trials", "mse", "mse_se",
                    "bias2", "variance", "coverage", "mean_width"])
        for m in self.methods:
            pg = self.per_group[m]
            for i in range(len(self.groups)):
                w.writerow([m, self.groups.group_keys[i], self.groups.model_ids[i], self.groups.task_ids[i],
                            _num(self.mean_n[i]), int(pg["trials"][i]), _num(pg["mse"][i]), _num(pg["mse_se"][i]),
                            _num(pg["bias2"][i]), _num(pg["variance"][i]), _num(pg["coverage"][i]),
                            _num(pg["width"][i])])
        return buf.getvalue()

    def methods_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["method", "trials", "failures", "avg_mse", "avg_mse_se", "rel_eff_vs_dt", "avg_coverage",
                    "avg_width"])
        for m in self.methods:
            pm = self.per_method[m]
            w.writerow([m, self.T, self.failures, _num(pm["avg_mse"]), _num(pm["avg_mse_se"]),
                        _num(pm["rel_eff"]), _num(pm["coverage"]), _num(pm["width"])])
        return buf.getvalue()

    def plot_csv(self) -> str:
        """MSE ratio to DT by subgroup-size bucket (small: mean n <= 15)."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["method", "size_bucket", "groups", "mse_ratio"])
        buckets = {f"<={SIZE_BUCKET_EDGE}": self.mean_n <= SIZE_BUCKET_EDGE,
                   f">{SIZE_BUCKET_EDGE}": self.mean_n > SIZE_BUCKET_EDGE}
        for m in self.methods:
            for name, mask in buckets.items():
                if not mask.any():
                    continue
                if "dt" in self.per_group:
                    ratio = np.nanmean(self.per_group[m]["mse"][mask]) / np.nanmean(self.per_group["dt"]["mse"][mask])
                else:
                    ratio = float("nan")
                w.writerow([m, name, int(mask.sum()), _num(ratio)])
        return buf.getvalue()


def _num(x) -> str:
    x = float(x)
    return "" if math.isnan(x) else repr(x)


def _aggregate(outcomes, groups: GroupTable, methods, pos, T, failures) -> TrialReport:
    G = len(groups)
    ok = [o for o in outcomes if o is not None]
    est = {m: np.full((len(ok), G), np.nan) for m in methods}
    lo = {m: np.full((len(ok), G), np.nan) for m in methods}
    hi = {m: np.full((len(ok), G), np.nan) for m in methods}
    truth = np.full((len(ok), G), np.nan)
    nmat = np.full((len(ok), G), np.nan)
    for t, (index, tr, n, res) in enumerate(ok):
        idx = np.arange(G) if index is None else index
        truth[t, idx] = tr
        nmat[t, idx] = n
        for m in methods:
            e, l, h = res[pos][m]
            est[m][t, idx] = e
            lo[m][t, idx] = l
            hi[m][t, idx] = h
    report = TrialReport(list(methods), groups, len(ok), failures)
    with np.errstate(invalid="ignore", divide="ignore"):
        report.mean_n = np.nanmean(nmat, axis=0)
        present = ~np.isnan(truth)
        trials = present.sum(0)
        for m in methods:
            err = est[m] - truth
            sq = err * err
            mse = np.nanmean(sq, axis=0)
            bias = np.nanmean(err, axis=0)
            var = np.nanmean((err - bias) ** 2, axis=0)
            mse_se = np.nanstd(sq, axis=0, ddof=1) / np.sqrt(trials)
            has_ci = ~np.isnan(lo[m])
            covered = np.where(has_ci, (lo[m] <= truth) & (truth <= hi[m]), np.nan)
            width = np.where(has_ci, hi[m] - lo[m], np.nan)
            cov_g = np.nanmean(covered, axis=0) if has_ci.any() else np.full(G, np.nan)
            wid_g = np.nanmean(width, axis=0) if has_ci.any() else np.full(G, np.nan)
            report.per_group[m] = {"mse": mse, "mse_se": mse_se, "bias2": bias * bias, "variance": var,
                                   "coverage": cov_g, "width": wid_g, "trials": trials}
            trial_avg = np.nanmean(sq, axis=1)
            report.trial_avg_sq_err[m] = trial_avg
            report.per_method[m] = {
                "avg_mse": float(np.nanmean(mse)),
                "avg_mse_se": float(trial_avg.std(ddof=1) / math.sqrt(trial_avg.size)) if trial_avg.size > 1 else float("nan"),
                "coverage": float(np.nanmean(covered)) if has_ci.any() else float("nan"),
                "width": float(np.nanmean(width)) if has_ci.any() else float("nan"),
            }
        dt = report.per_method.get("dt", {}).get("avg_mse")
        for m in methods:
            report.per_method[m]["rel_eff"] = report.per_method[m]["avg_mse"] / dt if dt else float("nan")
    return report


def _check_failures(outcomes, T):
    failures = sum(o is None for o in outcomes)
    if failures > MAX_FAILURE_RATE * T:
        raise BenchmarkError(f"{failures} of {T} trials failed (limit {MAX_FAILURE_RATE:.0%})")
    return failures


def run_benchmark(source, methods: Sequence[str] | None = None, T: int = 1000, seed: int = 0,
                  workers: int = 1, config: BenchmarkConfig | None = None) -> TrialReport:
    """Repeat draw-and-estimate ``T`` times and summarize errors against ground truth.

    ``source`` is a :class:`SynthSource`, :class:`DatasetSource`, or a
    :class:`SynthSpec` (wrapped automatically). ``methods`` overrides the
    method list of ``config``.
    """
    if T < 1:
        raise ValueError("T must be at least 1")
    if isinstance(source, SynthSpec):
        source = SynthSource(source)
    cfg = config or BenchmarkConfig()
    cfg = dataclasses.replace(cfg, methods=tuple(methods) if methods is not None else cfg.methods,
                              feature_sets=(None,))
    outcomes = _execute(source, cfg, T, seed, workers)
    failures = _check_failures(outcomes, T)
    return _aggregate(outcomes, source.groups, cfg.methods, 0, T, failures)


@dataclass
class LocoResult:
    block: str
    method: str
    delta_mse: float
    se: float
    intercept_only: bool


def loco_importance(source, blocks: Sequence[str] | None = None, methods: Sequence[str] = ("sr", "eb"),
                    T: int = 100, seed: int = 0, workers: int = 1,
                    config: BenchmarkConfig | None = None) -> list[LocoResult]:
    """Increase in average MSE when each feature block is left out and the model refit.

    All feature sets are evaluated on the same draws. Results are ordered by
    block name, so the order of ``blocks`` does not matter.
    """
    if isinstance(source, SynthSpec):
        source = SynthSource(source)
    methods = tuple(m for m in methods if m in ("sr", "eb", "structreg"))
    if not methods:
        raise ValueError("LOCO needs at least one feature-using method (sr, eb, structreg)")
    base = config or BenchmarkConfig(methods=methods)
    probe = source.features if isinstance(source, SynthSource) else None
    if blocks is None:
        blocks = probe.block_names if probe is not None else tuple(source.blocks)
    blocks = tuple(sorted(set(blocks)))
    sets = (blocks,) + tuple(tuple(b for b in blocks if b != drop) for drop in blocks)
    cfg = dataclasses.replace(base, methods=methods, feature_sets=sets)
    outcomes = _execute(source, cfg, T, seed, workers)
    failures = _check_failures(outcomes, T)
    full = _aggregate(outcomes, source.groups, methods, 0, T, failures)
    out = []
    for pos, drop in enumerate(blocks, start=1):
        reduced = _aggregate(outcomes, source.groups, methods, pos, T, failures)
        for m in methods:
            d = reduced.trial_avg_sq_err[m] - full.trial_avg_sq_err[m]
            se = float(d.std(ddof=1) / math.sqrt(d.size)) if d.size > 1 else float("nan")
            out.append(LocoResult(drop, m, reduced.avg_mse(m) - full.avg_mse(m), se, len(sets[pos]) == 0))
    return out


def loco_csv(results: Sequence[LocoResult]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["block", "method", "delta_mse", "delta_mse_se", "intercept_only"])
    for r in results:
        w.writerow([r.block, r.method, _num(r.delta_mse), _num(r.se), int(r.intercept_only)])
    return buf.getvalue()

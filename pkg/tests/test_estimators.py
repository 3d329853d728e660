import numpy as np
import pytest

from ebbench.core import Dataset, partition_by_group
from ebbench.estimators import (
    CSV_COLUMNS,
    TooFewGroupsError,
    cross_fit_prior,
    direct,
    direct_table,
    eb_arrays,
    eb_combine,
    eb_cross_fit,
    estimate_A,
    estimates_csv,
    james_stein,
    js_arrays,
    shrinkage_weight,
    structreg_arrays,
    structured_regression,
    synthetic_regression,
)
from ebbench.intervals import critical_value_table
from ebbench.metrics import MetricKind, summarize_all
from ebbench.regression import Family, RegressorSpec, build_features

from conftest import make_records, raw_features


def binary_inputs(n_groups=8, models=("m0", "m1"), seed=0):
    rng = np.random.default_rng(seed)
    recs = []
    for m in models:
        for g in range(n_groups):
            scores = rng.binomial(1, 0.3 + 0.05 * g, size=12)
            recs += make_records({f"g{g}": scores}, model=m, task=f"t{g % 2}", emb_dim=3, seed=g)
    parts = partition_by_group(Dataset(tuple(recs), MetricKind.BINARY, 3))
    return summarize_all(parts, MetricKind.BINARY), build_features(parts)


class TestBasics:
    @pytest.mark.parametrize("z", [0.75, 0.0, 1.0])
    def test_direct_identity(self, z):
        summaries, _ = binary_inputs(4)
        s = summaries[0]
        assert direct(s) == s.Z
        assert direct(type(s)(**{**s.__dict__, "Z": z})) == z

    def test_estimate_A_hand(self):
        assert estimate_A([0.2, 0.0], [0.01, 0.01]) == pytest.approx(0.01)
        assert estimate_A([0.0, 0.0], [0.05, 0.05]) == 0.0
        assert estimate_A([0.01, -0.02], [0.01, 0.01]) == 0.0
        with pytest.raises(ValueError):
            estimate_A([], [])

    def test_eb_combine_hand(self):
        assert eb_combine(0.9, 0.5, 0.03, 0.01) == pytest.approx(0.6)

    def test_eb_boundaries(self):
        assert eb_combine(0.9, 0.5, 0.03, 0.0) == 0.5
        assert eb_combine(0.9, 0.5, 1e-14, 0.01) == pytest.approx(0.9, abs=1e-10)
        with pytest.raises(ValueError):
            eb_combine(0.9, 0.5, 0.0, 0.0)

    def test_weight(self):
        assert shrinkage_weight(0.03, 0.01) == pytest.approx(0.25)
        assert shrinkage_weight(0.03, 0.0) == 0.0


class TestJamesStein:
    def test_zero_A(self):
        res = js_arrays(np.array([0.0, 1.0]), np.array([0.25, 0.25]), min_groups=2)
        np.testing.assert_allclose(res.estimate, [0.5, 0.5])
        assert res.A_hat[0] == 0.0

    def test_positive_A(self):
        res = js_arrays(np.array([0.0, 1.0]), np.array([0.01, 0.01]), min_groups=2)
        assert res.A_hat[0] == pytest.approx(0.24)
        np.testing.assert_allclose(res.weight, 0.96)
        np.testing.assert_allclose(res.estimate, [0.02, 0.98])

    def test_equal_Z(self):
        res = js_arrays(np.full(5, 0.4), np.full(5, 0.02))
        np.testing.assert_allclose(res.estimate, 0.4)

    def test_too_few(self):
        with pytest.raises(TooFewGroupsError):
            js_arrays(np.array([0.0, 1.0, 0.5]), np.full(3, 0.01))

    def test_table_in_unit_interval(self):
        summaries, _ = binary_inputs()
        t = james_stein(summaries)
        assert np.all((t.estimate >= 0) & (t.estimate <= 1))
        assert np.all(t.ci_lo <= t.estimate) and np.all(t.estimate <= t.ci_hi)


class TestEB:
    def test_constant_inputs(self):
        fm = raw_features(np.random.default_rng(0).normal(size=(8, 2)))
        res = eb_arrays(np.full(8, 0.7), np.full(8, 0.01), fm, RegressorSpec(grid=(1.0,)), seed=1)
        np.testing.assert_allclose(res.estimate, 0.7)

    def test_cross_fitting_excludes_own_fold(self, rng):
        X = rng.normal(size=(4, 2))
        Z = rng.normal(size=4)
        fm = raw_features(X, models=["a", "b", "a", "b"])
        spec = RegressorSpec(grid=(0.5,))
        f_hat, folds = cross_fit_prior(Z, fm, spec, seed=3)
        for k in (0, 1):
            train = folds != k
            from ebbench.regression import fit, predict
            m = fit(fm.take(np.flatnonzero(train)), Z[train], None, spec)
            np.testing.assert_allclose(f_hat[~train], predict(m, fm.take(np.flatnonzero(~train))))
        # folds are stratified by model
        for m in ("a", "b"):
            sel = np.array(fm.groups.model_ids) == m
            assert sorted(folds[sel]) == [0, 1]

    def test_residual_consistency_and_weights(self):
        summaries, fm = binary_inputs()
        table, fits = eb_cross_fit(summaries, fm, RegressorSpec(), seed=5)
        assert len(fits) == 2
        for f in fits:
            np.testing.assert_allclose(f.residuals, table.Z[f.group_index] - f.prior_means)
            assert np.all((f.weights >= 0) & (f.weights <= 1))
            assert (f.A_hat == 0) == np.all(f.weights == 0)
        assert np.all((table.estimate >= 0) & (table.estimate <= 1))

    def test_per_model_scope(self):
        summaries, fm = binary_inputs()
        _, fits = eb_cross_fit(summaries, fm, RegressorSpec(), seed=5, pool_scope="per-model")
        assert sorted({f.scope for f in fits}) == ["m0", "m1"]
        assert len(fits) == 4
        with pytest.raises(ValueError):
            eb_cross_fit(summaries, fm, RegressorSpec(), seed=5, pool_scope="bogus")

    def test_too_few_groups(self):
        fm = raw_features(np.eye(3))
        with pytest.raises(TooFewGroupsError):
            eb_arrays(np.zeros(3), np.full(3, 0.01), fm, RegressorSpec(), seed=0)

    def test_deterministic(self):
        summaries, fm = binary_inputs()
        a = eb_cross_fit(summaries, fm, RegressorSpec(Family.LASSO), seed=9)[0]
        b = eb_cross_fit(summaries, fm, RegressorSpec(Family.LASSO), seed=9)[0]
        np.testing.assert_array_equal(a.estimate, b.estimate)

    def test_beats_direct_under_model(self):
        rng = np.random.default_rng(2)
        G = 200
        X = rng.normal(size=(G, 3))
        f = 0.5 + X @ np.array([0.05, -0.03, 0.0])
        s2 = np.linspace(0.005, 0.05, G)
        fm = raw_features(X)
        mse_dt, mse_eb = [], []
        for t in range(40):
            mu = f + rng.normal(0, 0.1, G)
            Z = mu + rng.normal(size=G) * np.sqrt(s2)
            res = eb_arrays(Z, s2, fm, RegressorSpec(), seed=t, table=critical_value_table(0.05))
            mse_dt.append(np.mean((Z - mu) ** 2))
            mse_eb.append(np.mean((res.estimate - mu) ** 2))
        assert np.mean(mse_eb) < np.mean(mse_dt)


class TestTables:
    def test_direct_table_wilson(self):
        summaries, _ = binary_inputs(4)
        t = direct_table(summaries)
        np.testing.assert_array_equal(t.estimate, t.Z)
        assert t.method == "DT"

    def test_csv_layout(self):
        summaries, fm = binary_inputs(4)
        text = estimates_csv([direct_table(summaries), synthetic_regression(summaries, fm)])
        lines = text.strip().split("\n")
        assert lines[0] == ",".join(CSV_COLUMNS)
        assert len(lines) == 1 + 2 * len(summaries)
        # NaN intervals for SR are written as empty strings
        assert lines[-1].split(",")[CSV_COLUMNS.index("ci_lo")] == ""

    def test_groups_sorted(self):
        summaries, _ = binary_inputs(10)
        keys = [(s.group_key, s.model_id) for s in summaries]
        assert keys == sorted(keys)


class TestStructuredRegression:
    def test_interpolates_at_tiny_penalty(self, rng):
        G = 12
        fm = raw_features(rng.normal(size=(G, 3)))
        Z = rng.uniform(size=G)
        est = structreg_arrays(Z, np.full(G, 0.01), fm, grid=(1e-8,))
        assert np.abs(est - Z).max() < 1e-4

    def test_large_penalty_is_weighted_mean(self, rng):
        G = 10
        fm = raw_features(rng.normal(size=(G, 2)))
        Z = rng.uniform(size=G)
        s2 = rng.uniform(0.01, 0.05, G)
        est = structreg_arrays(Z, s2, fm, grid=(1e6,))
        w = 1 / s2
        np.testing.assert_allclose(est, w @ Z / w.sum(), atol=1e-12)

    def test_table(self):
        summaries, fm = binary_inputs(4)
        t = structured_regression(summaries, fm, seed=1)
        assert t.method == "StructReg"
        assert np.all((t.estimate >= 0) & (t.estimate <= 1))

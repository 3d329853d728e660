import logging
import math

import numpy as np
import pytest
from scipy import optimize, stats

from ebbench.intervals import (
    CriticalValueQuery,
    CriticalValueTable,
    IntervalKind,
    UndefinedKappaError,
    cva_critical_value,
    kappa_hat,
    least_favorable,
    normal_cdf,
    normal_interval,
    normal_quantile,
    robust_eb_halfwidth,
    robust_eb_interval,
    student_t_quantile,
    t_interval,
    wilson_bounds,
    wilson_interval,
)


def brute_force_cva(m2, alpha=0.05, step=1e-3):
    """Critical value from a dense scan over two-point laws {0, t} with P(t) = m2 / t^2."""

    def worst(c):
        t = np.arange(math.sqrt(m2), c + 12.0, step)
        p = m2 / t**2
        r = stats.norm.sf(c - t) + stats.norm.cdf(-c - t)
        r0 = 2 * stats.norm.sf(c)
        return float(np.max(p * r + (1 - p) * r0))

    z = stats.norm.ppf(1 - alpha / 2)
    return optimize.brentq(lambda c: worst(c) - alpha, z, z + 10 * math.sqrt(m2) + 5, xtol=1e-10)


def textbook_wilson(k, n, z=1.959963984540054):
    p = k / n
    center = (p + z * z / (2 * n)) / (1 + z * z / n)
    half = z / (1 + z * z / n) * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n))
    return center - half, center + half


class TestQuantiles:
    def test_normal_table_values(self):
        assert normal_cdf(1.959963984540054) == pytest.approx(0.975, abs=1e-12)
        assert normal_cdf(0.0) == 0.5
        assert normal_cdf(-1.0) == pytest.approx(0.15865525393145707, abs=1e-14)
        assert normal_quantile(0.975) == pytest.approx(1.959964, abs=1e-6)

    def test_t_table_values(self):
        assert student_t_quantile(0.975, 1) == pytest.approx(12.706, abs=5e-4)
        assert student_t_quantile(0.975, 10) == pytest.approx(2.228, abs=5e-4)
        assert student_t_quantile(0.95, 30) == pytest.approx(1.697, abs=5e-4)


class TestWilson:
    def test_half_of_ten(self):
        ci = wilson_interval(5, 10, 0.05)
        assert ci.lo == pytest.approx(0.2366, abs=5e-4)
        assert ci.hi == pytest.approx(0.7634, abs=5e-4)
        assert ci.kind is IntervalKind.WILSON

    def test_matches_textbook_form(self):
        for n in (1, 7, 30):
            for k in range(n + 1):
                lo, hi = wilson_bounds(k, n, 0.05)
                ref = textbook_wilson(k, n)
                assert float(lo) == pytest.approx(max(ref[0], 0.0), abs=1e-12)
                assert float(hi) == pytest.approx(min(ref[1], 1.0), abs=1e-12)

    def test_boundary_exact(self):
        assert wilson_interval(0, 10).lo == 0.0
        assert wilson_interval(10, 10).hi == 1.0

    def test_k_above_n(self):
        with pytest.raises(ValueError):
            wilson_interval(11, 10)

    @staticmethod
    def exact_coverage(n, p):
        k = np.arange(n + 1)
        lo, hi = wilson_bounds(k, np.full(n + 1, n), 0.05)
        return float(stats.binom.pmf(k, n, p)[(lo <= p) & (p <= hi)].sum())

    def test_exact_coverage_known_dips(self):
        # n=4, p=1/2: k=0 and k=4 miss, so coverage is 14/16
        assert self.exact_coverage(4, 0.5) == pytest.approx(14 / 16, abs=1e-12)
        # n=1: the k=1 interval starts at 0.2066, so p=0.2 is covered only by k=0
        assert self.exact_coverage(1, 0.2) == pytest.approx(0.8, abs=1e-12)

    def test_exact_coverage_grid_mean(self):
        grid = np.round(np.arange(0.05, 0.951, 0.05), 10)
        cells = np.array([[self.exact_coverage(n, p) for p in grid] for n in range(1, 31)])
        assert cells.mean() >= 0.93
        assert cells[11:].min() >= 0.90


class TestTInterval:
    def test_two_values(self):
        ci = t_interval([0.0, 1.0], 0.05)
        assert ci.lo == pytest.approx(-5.853, abs=1e-3)
        assert ci.hi == pytest.approx(6.853, abs=1e-3)

    def test_clamped(self):
        ci = t_interval([0.0, 1.0], 0.05, bounds=(0, 1))
        assert (ci.lo, ci.hi) == (0.0, 1.0)

    def test_constant_values(self):
        ci = t_interval([0.4, 0.4, 0.4])
        assert ci.lo == pytest.approx(0.4) and ci.width < 1e-12

    def test_single_value(self):
        with pytest.raises(ValueError):
            t_interval([0.3])
        ci = t_interval([0.3], fallback_var=0.01)
        assert ci.kind is IntervalKind.NORMAL and "pooled_variance" in ci.flags
        assert ci.width == pytest.approx(2 * 1.959964 * 0.1, abs=1e-5)

    def test_empty(self):
        with pytest.raises(ValueError):
            t_interval([])

    def test_bad_alpha(self):
        with pytest.raises(ValueError):
            normal_interval(0.0, 1.0, alpha=1.5)


class TestKappa:
    def test_hand_value(self):
        assert kappa_hat([0.0, 0.0], [1.0, 1.0], 1.0) == pytest.approx(3.0)

    def test_zero_A(self):
        with pytest.raises(UndefinedKappaError):
            kappa_hat([0.1], [0.01], 0.0)

    def test_floor_at_one(self):
        assert kappa_hat([1.0, -1.0], [0.0, 0.0], 4.0) == 1.0

    def test_normal_prior(self, rng):
        A = 1.0
        eps = rng.normal(0, math.sqrt(A + 0.01), 2000)
        assert 2.7 <= kappa_hat(eps, np.full(2000, 0.01), A) <= 3.3


class TestCva:
    def test_zero_m2(self):
        assert cva_critical_value(0.0) == pytest.approx(1.959964, abs=1e-4)

    def test_monotone(self):
        vals = [cva_critical_value(m) for m in (0.0, 0.25, 1.0, 4.0, 16.0)]
        assert all(b > a for a, b in zip(vals, vals[1:]))

    @pytest.mark.parametrize("m2", [0.5, 1.0, 4.0])
    def test_brute_force_oracle(self, m2):
        assert cva_critical_value(m2) == pytest.approx(brute_force_cva(m2), abs=2e-4)

    def test_least_favorable_attains_alpha(self):
        lf = least_favorable(1.0)
        b = np.array(lf.support)
        w = np.array(lf.mass)
        assert w.sum() == pytest.approx(1.0)
        assert float(w @ b**2) == pytest.approx(1.0, rel=1e-6)
        r = stats.norm.sf(lf.c - b) + stats.norm.cdf(-lf.c - b)
        assert float(w @ r) == pytest.approx(0.05, abs=1e-8)

    def test_kappa_one_is_point_mass(self):
        # E b^4 <= m2^2 together with E b^2 <= m2 forces |b| = sqrt(m2) at the optimum
        c_ref = optimize.brentq(lambda c: stats.norm.sf(c - 1) + stats.norm.cdf(-c - 1) - 0.05, 1.9, 5)
        assert cva_critical_value(1.0, kappa=1.0) == pytest.approx(c_ref, abs=2e-3)

    def test_kappa_nesting(self):
        m_only = cva_critical_value(1.0)
        vals = [cva_critical_value(1.0, kappa=k) for k in (1.0, 3.0, 10.0, 1e9)]
        assert all(b >= a - 1e-6 for a, b in zip(vals, vals[1:]))
        assert all(v <= m_only + 1e-4 for v in vals)
        assert vals[-1] == pytest.approx(m_only, abs=1e-3)

    def test_query_object(self):
        q = CriticalValueQuery(m2=4.0, alpha=0.1)
        assert cva_critical_value(q) < cva_critical_value(4.0)

    def test_invalid(self):
        with pytest.raises(ValueError):
            cva_critical_value(-1.0)
        with pytest.raises(ValueError):
            cva_critical_value(1.0, alpha=0.0)

    def test_table_against_exact(self):
        table = CriticalValueTable(0.05)
        m2 = np.array([1e-8, 3e-4, 0.03, 0.7, 1.3, 9.0, 250.0, 2e6])
        exact = np.array([cva_critical_value(float(m)) for m in m2])
        np.testing.assert_allclose(table(m2), exact, rtol=1e-3)


class TestRobustInterval:
    def test_large_A_matches_normal(self):
        half = robust_eb_halfwidth(0.01, 1e4, 0.05)
        assert float(half) == pytest.approx(1.959964 * 0.1, rel=1e-4)

    def test_equal_variances(self):
        ci = robust_eb_interval(0.5, 0.01, 0.01)
        assert ci.width / 2 == pytest.approx(brute_force_cva(1.0) * 0.5 * 0.1, abs=1e-5)

    def test_zero_A_degenerate(self, caplog):
        with caplog.at_level(logging.WARNING):
            ci = robust_eb_interval(0.42, 0.01, 0.0)
        assert ci.lo == ci.hi == 0.42
        assert "degenerate" in ci.flags
        assert "A_hat = 0" in caplog.text

    def test_width_scales_with_sigma(self):
        widths = [robust_eb_interval(0.0, s2, s2 / 0.5).width for s2 in (0.001, 0.01, 0.1)]
        assert widths[0] < widths[1] < widths[2]

    def test_kappa_narrows(self):
        assert robust_eb_interval(0.0, 0.01, 0.01, kappa=3.0).width <= robust_eb_interval(0.0, 0.01, 0.01).width

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st

from ebbench.estimators import eb_combine, estimate_A
from ebbench.intervals import cva_critical_value, robust_eb_interval, wilson_bounds, kappa_hat
from ebbench.metrics import MetricKind, variance_of
from ebbench.regression import cv_folds

unit = st.floats(0.0, 1.0)
pos = st.floats(1e-6, 10.0)


@given(unit, unit, pos, st.floats(0.0, 10.0))
def test_eb_combine_convex(z, f, s2, A):
    est = eb_combine(z, f, s2, A)
    assert min(z, f) - 1e-12 <= est <= max(z, f) + 1e-12


@given(unit, unit, pos, st.floats(0.0, 5.0), st.floats(0.0, 5.0))
def test_eb_combine_monotone_in_A(z, f, s2, a1, a2):
    lo, hi = sorted((a1, a2))
    assert abs(eb_combine(z, f, s2, hi) - z) <= abs(eb_combine(z, f, s2, lo) - z) + 1e-12


@given(st.lists(st.floats(-1, 1), min_size=1, max_size=30), st.floats(0.0, 0.1))
def test_A_hat_nonnegative(eps, s2):
    assert estimate_A(eps, [s2] * len(eps)) >= 0


@settings(max_examples=25, deadline=None)
@given(st.floats(0.0, 50.0), st.floats(0.0, 50.0))
def test_cva_monotone(m_a, m_b):
    lo, hi = sorted((m_a, m_b))
    assert cva_critical_value(lo) <= cva_critical_value(hi) + 1e-9


@settings(max_examples=25, deadline=None)
@given(st.floats(0.05, 20.0), st.floats(1e-4, 1.0), st.floats(1.01, 10.0))
def test_width_nondecreasing_in_sigma(ratio, s2, scale):
    a = robust_eb_interval(0.0, s2, s2 / ratio).width
    b = robust_eb_interval(0.0, s2 * scale, s2 * scale / ratio).width
    assert b >= a - 1e-12


@given(st.integers(1, 200).flatmap(lambda n: st.tuples(st.integers(0, n), st.just(n))))
def test_wilson_contains_proportion(kn):
    k, n = kn
    lo, hi = wilson_bounds(k, n)
    assert 0.0 <= lo <= k / n <= hi <= 1.0


@given(st.lists(st.sampled_from([0.0, 1.0]), min_size=1, max_size=40), st.randoms())
def test_variance_permutation_invariant(scores, rnd):
    shuffled = list(scores)
    rnd.shuffle(shuffled)
    assert variance_of(scores, MetricKind.BINARY) == variance_of(shuffled, MetricKind.BINARY)


@given(st.lists(st.floats(-2, 2), min_size=1, max_size=20), st.floats(1e-3, 1.0))
def test_kappa_floor(eps, A):
    assert kappa_hat(eps, [0.01] * len(eps), A) >= 1.0


@given(st.integers(2, 60), st.integers(2, 5), st.integers(0, 2**31))
def test_folds_balanced(n, k, seed):
    if n < k:
        return
    counts = np.bincount(cv_folds(n, k, seed), minlength=k)
    assert counts.max() - counts.min() <= 1

"""Confidence intervals for direct and empirical Bayes estimates.

The robust empirical Bayes interval replaces the normal quantile by a
critical value that accounts for the worst-case shrinkage bias. With
normalized bias ``b`` constrained by ``E[b^2] <= m2`` (and optionally
``E[b^4] <= kappa * m2^2``), the critical value is the smallest ``c`` with::

    sup_F  E_F[ P(|N(b, 1)| > c) ]  <=  alpha

Under the second-moment constraint alone the least favorable distribution puts
mass ``m2 / t^2`` on ``|b| = t`` and the rest on ``b = 0``; this is what
:func:`cva_critical_value` searches over by default.
"""

from __future__ import annotations

import enum
import functools
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize, special, stats
from scipy.interpolate import PchipInterpolator

logger = logging.getLogger(__name__)

_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


class IntervalKind(enum.Enum):
    WILSON = "wilson"
    STUDENT_T = "student_t"
    NORMAL = "normal"
    ROBUST_EB = "robust_eb"


@dataclass(frozen=True)
class ConfidenceInterval:
    lo: float
    hi: float
    level: float
    kind: IntervalKind
    flags: tuple[str, ...] = field(default=())

    def __post_init__(self):
        if not self.lo <= self.hi:
            raise ValueError(f"interval lower bound {self.lo} exceeds upper bound {self.hi}")

    @property
    def width(self) -> float:
        return self.hi - self.lo

    def contains(self, x: float) -> bool:
        return self.lo <= x <= self.hi


def _check_alpha(alpha: float) -> None:
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha!r}")


def normal_cdf(x):
    return special.ndtr(x)


def normal_quantile(p):
    return special.ndtri(p)


def student_t_quantile(p, df):
    return stats.t.ppf(p, df)


def _clamp(lo, hi, bounds):
    if bounds is None:
        return lo, hi
    return np.clip(lo, *bounds), np.clip(hi, *bounds)


# --------------------------------------------------------------------------
# Direct-estimator intervals
# --------------------------------------------------------------------------


def wilson_bounds(k, n, alpha: float = 0.05):
    """Vectorized Wilson score bounds; returns (lo, hi) arrays."""
    _check_alpha(alpha)
    k = np.asarray(k, dtype=float)
    n = np.asarray(n, dtype=float)
    if np.any(n < 1) or np.any(k < 0) or np.any(k > n):
        raise ValueError("Wilson interval requires 0 <= k <= n and n >= 1")
    z = normal_quantile(1.0 - alpha / 2.0)
    p = k / n
    denom = 1.0 + z * z / n
    center = (p + z * z / (2.0 * n)) / denom
    half = (z / denom) * np.sqrt(p * (1.0 - p) / n + z * z / (4.0 * n * n))
    lo = np.where(k == 0, 0.0, np.clip(center - half, 0.0, 1.0))
    hi = np.where(k == n, 1.0, np.clip(center + half, 0.0, 1.0))
    return lo, hi


def wilson_interval(k: int, n: int, alpha: float = 0.05) -> ConfidenceInterval:
    if k > n:
        raise ValueError(f"successes {k} exceed trials {n}")
    lo, hi = wilson_bounds(k, n, alpha)
    return ConfidenceInterval(float(lo), float(hi), 1.0 - alpha, IntervalKind.WILSON)


def t_interval(values, alpha: float = 0.05, bounds=None, fallback_var: float | None = None) -> ConfidenceInterval:
    """Student-t interval for a mean; ``bounds`` clamps to a metric range.

    A single value has no spread estimate: supply ``fallback_var`` (variance of
    the mean, e.g. a pooled estimate) to get a flagged normal interval instead.
    """
    _check_alpha(alpha)
    x = np.asarray(values, dtype=float)
    n = x.size
    if n == 0:
        raise ValueError("t_interval needs at least one value")
    mean = float(x.mean())
    if n == 1:
        if fallback_var is None:
            raise ValueError("t_interval needs n >= 2 or a fallback variance")
        half = float(normal_quantile(1.0 - alpha / 2.0)) * math.sqrt(fallback_var)
        lo, hi = _clamp(mean - half, mean + half, bounds)
        return ConfidenceInterval(float(lo), float(hi), 1.0 - alpha, IntervalKind.NORMAL, ("pooled_variance",))
    half = float(student_t_quantile(1.0 - alpha / 2.0, n - 1)) * float(x.std(ddof=1)) / math.sqrt(n)
    lo, hi = _clamp(mean - half, mean + half, bounds)
    return ConfidenceInterval(float(lo), float(hi), 1.0 - alpha, IntervalKind.STUDENT_T)


def normal_interval(estimate: float, sigma2: float, alpha: float = 0.05, bounds=None) -> ConfidenceInterval:
    _check_alpha(alpha)
    half = float(normal_quantile(1.0 - alpha / 2.0)) * math.sqrt(sigma2)
    lo, hi = _clamp(estimate - half, estimate + half, bounds)
    return ConfidenceInterval(float(lo), float(hi), 1.0 - alpha, IntervalKind.NORMAL)


# --------------------------------------------------------------------------
# Robust EB critical values
# --------------------------------------------------------------------------


class UndefinedKappaError(ValueError):
    """kappa_hat needs a strictly positive prior-variance estimate."""


def kappa_hat(residuals, sigma2, A_hat: float) -> float:
    """Fourth-moment ratio of the prior residuals, floored at 1.

    Mean over groups of ``(e^4 - 6 s2 e^2 + 3 s2^2) / A^2``; equals 3 in
    expectation when the residuals are normal.
    """
    if not A_hat > 0:
        raise UndefinedKappaError("kappa_hat is undefined when A_hat = 0")
    e = np.asarray(residuals, dtype=float)
    s2 = np.asarray(sigma2, dtype=float)
    if e.shape != s2.shape or e.size == 0:
        raise ValueError("residuals and variances must be nonempty and equal-length")
    num = e**4 - 6.0 * s2 * e**2 + 3.0 * s2**2
    return max(1.0, float(num.mean()) / A_hat**2)


def noncoverage(b, c):
    """P(|Z + b| > c) for standard normal Z."""
    b = np.abs(np.asarray(b, dtype=float))
    return special.ndtr(-c - b) + special.ndtr(b - c)


@dataclass(frozen=True)
class CriticalValueQuery:
    m2: float
    kappa: float | None = None
    alpha: float = 0.05


@dataclass(frozen=True)
class LeastFavorable:
    """Critical value together with the bias distribution that attains it."""

    c: float
    support: tuple[float, ...]
    mass: tuple[float, ...]
    max_noncoverage: float


def _two_point_max(m2: float, c: float):
    """Max over t >= sqrt(m2) of (m2/t^2) r(t) + (1 - m2/t^2) r(0); returns (value, t)."""
    r0 = float(noncoverage(0.0, c))
    if m2 <= 0.0:
        return r0, 0.0
    s = math.sqrt(m2)

    def obj(t):
        q = m2 / (t * t)
        return q * noncoverage(t, c) + (1.0 - q) * r0

    # below c - 10 the t-term is < 1e-23, so the grid can start there
    grid = np.arange(max(s, c - 10.0), max(s, c) + 8.0, 0.01)
    if grid[0] > s:
        grid = np.concatenate([[s], grid])
    vals = obj(grid)
    i = int(np.argmax(vals))
    a = grid[max(i - 1, 0)]
    b = grid[min(i + 1, grid.size - 1)]
    # golden-section refinement of the bracketing grid cell
    x1 = b - _GOLDEN * (b - a)
    x2 = a + _GOLDEN * (b - a)
    f1, f2 = float(obj(x1)), float(obj(x2))
    while b - a > 1e-9:
        if f1 < f2:
            a, x1, f1 = x1, x2, f2
            x2 = a + _GOLDEN * (b - a)
            f2 = float(obj(x2))
        else:
            b, x2, f2 = x2, x1, f1
            x1 = b - _GOLDEN * (b - a)
            f1 = float(obj(x1))
    t_best, v_best = (x1, f1) if f1 >= f2 else (x2, f2)
    if vals[i] > v_best:
        t_best, v_best = float(grid[i]), float(vals[i])
    return v_best, float(t_best)


def _lp_grid(m2: float, kappa: float, c: float) -> np.ndarray:
    # noncoverage is flat at 1 past c + 8, so no mass needs to sit further out
    bmax = max(c, math.sqrt(m2)) + 8.0
    return np.linspace(0.0, bmax, 1601)


def _lp_max(m2: float, kappa: float | None, c: float):
    """Worst-case noncoverage over discrete bias laws on a grid (linear program)."""
    b = _lp_grid(m2, kappa if kappa is not None else 1.0, c)
    r = noncoverage(b, c)
    # rows scaled so both right-hand sides are 1
    A_ub = [b**2 / m2]
    b_ub = [1.0]
    if kappa is not None:
        A_ub.append(b**4 / (kappa * m2 * m2))
        b_ub.append(1.0)
    res = optimize.linprog(
        -r, A_ub=np.array(A_ub), b_ub=np.array(b_ub), A_eq=np.ones((1, b.size)), b_eq=[1.0],
        bounds=(0, None), method="highs",
    )
    if res.status != 0:
        raise RuntimeError(f"least-favorable linear program failed: {res.message}")
    return -float(res.fun), b, res.x


def _bisect_c(alpha: float, m2: float, worst) -> float:
    z = float(normal_quantile(1.0 - alpha / 2.0))
    lo, hi = z, z + math.sqrt(m2) + 4.0
    while worst(hi) > alpha:
        lo, hi = hi, hi + math.sqrt(m2) + 4.0
    for _ in range(200):
        if hi - lo < 1e-10:
            break
        mid = 0.5 * (lo + hi)
        if worst(mid) > alpha:
            lo = mid
        else:
            hi = mid
    return hi


def least_favorable(m2: float, alpha: float = 0.05, kappa: float | None = None) -> LeastFavorable:
    """Critical value and least-favorable bias distribution.

    ``kappa=None`` uses only the second-moment constraint (two-point search);
    otherwise the fourth-moment constraint is added and the inner problem is
    solved as a linear program over a fine grid of bias values.
    """
    _check_alpha(alpha)
    if not m2 >= 0 or not math.isfinite(m2):
        raise ValueError(f"m2 must be finite and nonnegative, got {m2!r}")
    if m2 == 0.0:
        z = float(normal_quantile(1.0 - alpha / 2.0))
        return LeastFavorable(z, (0.0,), (1.0,), alpha)
    if kappa is None or math.isinf(kappa):
        c = _bisect_c(alpha, m2, lambda c: _two_point_max(m2, c)[0])
        val, t = _two_point_max(m2, c)
        p = m2 / (t * t)
        if p >= 1.0 - 1e-12:
            return LeastFavorable(c, (t,), (1.0,), val)
        return LeastFavorable(c, (0.0, t), (1.0 - p, p), val)
    kappa = max(1.0, float(kappa))
    c = _bisect_c(alpha, m2, lambda c: _lp_max(m2, kappa, c)[0])
    val, b, w = _lp_max(m2, kappa, c)
    keep = w > 1e-10
    return LeastFavorable(c, tuple(b[keep].tolist()), tuple((w[keep] / w[keep].sum()).tolist()), val)


@functools.lru_cache(maxsize=65536)
def _cva_cached(m2: float, kappa: float | None, alpha: float) -> float:
    return least_favorable(m2, alpha, kappa).c


def cva_critical_value(query: CriticalValueQuery | float, alpha: float | None = None, kappa: float | None = None) -> float:
    """Robust critical value for normalized-bias second moment ``m2``.

    Accepts a :class:`CriticalValueQuery` or ``(m2, alpha, kappa)``. Results are
    memoized on (m2 rounded to 1e-6, kappa, alpha).
    """
    if not isinstance(query, CriticalValueQuery):
        query = CriticalValueQuery(float(query), kappa, 0.05 if alpha is None else alpha)
    _check_alpha(query.alpha)
    if math.isinf(query.m2):
        raise ValueError("m2 is infinite (A_hat = 0); use the degenerate interval")
    m2 = round(float(query.m2), 6)
    kap = None if query.kappa is None or math.isinf(query.kappa) else max(1.0, float(query.kappa))
    return _cva_cached(m2, kap, float(query.alpha))


class CriticalValueTable:
    """Interpolated second-moment-only critical values for bulk use.

    Exact values on a log-spaced grid of m2, monotone cubic interpolation of
    log(c) against log(m2) between nodes; outside the grid the exact routine
    is called.
    """

    def __init__(self, alpha: float = 0.05, lo: float = 1e-6, hi: float = 1e6, nodes: int = 97):
        _check_alpha(alpha)
        self.alpha = alpha
        self.z = float(normal_quantile(1.0 - alpha / 2.0))
        self.lo, self.hi = lo, hi
        self.m2_nodes = np.logspace(math.log10(lo), math.log10(hi), nodes)
        self.c_nodes = np.array([least_favorable(float(m), alpha).c for m in self.m2_nodes])
        self._interp = PchipInterpolator(np.log(self.m2_nodes), np.log(self.c_nodes))

    def __call__(self, m2):
        m2 = np.atleast_1d(np.asarray(m2, dtype=float))
        out = np.empty_like(m2)
        small = m2 < self.lo
        big = m2 > self.hi
        mid = ~(small | big)
        out[mid] = np.exp(self._interp(np.log(m2[mid])))
        # linear from the normal quantile at m2 = 0 up to the first node
        out[small] = self.z + (self.c_nodes[0] - self.z) * m2[small] / self.lo
        for i in np.flatnonzero(big):
            out[i] = least_favorable(float(m2[i]), self.alpha).c
        return out


@functools.lru_cache(maxsize=16)
def critical_value_table(alpha: float = 0.05) -> CriticalValueTable:
    return CriticalValueTable(alpha)


def robust_eb_halfwidth(sigma2, A_hat: float, alpha: float = 0.05, kappa: float | None = None, table=None):
    """Vectorized half-widths ``cva(s2/A, kappa) * A/(s2+A) * sqrt(s2)``; zero when A_hat = 0."""
    s2 = np.asarray(sigma2, dtype=float)
    if A_hat <= 0:
        return np.zeros_like(s2)
    m2 = s2 / A_hat
    if kappa is None and table is not None:
        c = table(m2)
    else:
        c = np.array([cva_critical_value(CriticalValueQuery(float(m), kappa, alpha)) for m in np.atleast_1d(m2)])
        c = c.reshape(s2.shape)
    return c * (A_hat / (s2 + A_hat)) * np.sqrt(s2)


def robust_eb_interval(
    estimate: float,
    sigma2: float,
    A_hat: float,
    kappa: float | None = None,
    alpha: float = 0.05,
    bounds=None,
) -> ConfidenceInterval:
    """Robust EB interval around ``estimate``.

    With ``A_hat = 0`` the estimate equals the prior mean and the interval
    collapses to that point; a warning is logged and the interval flagged.
    """
    _check_alpha(alpha)
    if not sigma2 > 0:
        raise ValueError("robust_eb_interval requires sigma2 > 0")
    if A_hat <= 0:
        logger.warning("A_hat = 0: robust EB interval degenerates to the prior mean")
        lo, hi = _clamp(estimate, estimate, bounds)
        return ConfidenceInterval(float(lo), float(hi), 1.0 - alpha, IntervalKind.ROBUST_EB, ("degenerate",))
    half = float(robust_eb_halfwidth(sigma2, A_hat, alpha, kappa))
    lo, hi = _clamp(estimate - half, estimate + half, bounds)
    return ConfidenceInterval(float(lo), float(hi), 1.0 - alpha, IntervalKind.ROBUST_EB)

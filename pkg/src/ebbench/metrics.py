"""Per-subgroup metric values and their sampling variances."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Sequence

import numpy as np

if TYPE_CHECKING:
    from .core import SubgroupData


class MetricKind(enum.Enum):
    BINARY = "binary"
    BOUNDED = "bounded"
    UNBOUNDED = "unbounded"

    @classmethod
    def parse(cls, value: "MetricKind | str") -> "MetricKind":
        if isinstance(value, MetricKind):
            return value
        aliases = {"binary": cls.BINARY, "accuracy": cls.BINARY, "bounded": cls.BOUNDED,
                   "unbounded": cls.UNBOUNDED, "continuous": cls.UNBOUNDED}
        try:
            return aliases[str(value).lower()]
        except KeyError:
            raise ValueError(f"unknown metric kind {value!r}") from None

    @property
    def bounds(self) -> tuple[float, float] | None:
        return None if self is MetricKind.UNBOUNDED else (0.0, 1.0)


@dataclass(frozen=True)
class MetricSummary:
    group_key: str
    metric_kind: MetricKind
    Z: float
    n: int
    var_hat: float
    success_count: int | None = None
    model_id: str = ""
    task_id: str = ""
    flags: tuple[str, ...] = field(default=())


def smoothed_proportion(k, n):
    return (np.asarray(k, dtype=float) + 0.5) / (np.asarray(n, dtype=float) + 1.0)


def binary_variance(k, n):
    """Variance of a sample proportion, evaluated at the smoothed proportion.

    Strictly positive for every ``0 <= k <= n``; vectorized over arrays.
    """
    p = smoothed_proportion(k, n)
    return p * (1.0 - p) / np.asarray(n, dtype=float)


def variance_of(scores, kind: MetricKind | str, pooled_var: float | None = None) -> float:
    """Estimated variance of the mean of ``scores``.

    Binary scores use ``p(1-p)/n`` at the smoothed proportion ``(k+0.5)/(n+1)``.
    Other kinds use the sample variance (ddof=1) divided by n. A single
    continuous score has no sample variance; ``pooled_var`` is then required.
    """
    kind = MetricKind.parse(kind)
    x = np.asarray(scores, dtype=float)
    n = x.size
    if n == 0:
        raise ValueError("variance_of needs at least one score")
    if kind is MetricKind.BINARY:
        return float(binary_variance(x.sum(), n))
    if n == 1:
        if pooled_var is None:
            raise ValueError("a single continuous score needs pooled_var for its variance")
        return float(pooled_var)
    return float(x.var(ddof=1) / n)


def summarize(subgroup: "SubgroupData", kind: MetricKind | str, pooled_var: float | None = None) -> MetricSummary:
    from .core import check_score

    kind = MetricKind.parse(kind)
    scores = subgroup.scores()
    if scores.size == 0:
        raise ValueError(f"subgroup {subgroup.group_key!r} is empty")
    for s in scores:
        check_score(float(s), kind, f"subgroup {subgroup.group_key!r}")
    flags: tuple[str, ...] = ()
    k = None
    if kind is MetricKind.BINARY:
        k = int(scores.sum())
    elif scores.size == 1:
        flags = ("pooled_variance",)
    return MetricSummary(
        group_key=subgroup.group_key,
        metric_kind=kind,
        Z=float(scores.mean()),
        n=int(scores.size),
        var_hat=variance_of(scores, kind, pooled_var),
        success_count=k,
        model_id=subgroup.model_id,
        task_id=subgroup.task_id,
        flags=flags,
    )


def pooled_within_variance(subgroups: Sequence["SubgroupData"]) -> float | None:
    """Pooled within-subgroup sample variance, or None when no subgroup has n >= 2."""
    num = 0.0
    dof = 0
    for sg in subgroups:
        s = sg.scores()
        if s.size >= 2:
            num += float(((s - s.mean()) ** 2).sum())
            dof += s.size - 1
    return num / dof if dof else None


def summarize_all(subgroups: Sequence["SubgroupData"], kind: MetricKind | str) -> list[MetricSummary]:
    """Summaries for a whole partition, with the pooled-variance fallback for n=1 units."""
    kind = MetricKind.parse(kind)
    pooled = None
    if kind is not MetricKind.BINARY and any(sg.n == 1 for sg in subgroups):
        pooled = pooled_within_variance(subgroups)
        if pooled is None:
            raise ValueError("every continuous subgroup has one record; no variance can be estimated")
    return [summarize(sg, kind, pooled) for sg in subgroups]


def summary_arrays(summaries: Sequence[MetricSummary]):
    """(Z, var_hat, n) as float/float/int arrays."""
    Z = np.array([s.Z for s in summaries], dtype=float)
    v = np.array([s.var_hat for s in summaries], dtype=float)
    n = np.array([s.n for s in summaries], dtype=int)
    return Z, v, n

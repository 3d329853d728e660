"""Evaluation records, datasets and subgroup partitions."""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .metrics import MetricKind

RECORD_KEYS = {"example_id", "model_id", "task_id", "group", "score", "confidence", "embedding"}
REQUIRED_KEYS = ("example_id", "model_id", "task_id", "score")


class RecordParseError(ValueError):
    """A record line could not be parsed."""

    def __init__(self, message: str, line_number: int | None = None):
        self.line_number = line_number
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)


class SchemaError(ValueError):
    """Records disagree on their shape (e.g. embedding dimension)."""


class DomainError(ValueError):
    """A value lies outside the domain allowed by the metric kind."""


class MissingFieldError(ValueError):
    """An operation needs an optional record field that is absent."""

    def __init__(self, field_name: str, where: str):
        self.field_name = field_name
        super().__init__(f"missing field '{field_name}' in {where}")


@dataclass(frozen=True)
class EvalRecord:
    example_id: str
    model_id: str
    task_id: str
    score: float
    group_key: str | None = None
    confidence: float | None = None
    embedding: tuple[float, ...] | None = None

    def to_dict(self) -> dict:
        out: dict = {"example_id": self.example_id, "model_id": self.model_id, "task_id": self.task_id}
        if self.group_key is not None:
            out["group"] = self.group_key
        out["score"] = self.score
        if self.confidence is not None:
            out["confidence"] = self.confidence
        if self.embedding is not None:
            out["embedding"] = list(self.embedding)
        return out

    def to_line(self) -> str:
        return json.dumps(self.to_dict(), separators=(",", ":"))


def check_score(score: float, kind: MetricKind, where: str = "record") -> None:
    if not math.isfinite(score):
        raise DomainError(f"non-finite score in {where}")
    if kind is MetricKind.BINARY and score not in (0.0, 1.0):
        raise DomainError(f"binary metric requires score in {{0,1}}, got {score!r} in {where}")
    if kind is MetricKind.BOUNDED and not 0.0 <= score <= 1.0:
        raise DomainError(f"bounded metric requires score in [0,1], got {score!r} in {where}")


@dataclass(frozen=True)
class Dataset:
    records: tuple[EvalRecord, ...]
    metric_kind: MetricKind
    embedding_dim: int | None = None

    def __post_init__(self):
        seen = set()
        for rec in self.records:
            key = (rec.model_id, rec.task_id, rec.example_id)
            if key in seen:
                raise SchemaError(
                    f"duplicate example_id {rec.example_id!r} for model {rec.model_id!r}, task {rec.task_id!r}"
                )
            seen.add(key)
            check_score(rec.score, self.metric_kind, f"example {rec.example_id!r}")
            if rec.embedding is not None:
                if self.embedding_dim is None:
                    raise SchemaError("embedding present but embedding_dim unset")
                if len(rec.embedding) != self.embedding_dim:
                    raise SchemaError(
                        f"example {rec.example_id!r}: embedding length {len(rec.embedding)} "
                        f"!= {self.embedding_dim}"
                    )

    def __len__(self) -> int:
        return len(self.records)

    @property
    def group_keys(self) -> list[str]:
        return sorted({r.group_key for r in self.records if r.group_key is not None})

    @property
    def model_ids(self) -> list[str]:
        return sorted({r.model_id for r in self.records})


@dataclass(frozen=True)
class SubgroupData:
    """One estimation unit: the records of one group evaluated on one model."""

    group_key: str
    records: tuple[EvalRecord, ...]
    model_id: str = ""
    task_id: str = ""

    def __post_init__(self):
        if not self.records:
            raise ValueError(f"subgroup {self.group_key!r} has no records")

    @property
    def n(self) -> int:
        return len(self.records)

    @property
    def key(self) -> tuple[str, str]:
        return (self.group_key, self.model_id)

    def scores(self) -> np.ndarray:
        return np.array([r.score for r in self.records], dtype=float)


def _parse_record(obj, line_number: int) -> EvalRecord:
    if not isinstance(obj, dict):
        raise RecordParseError("record must be a key-value object", line_number)
    unknown = set(obj) - RECORD_KEYS
    if unknown:
        raise RecordParseError(f"unknown keys {sorted(unknown)}", line_number)
    for key in REQUIRED_KEYS:
        if key not in obj:
            raise RecordParseError(f"missing required key '{key}'", line_number)
    for key in ("example_id", "model_id", "task_id"):
        if not isinstance(obj[key], str):
            raise RecordParseError(f"'{key}' must be a string", line_number)
    group = obj.get("group")
    if group is not None and not isinstance(group, str):
        raise RecordParseError("'group' must be a string", line_number)
    score = obj["score"]
    if isinstance(score, bool) or not isinstance(score, (int, float)):
        raise RecordParseError("'score' must be a number", line_number)
    conf = obj.get("confidence")
    if conf is not None:
        if isinstance(conf, bool) or not isinstance(conf, (int, float)):
            raise RecordParseError("'confidence' must be a number", line_number)
        if not 0.0 <= conf <= 1.0:
            raise RecordParseError(f"'confidence' must lie in [0,1], got {conf}", line_number)
    emb = obj.get("embedding")
    if emb is not None:
        if not isinstance(emb, list) or not all(
            isinstance(v, (int, float)) and not isinstance(v, bool) for v in emb
        ):
            raise RecordParseError("'embedding' must be an array of numbers", line_number)
        if not emb:
            raise RecordParseError("'embedding' must be nonempty", line_number)
        emb = tuple(float(v) for v in emb)
    return EvalRecord(
        example_id=obj["example_id"],
        model_id=obj["model_id"],
        task_id=obj["task_id"],
        score=float(score),
        group_key=group,
        confidence=None if conf is None else float(conf),
        embedding=emb,
    )


def ingest_records(lines: Iterable[str | bytes], metric_kind: MetricKind | str) -> Dataset:
    """Parse newline-delimited JSON records into a validated :class:`Dataset`.

    Blank lines are skipped. The embedding dimension is taken from the first
    record carrying an embedding; every later embedding must match it.
    """
    kind = MetricKind.parse(metric_kind)
    records = []
    embedding_dim = None
    for i, raw in enumerate(lines, start=1):
        if isinstance(raw, bytes):
            raw = raw.decode("utf-8")
        if not raw.strip():
            continue
        try:
            obj = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise RecordParseError(f"malformed JSON ({exc.msg})", i) from None
        rec = _parse_record(obj, i)
        if rec.embedding is not None:
            if embedding_dim is None:
                embedding_dim = len(rec.embedding)
            elif len(rec.embedding) != embedding_dim:
                raise SchemaError(
                    f"line {i}: embedding length {len(rec.embedding)} != {embedding_dim}"
                )
        try:
            check_score(rec.score, kind, f"line {i}")
        except DomainError as exc:
            exc.line_number = i
            raise
        records.append(rec)
    return Dataset(tuple(records), kind, embedding_dim)


def read_records(path, metric_kind: MetricKind | str) -> Dataset:
    with open(path, "r", encoding="utf-8") as fh:
        return ingest_records(fh, metric_kind)


def read_assignment(lines: Iterable[str]) -> dict[str, str]:
    """Read an example_id -> group mapping written by the grouping step."""
    out: dict[str, str] = {}
    for i, raw in enumerate(lines, start=1):
        if not raw.strip():
            continue
        try:
            obj = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise RecordParseError(f"malformed JSON ({exc.msg})", i) from None
        if not isinstance(obj, dict) or not isinstance(obj.get("example_id"), str) or not isinstance(
            obj.get("group"), str
        ):
            raise RecordParseError("assignment line needs string 'example_id' and 'group'", i)
        out[obj["example_id"]] = obj["group"]
    return out


def _majority(values: Sequence[str]) -> str:
    counts = Counter(values)
    best = max(counts.values())
    return min(v for v, c in counts.items() if c == best)


def partition_by_group(
    dataset: Dataset, assignment: Mapping[str, str] | None = None
) -> list[SubgroupData]:
    """Split a dataset into (group, model) estimation units.

    With ``assignment=None`` the records' own ``group`` keys are used; otherwise
    ``assignment`` maps every example_id to its group label. Units are returned
    sorted by (group_key, model_id). A unit's task_id is the most common task
    among its records.
    """
    buckets: dict[tuple[str, str], list[EvalRecord]] = {}
    for rec in dataset.records:
        if assignment is None:
            if rec.group_key is None:
                raise MissingFieldError("group", f"example {rec.example_id!r}")
            key = rec.group_key
        else:
            try:
                key = assignment[rec.example_id]
            except KeyError:
                raise MissingFieldError("group", f"assignment for example {rec.example_id!r}") from None
        buckets.setdefault((key, rec.model_id), []).append(rec)
    out = []
    for (gkey, model), recs in sorted(buckets.items()):
        out.append(
            SubgroupData(
                group_key=gkey,
                records=tuple(recs),
                model_id=model,
                task_id=_majority([r.task_id for r in recs]),
            )
        )
    return out


@dataclass
class GroupTable:
    """Column view of the unit identities of a partition."""

    group_keys: list[str] = field(default_factory=list)
    model_ids: list[str] = field(default_factory=list)
    task_ids: list[str] = field(default_factory=list)

    @classmethod
    def from_subgroups(cls, subgroups: Sequence[SubgroupData]) -> "GroupTable":
        return cls(
            [s.group_key for s in subgroups],
            [s.model_id for s in subgroups],
            [s.task_id for s in subgroups],
        )

    def __len__(self) -> int:
        return len(self.group_keys)

    def take(self, idx) -> "GroupTable":
        idx = list(np.asarray(idx, dtype=int))
        return GroupTable(
            [self.group_keys[i] for i in idx],
            [self.model_ids[i] for i in idx],
            [self.task_ids[i] for i in idx],
        )

import json

import numpy as np
import pytest

from ebbench.core import EvalRecord


def make_records(groups, model="m0", task="t0", emb_dim=None, seed=0):
    """Records from {group: [scores]}; example ids are '<group>-<i>'."""
    rng = np.random.default_rng(seed)
    out = []
    for g, scores in groups.items():
        for i, s in enumerate(scores):
            emb = tuple(rng.normal(size=emb_dim)) if emb_dim else None
            out.append(EvalRecord(f"{g}-{i}", model, task, float(s), g, float(rng.uniform(0.2, 0.9)), emb))
    return out


def to_lines(records):
    return [r.to_line() for r in records]


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def write_jsonl(tmp_path):
    def _write(name, objs):
        path = tmp_path / name
        path.write_text("\n".join(o if isinstance(o, str) else json.dumps(o) for o in objs) + "\n")
        return path
    return _write


def raw_features(X, tasks=None, models=None):
    """FeatureMatrix over a bare array, one continuous block."""
    from ebbench.core import GroupTable
    from ebbench.regression import FeatureBlock, FeatureMatrix

    X = np.asarray(X, dtype=float)
    n = X.shape[0]
    groups = GroupTable([f"g{i:03d}" for i in range(n)], list(models or ["m"] * n), list(tasks or ["t"] * n))
    return FeatureMatrix(X, (FeatureBlock("embedding", X.shape[1], False),), groups)


_CRITERIA_KEY = pytest.StashKey[list]()


@pytest.fixture
def record_criterion(request):
    """Collect one pass/fail line per acceptance criterion for the terminal summary."""
    lines = request.config.stash.setdefault(_CRITERIA_KEY, [])

    def _record(number, ok, detail):
        text = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        lines.append(text)
        print(text)
        return ok

    return _record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_CRITERIA_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for text in sorted(lines, key=lambda t: int(t.split()[1].rstrip(":"))):
            terminalreporter.write_line(text)

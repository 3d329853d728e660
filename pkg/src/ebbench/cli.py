"""Command-line entry point: ``ebbench {group,estimate,simulate,benchmark,loco}``.

Options come from three layers, later layers winning: built-in defaults, a
JSON ``--config`` file whose keys are the long option names with
underscores, and flags given on the command line. Exit codes: 0 success,
1 runtime or data error, 2 argument or config error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import tempfile
from pathlib import Path

from . import __version__
from .core import MissingFieldError, RecordParseError, SchemaError, DomainError, read_assignment, read_records
from .estimators import (
    TooFewGroupsError,
    direct_table,
    eb_cross_fit,
    estimates_csv,
    james_stein,
    structured_regression,
    synthetic_regression,
)
from .grouping import DegenerateGeometryError, assignment_lines, group_dataset
from .harness import (
    BenchmarkConfig,
    BenchmarkError,
    DatasetSource,
    PriorMean,
    SamplingScheme,
    SynthSource,
    SynthSpec,
    loco_csv,
    loco_importance,
    run_benchmark,
)
from .metrics import MetricKind, summarize_all
from .core import partition_by_group
from .regression import DEFAULT_BLOCKS, KNOWN_BLOCKS, Family, RegressorSpec, build_features

logger = logging.getLogger("ebbench")

ESTIMATE_METHODS = ("dt", "sr", "eb", "js", "structreg")
BENCH_METHODS = ("dt", "sr", "eb", "js", "structreg")
SIM_METHODS = BENCH_METHODS + ("oracle",)

_REGRESSOR = {"family": "ridge", "grid": None, "cv_folds": 2, "blocks": list(DEFAULT_BLOCKS)}
_SCHEME = {"scheme": "proportional", "min_target": 10, "qualifier_size": 50, "n_per_group": 20, "drop_factor": 4.0}
_SHRINK = {"alpha": 0.05, "pool_scope": "all", "use_kappa": False}

DEFAULTS = {
    "group": {"input": None, "output": None, "metric": "binary", "k_min": 2, "k_max": 10, "min_size": 50,
              "seed": 0},
    "estimate": {"input": None, "output": None, "metric": "binary", "methods": ["eb"], "seed": None,
                 "assignment": None, **_SHRINK, **_REGRESSOR},
    "benchmark": {"input": None, "output": None, "metric": "binary", "methods": ["dt", "sr", "eb"], "seed": None,
                  "trials": 1000, "workers": 1, "assignment": None, **_SHRINK, **_REGRESSOR, **_SCHEME},
    "simulate": {"output": None, "methods": ["dt", "sr", "eb"], "seed": 0, "trials": 1000, "workers": 1,
                 "synth": {}, **_SHRINK, **_REGRESSOR},
    "loco": {"input": None, "output": None, "metric": "binary", "methods": ["sr", "eb"], "seed": 0, "trials": 100,
             "workers": 1, "assignment": None, "synth": None, **_SHRINK, **_REGRESSOR, **_SCHEME},
}
REQUIRED = {
    "group": ("input", "output"),
    "estimate": ("input", "output", "seed"),
    "benchmark": ("input", "output", "seed"),
    "simulate": ("output",),
    "loco": ("output",),
}
# settings that change how a run executes but never its results
NOT_ECHOED = ("workers",)


class ConfigError(ValueError):
    pass


def _add(p, *names, **kw):
    kw.setdefault("default", argparse.SUPPRESS)
    p.add_argument(*names, **kw)


def _csv_list(text):
    return [t.strip() for t in text.split(",") if t.strip()]


def _float_list(text):
    return [float(t) for t in _csv_list(text)]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ebbench", description="Subgroup metric estimation from small samples.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, inputs=True):
        _add(p, "--config", help="JSON file of option values (flags override it)")
        _add(p, "--output", "-o", help="output directory")
        _add(p, "--seed", type=int)
        if inputs:
            _add(p, "--input", "-i", help="evaluation records, one JSON object per line")
            _add(p, "--metric", choices=[k.value for k in MetricKind] + ["accuracy", "continuous"])

    def estimation(p):
        _add(p, "--method", "--methods", dest="methods", type=_csv_list, help="comma-separated method names")
        _add(p, "--alpha", type=float)
        _add(p, "--pool-scope", dest="pool_scope", choices=["all", "per-model"])
        _add(p, "--use-kappa", dest="use_kappa", action="store_true")
        _add(p, "--family", choices=[f.value for f in Family])
        _add(p, "--grid", type=_float_list, help="comma-separated hyperparameter grid")
        _add(p, "--cv-folds", dest="cv_folds", type=int)
        _add(p, "--blocks", type=_csv_list, help=f"feature blocks from {','.join(KNOWN_BLOCKS[:4])}")

    def trials(p):
        _add(p, "--trials", "-T", dest="trials", type=int)
        _add(p, "--workers", type=int)

    def scheme(p):
        _add(p, "--scheme", choices=["proportional", "equal"])
        _add(p, "--min-target", dest="min_target", type=int)
        _add(p, "--qualifier-size", dest="qualifier_size", type=int)
        _add(p, "--n-per-group", dest="n_per_group", type=int)
        _add(p, "--drop-factor", dest="drop_factor", type=float)

    p = sub.add_parser("group", help="cluster example embeddings into subgroups")
    common(p)
    _add(p, "--k-min", dest="k_min", type=int)
    _add(p, "--k-max", dest="k_max", type=int)
    _add(p, "--min-size", dest="min_size", type=int)

    p = sub.add_parser("estimate", help="per-subgroup estimates and intervals")
    common(p)
    estimation(p)
    _add(p, "--assignment", help="example_id -> group file from `ebbench group`")

    p = sub.add_parser("benchmark", help="resampling benchmark on a full dataset")
    common(p)
    estimation(p)
    trials(p)
    scheme(p)
    _add(p, "--assignment")

    p = sub.add_parser("simulate", help="benchmark on synthetic data (generative model in the config's 'synth' key)")
    common(p, inputs=False)
    estimation(p)
    trials(p)

    p = sub.add_parser("loco", help="leave-one-feature-block-out importance")
    common(p)
    estimation(p)
    trials(p)
    scheme(p)
    _add(p, "--assignment")
    return parser


def resolve_config(command: str, ns: argparse.Namespace) -> dict:
    """Merge defaults, config file and flags; validate every field."""
    cfg = json.loads(json.dumps(DEFAULTS[command]))
    flags = {k: v for k, v in vars(ns).items() if k not in ("command", "verbose", "config")}
    path = getattr(ns, "config", None)
    if path is not None:
        try:
            with open(path, "r", encoding="utf-8") as fh:
                loaded = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc.strerror}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} line {exc.lineno}: {exc.msg}") from None
        if not isinstance(loaded, dict):
            raise ConfigError(f"config file {path} must hold a JSON object")
        unknown = sorted(set(loaded) - set(cfg))
        if unknown:
            raise ConfigError(f"unknown config keys for '{command}': {', '.join(unknown)}")
        cfg.update(loaded)
    cfg.update(flags)
    missing = [k for k in REQUIRED[command] if cfg.get(k) is None]
    if command == "loco" and cfg.get("input") is None and cfg.get("synth") is None:
        missing.append("input (or a 'synth' config section)")
    if missing:
        raise ConfigError(f"missing required option(s): {', '.join(missing)}")
    _validate(command, cfg)
    return cfg


def _validate(command, cfg):
    def check(cond, msg):
        if not cond:
            raise ConfigError(msg)

    if "metric" in cfg:
        try:
            MetricKind.parse(cfg["metric"])
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
    if "methods" in cfg:
        allowed = {"estimate": ESTIMATE_METHODS, "benchmark": BENCH_METHODS, "simulate": SIM_METHODS,
                   "loco": ("sr", "eb", "structreg")}[command]
        methods = cfg["methods"]
        check(isinstance(methods, list) and methods, "methods must be a nonempty list")
        bad = [m for m in methods if m not in allowed]
        check(not bad, f"unknown method(s) {bad}; choose from {', '.join(allowed)}")
    if "alpha" in cfg:
        check(0 < cfg["alpha"] < 1, "alpha must lie in (0, 1)")
    if "seed" in cfg and cfg["seed"] is not None:
        check(isinstance(cfg["seed"], int) and cfg["seed"] >= 0, "seed must be a nonnegative integer")
    for key in ("trials", "workers", "cv_folds", "k_min", "k_max", "min_size", "min_target", "qualifier_size",
                "n_per_group"):
        if key in cfg:
            check(isinstance(cfg[key], int) and cfg[key] >= 1, f"{key} must be a positive integer")
    if "cv_folds" in cfg:
        check(cfg["cv_folds"] >= 2, "cv_folds must be at least 2")
    if "k_min" in cfg:
        check(cfg["k_min"] >= 2 and cfg["k_max"] >= cfg["k_min"], "need 2 <= k_min <= k_max")
    if "pool_scope" in cfg:
        check(cfg["pool_scope"] in ("all", "per-model"), "pool_scope must be 'all' or 'per-model'")
    if "family" in cfg:
        try:
            Family.parse(cfg["family"])
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
    if "blocks" in cfg:
        bad = [b for b in cfg["blocks"] if b not in DEFAULT_BLOCKS]
        check(not bad, f"unknown feature block(s) {bad}")
    if "scheme" in cfg:
        try:
            _scheme(cfg)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
    if cfg.get("synth") is not None:
        try:
            synth_spec(cfg["synth"], cfg.get("seed") or 0)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"synth: {exc}") from None


def synth_spec(d: dict, seed: int) -> SynthSpec:
    """SynthSpec from a config mapping; ``prior_mean`` may be a nested mapping."""
    if not isinstance(d, dict):
        raise TypeError("must be a JSON object")
    d = dict(d)
    fields = {f.name for f in dataclasses.fields(SynthSpec)}
    unknown = sorted(set(d) - fields)
    if unknown:
        raise ValueError(f"unknown keys {', '.join(unknown)}")
    if "prior_mean" in d:
        pm = d["prior_mean"]
        pm_fields = {f.name for f in dataclasses.fields(PriorMean)}
        if not isinstance(pm, dict) or set(pm) - pm_fields:
            raise ValueError(f"prior_mean takes keys {', '.join(sorted(pm_fields))}")
        d["prior_mean"] = PriorMean(**{k: tuple(v) if isinstance(v, list) else v for k, v in pm.items()})
    for key in ("sigma2", "sigma2_range", "n_per_group"):
        if isinstance(d.get(key), list):
            d[key] = tuple(d[key])
    d.setdefault("seed", seed)
    return SynthSpec(**d)


def _scheme(cfg) -> SamplingScheme:
    return SamplingScheme(cfg["scheme"], cfg["min_target"], cfg["qualifier_size"], cfg["n_per_group"],
                          cfg["drop_factor"])


def _regressor(cfg) -> RegressorSpec:
    grid = tuple(cfg["grid"]) if cfg.get("grid") else None
    if grid is not None and Family.parse(cfg["family"]) is Family.STUMPS:
        grid = tuple(int(g) for g in grid)
    return RegressorSpec(Family.parse(cfg["family"]), grid=grid, cv_folds=cfg["cv_folds"], seed=cfg["seed"] or 0)


def _bench_config(cfg) -> BenchmarkConfig:
    return BenchmarkConfig(tuple(cfg["methods"]), _regressor(cfg), cfg["alpha"], cfg["pool_scope"],
                           bool(cfg["use_kappa"]))


def _require_file(path):
    if not Path(path).is_file():
        raise FileNotFoundError(f"input file not found: {path}")


def _load(cfg):
    _require_file(cfg["input"])
    dataset = read_records(cfg["input"], cfg["metric"])
    assignment = None
    if cfg.get("assignment"):
        _require_file(cfg["assignment"])
        with open(cfg["assignment"], "r", encoding="utf-8") as fh:
            assignment = read_assignment(fh)
    return dataset, assignment


def write_outputs(outdir, files: dict[str, str]) -> None:
    """Write every file via temp file + rename; nothing is written unless all content exists."""
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    for name, text in files.items():
        fd, tmp = tempfile.mkstemp(dir=out, prefix=f".{name}.", suffix=".tmp")
        try:
            with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
                fh.write(text)
            os.replace(tmp, out / name)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise


def _echo(cfg) -> str:
    return json.dumps({k: v for k, v in cfg.items() if k not in NOT_ECHOED}, indent=2, sort_keys=True) + "\n"


def cmd_group(cfg) -> dict[str, str]:
    dataset, _ = _load(cfg)
    ids, assignment = group_dataset(dataset, range(cfg["k_min"], cfg["k_max"] + 1), cfg["seed"], cfg["min_size"])
    logger.info("k=%d clusters after merging (silhouette scores %s)", assignment.k, assignment.scores)
    return {"assignment.jsonl": "\n".join(assignment_lines(ids, assignment.labels)) + "\n"}


def cmd_estimate(cfg) -> dict[str, str]:
    dataset, assignment = _load(cfg)
    parts = partition_by_group(dataset, assignment)
    summaries = summarize_all(parts, dataset.metric_kind)
    need_features = any(m in ("sr", "eb", "structreg") for m in cfg["methods"])
    features = build_features(parts, cfg["blocks"]) if need_features else None
    spec = _regressor(cfg)
    tables = []
    for m in cfg["methods"]:
        if m == "dt":
            tables.append(direct_table(summaries, cfg["alpha"]))
        elif m == "sr":
            tables.append(synthetic_regression(summaries, features, spec))
        elif m == "eb":
            tables.append(eb_cross_fit(summaries, features, spec, cfg["seed"], cfg["pool_scope"], cfg["alpha"],
                                       bool(cfg["use_kappa"]))[0])
        elif m == "js":
            tables.append(james_stein(summaries, cfg["alpha"], bool(cfg["use_kappa"])))
        elif m == "structreg":
            tables.append(structured_regression(summaries, features, seed=cfg["seed"], cv_folds=cfg["cv_folds"]))
    return {"estimates.csv": estimates_csv(tables)}


def _report_files(report) -> dict[str, str]:
    return {"report_groups.csv": report.groups_csv(), "report_methods.csv": report.methods_csv(),
            "report_plot.csv": report.plot_csv()}


def cmd_benchmark(cfg) -> dict[str, str]:
    dataset, assignment = _load(cfg)
    source = DatasetSource(dataset, _scheme(cfg), cfg["blocks"], assignment)
    report = run_benchmark(source, tuple(cfg["methods"]), cfg["trials"], cfg["seed"], cfg["workers"],
                           _bench_config(cfg))
    return _report_files(report)


def cmd_simulate(cfg) -> dict[str, str]:
    source = SynthSource(synth_spec(cfg["synth"] or {}, cfg["seed"]))
    report = run_benchmark(source, tuple(cfg["methods"]), cfg["trials"], cfg["seed"], cfg["workers"],
                           _bench_config(cfg))
    return _report_files(report)


def cmd_loco(cfg) -> dict[str, str]:
    if cfg.get("input") is not None:
        dataset, assignment = _load(cfg)
        source = DatasetSource(dataset, _scheme(cfg), cfg["blocks"], assignment)
    else:
        source = SynthSource(synth_spec(cfg["synth"], cfg["seed"]))
    results = loco_importance(source, cfg["blocks"], tuple(cfg["methods"]), cfg["trials"], cfg["seed"],
                              cfg["workers"], _bench_config(cfg))
    return {"loco.csv": loco_csv(results)}


COMMANDS = {"group": cmd_group, "estimate": cmd_estimate, "benchmark": cmd_benchmark, "simulate": cmd_simulate,
            "loco": cmd_loco}
RUNTIME_ERRORS = (OSError, RecordParseError, SchemaError, DomainError, MissingFieldError, TooFewGroupsError,
                  BenchmarkError, DegenerateGeometryError, ValueError)


def run(argv=None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    sub = parser._subparsers._group_actions[0].choices[ns.command]
    try:
        cfg = resolve_config(ns.command, ns)
    except ConfigError as exc:
        sub.print_usage(sys.stderr)
        print(f"ebbench {ns.command}: error: {exc}", file=sys.stderr)
        return 2
    try:
        files = COMMANDS[ns.command](cfg)
        files["config.json"] = _echo(cfg)
        write_outputs(cfg["output"], files)
    except RUNTIME_ERRORS as exc:
        print(f"ebbench {ns.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


def main(argv=None) -> None:
    sys.exit(run(argv))


if __name__ == "__main__":
    main()

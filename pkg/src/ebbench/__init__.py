"""Empirical Bayes estimation of model performance on small evaluation subgroups."""

__version__ = "0.1.0"

from .core import Dataset, EvalRecord, SubgroupData, ingest_records, partition_by_group, read_records
from .estimators import direct_table, eb_cross_fit, james_stein, structured_regression, synthetic_regression
from .harness import SamplingScheme, SynthSpec, loco_importance, run_benchmark, sample_eval, synth_generate
from .intervals import cva_critical_value, robust_eb_interval, wilson_interval
from .metrics import MetricKind, summarize, summarize_all
from .regression import RegressorSpec, build_features, fit, predict

__all__ = [
    "Dataset", "EvalRecord", "MetricKind", "RegressorSpec", "SamplingScheme", "SubgroupData", "SynthSpec",
    "build_features", "cva_critical_value", "direct_table", "eb_cross_fit", "fit", "ingest_records",
    "james_stein", "loco_importance", "partition_by_group", "predict", "read_records", "robust_eb_interval",
    "run_benchmark", "sample_eval", "structured_regression", "summarize", "summarize_all", "synth_generate",
    "synthetic_regression", "wilson_interval",
]

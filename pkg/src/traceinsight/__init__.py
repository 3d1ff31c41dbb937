"""Trace-driven system analysis: ingest, metric extraction, analysis modules and reports."""

__version__ = "0.1.0"

from .base import AnalysisModule, AnalysisReport, ModuleDescriptor, ModuleResult, ParamSpec, Registry
from .ingest import TraceEvent, StreamConfig, load_trace, normalize_timestamp, write_csv, write_jsonl
from .preprocess import (
    Experiment,
    MetricSeries,
    MetricSpec,
    align,
    extract_metric,
    fill_gaps,
    load_experiment,
    resample,
    save_experiment,
)
from .registry import default_registry
from .report import build_plot, export, render_document

__all__ = [
    "__version__",
    "AnalysisModule",
    "AnalysisReport",
    "Experiment",
    "MetricSeries",
    "MetricSpec",
    "ModuleDescriptor",
    "ModuleResult",
    "ParamSpec",
    "Registry",
    "StreamConfig",
    "TraceEvent",
    "align",
    "build_plot",
    "default_registry",
    "export",
    "extract_metric",
    "fill_gaps",
    "load_experiment",
    "load_trace",
    "normalize_timestamp",
    "render_document",
    "resample",
    "save_experiment",
    "write_csv",
    "write_jsonl",
]

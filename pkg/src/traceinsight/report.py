"""Insight documents, plot specifications and file exports.

Narrative sentences and recommended actions are rendered from fixed
templates keyed by template id / rule id, so every sentence can be traced
back to a structured value in the report envelope.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence
from xml.sax.saxutils import escape

import numpy as np

from .base import REPORT_KINDS, AnalysisReport, dumps_canonical, round_sig
from .correlation import CorrelationReport, matrix_csv
from .errors import IncompatibleKind, UnknownReportKind, UnsupportedFormat
from .preprocess import Experiment, MetricSeries
from .stats import five_number_summary

DOCUMENT_VERSION = "1.0"
PLOT_KINDS = ("xy", "heatmap", "box")

TEMPLATES = {
    "anomaly.flagged": "{metric}: {count} anomalous sample{s_count} flagged by {detector} "
                       "(threshold {threshold}, peak score {max_score}), first at t={first_ts} ns.",
    "anomaly.combined": "Combined PCA view: {count} timestamp{s_count} stand{s_not_count} out across {metrics} metric{s_metrics} "
                        "(peak standardized score {max_score}), first at t={first_ts} ns.",
    "anomaly.none": "No anomalies detected across {metrics} metric{s_metrics}.",
    "leak.none": "All {allocations} tracked allocations were released.",
    "leak.unmatched": "{count} allocation{s_count} ({bytes} bytes) {was_count} never freed, across {sites} call site{s_sites}.",
    "leak.inconclusive": "{count} allocation{s_count} ({bytes} bytes) {was_count} never freed across {sites} call site{s_sites}, "
                         "but memory usage shows no sustained growth.",
    "leak.top_site": "Largest unreleased total: {callsite} with {bytes} bytes.",
    "leak.growth": "{metric} grows at {slope} bytes/s (fit r2 {r2}).",
    "leak.double_free": "{count} double-free event{s_count} observed.",
    "leak.free_without_alloc": "{count} free{s_count} of pointers never allocated in the trace.",
    "correlation.too_few": "Only {metrics} usable metric{s_metrics}; correlation needs at least 2.",
    "correlation.summary": "{significant} of {pairs} metric pairs have |r| >= {threshold}.",
    "correlation.edge": "{a} and {b} move together (r {r}, {b} lags by {lag} samples).",
    "correlation.chain": "Lead/lag order: {chain}.",
    "correlation.cluster": "Metrics moving in lockstep with no clear order: {members}.",
    "changepoint.voted": "System-wide shift at sample {index} (t={ts} ns): "
                         "{fraction} of metrics agree ({metrics}).",
    "changepoint.metric": "{metric}: {count} change point{s_count}; largest mean shift {delta} at sample {index}.",
    "changepoint.none": "No change points found in {metrics} metric{s_metrics}.",
    "capacity.crossing": "{metric} is forecast to go {direction} {threshold} at t={ts} ns ({confidence}).",
    "capacity.violations": "{metric} already violated its threshold in {count} sample{s_count}.",
    "capacity.utilization": "{metric}: mean {mean}, peak {peak}, trend {slope} per sample.",
    "capacity.none": "No metric had enough data for a forecast.",
    "idle.stretch": "{metric}: {count} idle stretch{es_count} covering {fraction} of the trace; "
                    "longest from t={start} to t={end} ns.",
    "idle.imbalance": "{group}: load imbalance cv {cv} across {cores} cores.",
    "idle.none": "No long idle stretches in {metrics} metric{s_metrics}.",
}

ACTION_TEMPLATES = {
    "SCALE_UP": "Scale up {metric} before t={deadline} ns (forecast goes {direction} {threshold}).",
    "MONITOR": "Monitor {metric}; possible violation near t={near} ns ({direction} {threshold}).",
    "DOWNSCALE_CANDIDATE": "{metric} is a candidate for downscaling (mean {mean}).",
    "NO_ACTION": "No action needed for {metric}.",
    "CONSOLIDATE": "Consolidate {metric}: idle for {idle_fraction} of the trace.",
    "REBALANCE": "Rebalance work across {group} (per-core cv {cv}).",
    "INVESTIGATE": "Inspect {metric} around t={first_ts} ns ({count} flagged sample{s_count}).",
    "FIX_LEAK": "Fix unreleased allocations at {callsite} ({bytes} bytes).",
    "REVIEW_ALLOCATIONS": "Review allocations at {callsite} ({bytes} bytes held at trace end).",
    "INVESTIGATE_LEADER": "Start root-cause analysis at {metric} (order {chain}).",
    "CORRELATE_WITH_DEPLOYMENTS": "Check what changed at t={ts} ns (shift seen in {metrics}).",
}


def format_value(value: Any) -> str:
    """Display rule: ints verbatim, floats at 4 significant digits."""
    if isinstance(value, bool):
        return "yes" if value else "no"
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        return repr(round_sig(value))
    if value is None:
        return "n/a"
    return str(value)


def _fill(template: str, values: Mapping[str, Any]) -> str:
    out = {k: format_value(v) for k, v in values.items()}
    # plural helpers: {s_count}, {es_count}, {s_not_count}, {was_count}
    for k, v in values.items():
        if isinstance(v, (int, float)) and not isinstance(v, bool):
            one = v == 1
            out[f"s_{k}"] = "" if one else "s"
            out[f"es_{k}"] = "" if one else "es"
            out[f"s_not_{k}"] = "s" if one else ""
            out[f"was_{k}"] = "was" if one else "were"
    return template.format(**out)


def render_sentence(seed: Mapping[str, Any]) -> str:
    template = TEMPLATES.get(seed.get("template", ""))
    values = seed.get("values", {})
    if template is None:
        body = ", ".join(f"{k}={format_value(v)}" for k, v in sorted(values.items()))
        return f"{seed.get('template', 'finding')}: {body}" if body else str(seed.get("template"))
    try:
        return _fill(template, values)
    except KeyError:
        body = ", ".join(f"{k}={format_value(v)}" for k, v in sorted(values.items()))
        return f"{seed['template']}: {body}"


def render_action(action: Mapping[str, Any]) -> str:
    rule = action.get("rule", "")
    values = {k: (round_sig(v) if isinstance(v, float) else v)
              for k, v in action.get("values", {}).items()}
    template = ACTION_TEMPLATES.get(rule)
    if template is not None:
        try:
            return _fill(template, values)
        except KeyError:
            pass
    body = ", ".join(f"{k}={format_value(v)}" for k, v in sorted(values.items()))
    return f"{rule}: {body}"


def _count(n: int, singular: str, plural: str | None = None) -> str:
    return f"{n} {singular if n == 1 else (plural or singular + 's')}"


def headline(report: AnalysisReport) -> str:
    f = report.findings
    kind = report.kind
    if kind == "anomaly":
        n = int(f.get("anomaly_count", 0))
        combined = len((f.get("combined") or {}).get("top_k", []))
        if n == 0 and combined == 0:
            return "no anomalies detected"
        text = f"{_count(n, 'anomalous sample')} detected"
        return text + (f", {combined} in the combined view" if combined else "")
    if kind == "leak":
        verdict = f.get("verdict", "no_leak")
        if verdict == "leak_suspected":
            return f"memory leak suspected ({f.get('unmatched_count', 0)} unreleased allocations)"
        if verdict == "inconclusive":
            return "unreleased allocations without memory growth"
        return "no memory leak detected"
    if kind == "correlation":
        sig = sum(1 for e in f.get("edges", []) if e.get("significant"))
        return f"{sig} of {f.get('edge_count', 0)} metric pairs strongly related"
    if kind == "changepoint":
        k = len(f.get("voted", []))
        return "no system-wide shifts detected" if k == 0 else f"{_count(k, 'system-wide shift')} detected"
    if kind == "capacity":
        k = sum(1 for fc in f.get("forecasts", []) for c in fc.get("crossings", [])
                if c.get("confidence") == "certain")
        return "no threshold crossings predicted" if k == 0 else f"{_count(k, 'threshold crossing')} predicted"
    if kind == "idle":
        k = sum(len(v) for v in f.get("intervals", {}).values())
        return "no long idle stretches" if k == 0 else f"{_count(k, 'idle stretch', 'idle stretches')} found"
    if kind == "custom":
        return f"results from {report.module}"
    raise UnknownReportKind(f"unknown report kind {kind!r}")


@dataclass
class Section:
    module: str
    kind: str
    headline: str
    findings: list[str]
    confidence: float
    recommended_actions: list[str]
    plot_refs: list[str] = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        return {
            "module": self.module,
            "kind": self.kind,
            "headline": self.headline,
            "confidence": self.confidence,
            "findings": self.findings,
            "recommended_actions": self.recommended_actions,
            "plot_refs": self.plot_refs,
        }


@dataclass
class InsightDocument:
    experiment_id: str
    generated_at: str | None
    sections: list[Section]
    reports: list[AnalysisReport]

    def to_markdown(self) -> str:
        lines = [f"# Insight report: {self.experiment_id}", ""]
        if self.generated_at:
            lines += [f"Generated: {self.generated_at}", ""]
        for s in self.sections:
            lines += [f"## {s.module}: {s.headline}", "", f"Confidence: {format_value(s.confidence)}", ""]
            lines.append("Findings:")
            lines += [f"- {text}" for text in s.findings] or ["- none"]
            lines += ["", "Recommended actions:"]
            lines += [f"- {text}" for text in s.recommended_actions] or ["- none"]
            if s.plot_refs:
                lines += ["", "Plots:"]
                lines += [f"- ![{ref}]({ref})" for ref in s.plot_refs]
            lines.append("")
        return "\n".join(lines)

    def to_dict(self) -> dict[str, Any]:
        return {
            "document_version": DOCUMENT_VERSION,
            "experiment_id": self.experiment_id,
            "generated_at": self.generated_at,
            "sections": [s.to_dict() for s in self.sections],
            "reports": [r.to_envelope() for r in self.reports],
        }


def _coerce_report(r: AnalysisReport | Mapping[str, Any]) -> AnalysisReport:
    if isinstance(r, AnalysisReport):
        return r
    return AnalysisReport.from_envelope(r)


def build_document(
    reports: Sequence[AnalysisReport | Mapping[str, Any]],
    experiment_id: str = "",
    generated_at: str | None = None,
    plot_refs: Mapping[str, Sequence[str]] | None = None,
) -> InsightDocument:
    if not reports:
        raise ValueError("a document needs at least one report")
    items = sorted((_coerce_report(r) for r in reports), key=lambda r: (r.module, r.kind))
    plot_refs = plot_refs or {}
    sections = []
    for r in items:
        if r.kind not in REPORT_KINDS:
            raise UnknownReportKind(r.kind)
        sections.append(Section(
            module=r.module,
            kind=r.kind,
            headline=headline(r),
            findings=[render_sentence(seed) for seed in r.narrative_seed],
            confidence=round_sig(r.confidence),
            recommended_actions=[render_action(a) for a in r.findings.get("recommendations", [])],
            plot_refs=list(plot_refs.get(r.module, [])),
        ))
    return InsightDocument(experiment_id, generated_at, sections, items)


def render_document(
    reports: Sequence[AnalysisReport | Mapping[str, Any]],
    target: str = "markdown",
    experiment_id: str = "",
    generated_at: str | None = None,
    plot_refs: Mapping[str, Sequence[str]] | None = None,
) -> bytes:
    """Render reports as markdown or JSON; sections are ordered by module name."""
    doc = build_document(reports, experiment_id, generated_at, plot_refs)
    if target in ("markdown", "md"):
        return doc.to_markdown().encode("utf-8")
    if target == "json":
        return dumps_canonical(doc.to_dict()).encode("utf-8")
    raise UnsupportedFormat(f"unknown document target {target!r}")


# ---------------------------------------------------------------------------
# plots


@dataclass
class PlotSpec:
    kind: str
    title: str
    payload: dict[str, Any]
    annotations: list[dict[str, Any]] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.kind not in PLOT_KINDS:
            raise IncompatibleKind(f"unknown plot kind {self.kind!r}")
        if self.kind == "xy":
            for layer in self.payload.get("series", []):
                if len(layer["t"]) != len(layer["values"]):
                    raise ValueError(f"xy layer {layer['name']!r} has mismatched lengths")
        elif self.kind == "heatmap":
            labels, matrix = self.payload["labels"], self.payload["matrix"]
            if len(matrix) != len(labels) or any(len(row) != len(labels) for row in matrix):
                raise ValueError("heatmap matrix must be square and match its labels")
        elif not self.payload.get("boxes"):
            raise ValueError("box plot needs at least one series")

    def to_dict(self) -> dict[str, Any]:
        return {"kind": self.kind, "title": self.title, "payload": self.payload,
                "annotations": self.annotations}


def _xy_layer(name: str, t: Sequence[int], values: Sequence[float]) -> dict[str, Any]:
    return {"name": name, "t": [int(v) for v in t], "values": [float(v) for v in values]}


def _series_layer(s: MetricSeries) -> dict[str, Any]:
    return _xy_layer(s.name, s.times().tolist(), s.values.tolist())


def _report_xy(report: AnalysisReport, experiment: Experiment | None, metric: str | None) -> PlotSpec:
    f = report.findings
    if experiment is None:
        raise IncompatibleKind(f"an xy plot of a {report.kind} report needs the experiment")

    def series_for(name: str) -> MetricSeries:
        if name not in experiment.series:
            raise IncompatibleKind(f"metric {name!r} is not in experiment {experiment.id!r}")
        return experiment.series[name]

    if report.kind == "anomaly":
        if metric == "<combined>":
            comb = f.get("combined")
            if not comb:
                raise IncompatibleKind("report has no combined scores")
            t = comb.get("timestamps") or (experiment.t0 + np.arange(experiment.length) * experiment.dt).tolist()
            layer = _xy_layer("combined score", t, comb["combined_scores"])
            ann = [{"type": "marker", "index": i, "t": layer["t"][i],
                    "value": layer["values"][i]} for i in comb["top_k"]]
            ann.append({"type": "hline", "value": comb.get("threshold", 3.0), "label": "threshold"})
            return PlotSpec("xy", "combined anomaly score", {"series": [layer]}, ann)
        entries = f.get("metrics", [])
        entry = next((e for e in entries if e["metric"] == metric), None) if metric else (
            next((e for e in entries if e["indices"]), entries[0] if entries else None))
        if entry is None:
            raise IncompatibleKind("no per-metric anomaly finding to plot")
        s = series_for(entry["metric"])
        ann = [{"type": "marker", "index": i, "t": t, "value": float(s.values[i]), "score": sc}
               for i, t, sc in zip(entry["indices"], entry["timestamps"], entry["scores"])]
        return PlotSpec("xy", f"{s.name} anomalies ({entry['detector']})",
                        {"series": [_series_layer(s)]}, ann)
    if report.kind == "changepoint":
        names = [metric] if metric else sorted(f.get("per_metric", {}))
        layers = [_series_layer(series_for(m)) for m in names]
        ann = [{"type": "vline", "t": cp["ts"], "label": f"{m} change"}
               for m in names for cp in f.get("per_metric", {}).get(m, [])]
        ann += [{"type": "vline", "t": v["ts"], "label": "voted shift", "emphasis": True}
                for v in f.get("voted", [])]
        return PlotSpec("xy", "change points", {"series": layers}, ann)
    if report.kind == "capacity":
        forecasts = f.get("forecasts", [])
        fc = next((x for x in forecasts if x["metric"] == metric), None) if metric else (
            forecasts[0] if forecasts else None)
        if fc is None:
            raise IncompatibleKind("no forecast to plot")
        s = series_for(fc["metric"])
        dt = s.dt
        ft = [fc["forecast_t0"] + i * dt for i in range(len(fc["point_forecast"]))]
        layers = [_series_layer(s), _xy_layer("forecast", ft, fc["point_forecast"])]
        ann = [{"type": "band", "t": ft, "low": fc["band_low"], "high": fc["band_high"]}]
        ann += [{"type": "hline", "value": th["value"], "label": f"threshold ({th['direction']})"}
                for th in fc["thresholds"]]
        ann += [{"type": "vline", "t": c["predicted_time"], "label": f"crossing ({c['confidence']})"}
                for c in fc["crossings"] if c["predicted_time"] is not None]
        return PlotSpec("xy", f"{s.name} capacity forecast", {"series": layers}, ann)
    if report.kind == "idle":
        intervals = f.get("intervals", {})
        names = [metric] if metric else sorted(intervals)
        layers = [_series_layer(series_for(m)) for m in names]
        ann = [{"type": "span", "start": iv["start"], "end": iv["end"], "label": f"{m} idle"}
               for m in names for iv in intervals.get(m, [])]
        ann.append({"type": "hline", "value": f.get("idle_threshold", 0.0), "label": "idle threshold"})
        return PlotSpec("xy", "idle stretches", {"series": layers}, ann)
    if report.kind == "leak":
        name = metric or f.get("memory_metric")
        if not name:
            raise IncompatibleKind("leak report has no memory series to plot")
        return PlotSpec("xy", f"{name} memory usage", {"series": [_series_layer(series_for(name))]})
    raise IncompatibleKind(f"no xy plot for {report.kind} reports")


def build_plot(
    source: Any,
    kind: str,
    *,
    experiment: Experiment | None = None,
    metric: str | None = None,
    labels: Sequence[str] | None = None,
    title: str | None = None,
) -> PlotSpec:
    """Build a plot specification from a series, a set of series or a report."""
    if kind not in PLOT_KINDS:
        raise IncompatibleKind(f"unknown plot kind {kind!r}")
    if kind == "heatmap":
        if isinstance(source, CorrelationReport):
            names, matrix = source.metrics, np.asarray(source.matrix)
        elif isinstance(source, AnalysisReport) and source.kind == "correlation":
            names, matrix = source.findings.get("metrics", []), np.asarray(source.findings.get("matrix", []))
        elif isinstance(source, np.ndarray) and source.ndim == 2:
            matrix = source
            names = list(labels) if labels is not None else [str(i) for i in range(len(source))]
        else:
            raise IncompatibleKind("heatmap needs a correlation matrix")
        if matrix.size == 0:
            matrix = np.zeros((len(names), len(names)))
        return PlotSpec("heatmap", title or "correlation (lag 0)",
                        {"labels": list(names), "matrix": matrix.tolist()})
    if kind == "box":
        if isinstance(source, MetricSeries):
            items = [(source.name, source.values)]
        elif isinstance(source, Experiment):
            items = [(n, s.values) for n, s in source.series.items()]
        elif isinstance(source, Mapping):
            items = [(n, np.asarray(v, dtype=np.float64)) for n, v in source.items()]
        elif isinstance(source, (list, tuple)) and source and all(isinstance(s, MetricSeries) for s in source):
            items = [(s.name, s.values) for s in source]
        elif isinstance(source, (list, tuple, np.ndarray)) and len(source) and np.ndim(source) == 1:
            items = [("series", np.asarray(source, dtype=np.float64))]
        else:
            raise IncompatibleKind("box plot needs at least one series")
        boxes = [dict(name=n, **five_number_summary(v)) for n, v in items if np.any(~np.isnan(v))]
        if not boxes:
            raise IncompatibleKind("box plot needs at least one non-empty series")
        return PlotSpec("box", title or "distribution", {"boxes": boxes})
    # xy
    if isinstance(source, MetricSeries):
        return PlotSpec("xy", title or source.name, {"series": [_series_layer(source)]})
    if isinstance(source, (list, tuple)) and all(isinstance(s, MetricSeries) for s in source):
        return PlotSpec("xy", title or "series", {"series": [_series_layer(s) for s in source]})
    if isinstance(source, AnalysisReport):
        spec = _report_xy(source, experiment, metric)
        if title:
            spec.title = title
        return spec
    raise IncompatibleKind(f"cannot build an xy plot from {type(source).__name__}")


# ---------------------------------------------------------------------------
# SVG rendering

_W, _H = 720, 420
_ML, _MR, _MT, _MB = 70, 20, 40, 50
_PALETTE = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f")


def _f(x: float) -> str:
    return f"{x:.2f}"


def _svg_open(title: str) -> list[str]:
    return [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" '
        f'viewBox="0 0 {_W} {_H}" font-family="sans-serif" font-size="11">',
        f'<rect x="0" y="0" width="{_W}" height="{_H}" fill="#ffffff"/>',
        f'<text x="{_W / 2:.0f}" y="22" text-anchor="middle" font-size="14">{escape(title)}</text>',
    ]


def _axes(parts: list[str], x_lo, x_hi, y_lo, y_hi) -> None:
    x0, x1, y0, y1 = _ML, _W - _MR, _H - _MB, _MT
    parts.append(f'<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="#000000"/>')
    parts.append(f'<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="#000000"/>')
    if x_lo is not None:
        parts.append(f'<text x="{x0}" y="{y0 + 16}" text-anchor="start">{escape(format_value(float(x_lo)))}</text>')
        parts.append(f'<text x="{x1}" y="{y0 + 16}" text-anchor="end">{escape(format_value(float(x_hi)))}</text>')
        parts.append(f'<text x="{x0 - 6}" y="{y0}" text-anchor="end">{escape(format_value(float(y_lo)))}</text>')
        parts.append(f'<text x="{x0 - 6}" y="{y1 + 4}" text-anchor="end">{escape(format_value(float(y_hi)))}</text>')


def _svg_xy(spec: PlotSpec) -> list[str]:
    parts = _svg_open(spec.title)
    layers = [l for l in spec.payload.get("series", []) if l["t"]]
    xs: list[float] = []
    ys: list[float] = []
    for layer in layers:
        xs += layer["t"]
        ys += [v for v in layer["values"] if v == v]
    for a in spec.annotations:
        if a["type"] == "hline":
            ys.append(a["value"])
        elif a["type"] == "band":
            xs += a["t"]
            ys += a["low"] + a["high"]
    if not xs or not ys:
        _axes(parts, None, None, None, None)
        parts.append("</svg>")
        return parts
    x_lo, x_hi = min(xs), max(xs)
    y_lo, y_hi = min(ys), max(ys)
    if x_hi == x_lo:
        x_hi = x_lo + 1
    if y_hi == y_lo:
        y_lo, y_hi = y_lo - 1, y_hi + 1
    pw, ph = _W - _ML - _MR, _H - _MT - _MB

    def px(x: float) -> float:
        return _ML + (x - x_lo) / (x_hi - x_lo) * pw

    def py(y: float) -> float:
        return _H - _MB - (y - y_lo) / (y_hi - y_lo) * ph

    _axes(parts, x_lo, x_hi, y_lo, y_hi)
    for a in spec.annotations:
        if a["type"] == "span":
            parts.append(f'<rect x="{_f(px(a["start"]))}" y="{_MT}" width="{_f(px(a["end"]) - px(a["start"]))}" '
                         f'height="{ph}" fill="#bbbbbb" fill-opacity="0.4"/>')
        elif a["type"] == "band":
            upper = " ".join(f"{_f(px(t))},{_f(py(v))}" for t, v in zip(a["t"], a["high"]))
            lower = " ".join(f"{_f(px(t))},{_f(py(v))}" for t, v in zip(reversed(a["t"]), reversed(a["low"])))
            parts.append(f'<polygon points="{upper} {lower}" fill="#ff7f0e" fill-opacity="0.2" stroke="none"/>')
    for i, layer in enumerate(layers):
        color = _PALETTE[i % len(_PALETTE)]
        pts = " ".join(f"{_f(px(t))},{_f(py(v))}" for t, v in zip(layer["t"], layer["values"]) if v == v)
        parts.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.2">'
                     f'<title>{escape(layer["name"])}</title></polyline>')
        parts.append(f'<text x="{_W - _MR}" y="{_MT + 12 * (i + 1)}" text-anchor="end" fill="{color}">'
                     f'{escape(layer["name"])}</text>')
    for a in spec.annotations:
        if a["type"] == "marker":
            parts.append(f'<circle cx="{_f(px(a["t"]))}" cy="{_f(py(a["value"]))}" r="3.5" '
                         f'fill="none" stroke="#d62728" stroke-width="1.5"/>')
        elif a["type"] == "vline":
            width = "2" if a.get("emphasis") else "1"
            parts.append(f'<line x1="{_f(px(a["t"]))}" y1="{_MT}" x2="{_f(px(a["t"]))}" y2="{_H - _MB}" '
                         f'stroke="#9467bd" stroke-width="{width}" stroke-dasharray="4,3">'
                         f'<title>{escape(a.get("label", ""))}</title></line>')
        elif a["type"] == "hline":
            parts.append(f'<line x1="{_ML}" y1="{_f(py(a["value"]))}" x2="{_W - _MR}" y2="{_f(py(a["value"]))}" '
                         f'stroke="#d62728" stroke-dasharray="6,3">'
                         f'<title>{escape(a.get("label", ""))}</title></line>')
    parts.append("</svg>")
    return parts


def _heat_color(r: float) -> str:
    r = max(-1.0, min(1.0, r))
    if r >= 0:
        g = int(round(255 * (1 - r)))
        return f"#ff{g:02x}{g:02x}"
    g = int(round(255 * (1 + r)))
    return f"#{g:02x}{g:02x}ff"


def _svg_heatmap(spec: PlotSpec) -> list[str]:
    parts = _svg_open(spec.title)
    labels = spec.payload["labels"]
    matrix = spec.payload["matrix"]
    n = len(labels)
    if n == 0:
        parts.append("</svg>")
        return parts
    left, top = 120, 50
    cell = min((_W - left - 20) / n, (_H - top - 20) / n)
    for i, row in enumerate(matrix):
        y = top + i * cell
        parts.append(f'<text x="{left - 4}" y="{_f(y + cell / 2 + 4)}" text-anchor="end">{escape(labels[i])}</text>')
        for j, r in enumerate(row):
            x = left + j * cell
            parts.append(f'<rect x="{_f(x)}" y="{_f(y)}" width="{_f(cell)}" height="{_f(cell)}" '
                         f'fill="{_heat_color(r)}" stroke="#ffffff"><title>{escape(labels[i])} / '
                         f'{escape(labels[j])}: {format_value(float(r))}</title></rect>')
    parts.append("</svg>")
    return parts


def _svg_box(spec: PlotSpec) -> list[str]:
    parts = _svg_open(spec.title)
    boxes = spec.payload["boxes"]
    lo = min(b["min"] for b in boxes)
    hi = max(b["max"] for b in boxes)
    if hi == lo:
        lo, hi = lo - 1, hi + 1
    ph = _H - _MT - _MB
    pw = _W - _ML - _MR

    def py(y: float) -> float:
        return _H - _MB - (y - lo) / (hi - lo) * ph

    _axes(parts, 0, len(boxes), lo, hi)
    slot = pw / len(boxes)
    for i, b in enumerate(boxes):
        cx = _ML + slot * (i + 0.5)
        half = min(30.0, slot * 0.3)
        parts.append(f'<line x1="{_f(cx)}" y1="{_f(py(b["min"]))}" x2="{_f(cx)}" y2="{_f(py(b["max"]))}" stroke="#000000"/>')
        parts.append(f'<rect x="{_f(cx - half)}" y="{_f(py(b["q3"]))}" width="{_f(2 * half)}" '
                     f'height="{_f(py(b["q1"]) - py(b["q3"]))}" fill="#aec7e8" stroke="#000000"/>')
        parts.append(f'<line x1="{_f(cx - half)}" y1="{_f(py(b["median"]))}" x2="{_f(cx + half)}" '
                     f'y2="{_f(py(b["median"]))}" stroke="#d62728" stroke-width="2"/>')
        parts.append(f'<text x="{_f(cx)}" y="{_H - _MB + 30}" text-anchor="middle">{escape(b["name"])}</text>')
    parts.append("</svg>")
    return parts


def render_svg(spec: PlotSpec) -> str:
    renderer = {"xy": _svg_xy, "heatmap": _svg_heatmap, "box": _svg_box}[spec.kind]
    return "\n".join(renderer(spec)) + "\n"


def _plot_csv(spec: PlotSpec) -> str:
    if spec.kind == "xy":
        lines = ["series,t,value"]
        for layer in spec.payload.get("series", []):
            name = layer["name"].replace(",", ";")
            lines += [f"{name},{t},{v!r}" for t, v in zip(layer["t"], layer["values"])]
        return "\n".join(lines) + "\n"
    if spec.kind == "heatmap":
        labels = spec.payload["labels"]
        lines = ["," + ",".join(labels)]
        for name, row in zip(labels, spec.payload["matrix"]):
            lines.append(name + "," + ",".join(repr(float(v)) for v in row))
        return "\n".join(lines) + "\n"
    lines = ["series,min,q1,median,q3,max"]
    for b in spec.payload["boxes"]:
        lines.append(",".join([b["name"]] + [repr(float(b[k])) for k in ("min", "q1", "median", "q3", "max")]))
    return "\n".join(lines) + "\n"


def export(obj: PlotSpec | AnalysisReport | CorrelationReport, fmt: str) -> bytes:
    """Serialize a plot or report as ``svg``, ``csv`` or ``json`` bytes."""
    if fmt not in ("svg", "csv", "json"):
        raise UnsupportedFormat(f"unknown export format {fmt!r}")
    if isinstance(obj, PlotSpec):
        if fmt == "svg":
            return render_svg(obj).encode("utf-8")
        if fmt == "csv":
            return _plot_csv(obj).encode("utf-8")
        return dumps_canonical(obj.to_dict()).encode("utf-8")
    if fmt == "svg":
        raise UnsupportedFormat("svg export is only available for plots")
    if isinstance(obj, CorrelationReport):
        if fmt == "csv":
            return matrix_csv(obj).encode("utf-8")
        return dumps_canonical(obj.to_dict()).encode("utf-8")
    if isinstance(obj, AnalysisReport):
        if fmt == "json":
            return obj.to_json().encode("utf-8")
        if obj.kind == "correlation" and obj.findings.get("matrix"):
            return export(build_plot(obj, "heatmap"), "csv")
        raise UnsupportedFormat(f"csv export is not defined for {obj.kind} reports")
    raise UnsupportedFormat(f"cannot export {type(obj).__name__}")


def load_envelope(text: str | bytes) -> AnalysisReport:
    return AnalysisReport.from_envelope(json.loads(text))

import json
import re
import statistics
import xml.etree.ElementTree as ET
from importlib import resources

import jsonschema
import numpy as np
import pytest

from conftest import make_experiment, make_series
from traceinsight.base import AnalysisReport
from traceinsight.correlation import correlation_matrix
from traceinsight.errors import IncompatibleKind, UnknownReportKind, UnsupportedFormat
from traceinsight.registry import default_registry
from traceinsight.report import (
    PlotSpec,
    build_document,
    build_plot,
    export,
    format_value,
    headline,
    load_envelope,
    render_document,
)

SCHEMA = json.loads(resources.files("traceinsight").joinpath("schemas/report_envelope.json").read_text())


@pytest.fixture(scope="module")
def spiky():
    rng = np.random.default_rng(21)
    n = 200
    cpu = 20 + rng.normal(0, 1, n)
    cpu[[40, 90, 150]] = 90
    mem = 1000 + 5 * np.arange(n) + rng.normal(0, 3, n)
    exp = make_experiment({"cpu": cpu, "mem": mem, "io": rng.normal(50, 2, n)}, units={"mem": "bytes"})
    reg = default_registry()
    reports = {name: reg.run(name, exp, {"detector": "zscore"} if name == "anomaly" else {})
               for name in reg.names()}
    return exp, reports


class TestDocument:
    def test_empty_anomaly_headline(self):
        exp = make_experiment({"a": np.full(50, 2.0)})
        report = default_registry().run("anomaly", exp)
        doc = build_document([report], "e")
        assert len(doc.sections) == 1 and doc.sections[0].headline == "no anomalies detected"
        assert "## anomaly: no anomalies detected" in render_document([report]).decode()

    def test_section_order(self, spiky):
        _, reports = spiky
        doc = build_document([reports["capacity"], reports["anomaly"]])
        assert [s.module for s in doc.sections] == ["anomaly", "capacity"]

    def test_every_section_traces_to_report(self, spiky):
        _, reports = spiky
        doc = json.loads(render_document(list(reports.values()), "json", "exp"))
        assert [s["module"] for s in doc["sections"]] == [r["module"]["name"] for r in doc["reports"]]
        assert doc["document_version"] == "1.0" and doc["generated_at"] is None

    def test_deterministic(self, spiky):
        _, reports = spiky
        items = list(reports.values())
        assert render_document(items, "md", "x") == render_document(items[::-1], "md", "x")
        assert render_document(items, "json", "x") == render_document(items, "json", "x")

    def test_markdown_numbers_in_json(self, spiky):
        _, reports = spiky
        items = list(reports.values())
        md = render_document(items, "md", "exp1").decode()
        payload = render_document(items, "json", "exp1").decode()
        body = md.split("\n", 1)[1]
        numbers = set(re.findall(r"(?<![\w.])-?\d+(?:\.\d+)?(?:e[+-]?\d+)?", body))
        assert numbers
        missing = [n for n in numbers if n not in payload]
        assert missing == []

    def test_numbers_rounded(self):
        assert format_value(3.14159265) == "3.142"
        assert format_value(123456.7) == "123500.0"
        assert format_value(7) == "7" and format_value(None) == "n/a" and format_value(True) == "yes"

    def test_plot_refs_listed(self, spiky):
        _, reports = spiky
        md = render_document([reports["anomaly"]], plot_refs={"anomaly": ["plots/a.svg"]}).decode()
        assert "![plots/a.svg](plots/a.svg)" in md

    def test_envelope_input(self, spiky):
        _, reports = spiky
        env = json.loads(reports["idle"].to_json())
        assert render_document([env]) == render_document([reports["idle"]])

    def test_errors(self, spiky):
        _, reports = spiky
        with pytest.raises(UnsupportedFormat):
            render_document([reports["idle"]], "html")
        with pytest.raises(ValueError):
            render_document([])
        bad = AnalysisReport("custom", "x", "1", {}, {}, 0.5)
        bad.kind = "mystery"
        with pytest.raises(UnknownReportKind):
            headline(bad)

    def test_custom_report_headline(self):
        report = AnalysisReport("custom", "noop", "1", {}, {}, 0.5)
        assert headline(report) == "results from noop"


class TestPlots:
    def test_heatmap(self, rng):
        corr = correlation_matrix({m: rng.normal(size=40) for m in "abc"}, max_lag=2)
        spec = build_plot(corr, "heatmap")
        assert spec.payload["labels"] == ["a", "b", "c"]
        assert np.array(spec.payload["matrix"]).shape == (3, 3)
        rows = export(spec, "csv").decode().splitlines()
        assert len(rows) == 4 and all(len(r.split(",")) == 4 for r in rows)
        assert rows[0] == ",a,b,c" and [r.split(",")[0] for r in rows[1:]] == ["a", "b", "c"]

    def test_heatmap_from_report(self, spiky):
        _, reports = spiky
        spec = build_plot(reports["correlation"], "heatmap")
        assert spec.payload["labels"] == ["cpu", "io", "mem"]
        assert export(reports["correlation"], "csv") == export(spec, "csv")

    def test_box_type7(self):
        data = list(range(1, 9)) + [100]
        (box,) = build_plot(make_series(data, "s"), "box").payload["boxes"]
        q1, med, q3 = statistics.quantiles(data, n=4, method="inclusive")
        assert (box["min"], box["q1"], box["median"], box["q3"], box["max"]) == (1, q1, med, q3, 100)
        assert (box["q1"], box["median"]) == (3.0, 5.0)

    def test_box_many(self, spiky):
        exp, _ = spiky
        spec = build_plot(exp, "box")
        assert [b["name"] for b in spec.payload["boxes"]] == ["cpu", "io", "mem"]
        assert export(spec, "csv").decode().splitlines()[0] == "series,min,q1,median,q3,max"

    def test_anomaly_markers(self, spiky):
        exp, reports = spiky
        spec = build_plot(reports["anomaly"], "xy", experiment=exp, metric="cpu")
        entry = next(e for e in reports["anomaly"].findings["metrics"] if e["metric"] == "cpu")
        markers = [a for a in spec.annotations if a["type"] == "marker"]
        assert [m["index"] for m in markers] == entry["indices"] == [40, 90, 150]

    def test_report_xy_kinds(self, spiky):
        exp, reports = spiky
        for name in ("changepoint", "capacity", "idle", "leak"):
            spec = build_plot(reports[name], "xy", experiment=exp)
            ET.fromstring(export(spec, "svg"))
        combined = build_plot(reports["anomaly"], "xy", experiment=exp, metric="<combined>")
        assert any(a["type"] == "hline" for a in combined.annotations)

    def test_xy_needs_experiment(self, spiky):
        _, reports = spiky
        with pytest.raises(IncompatibleKind):
            build_plot(reports["anomaly"], "xy")

    def test_empty_xy_svg(self):
        svg = export(PlotSpec("xy", "empty", {"series": []}), "svg").decode()
        root = ET.fromstring(svg)
        assert root.tag.endswith("svg")
        assert "<line" in svg

    def test_svg_escapes_text(self):
        svg = export(PlotSpec("xy", "a < b & c", {"series": []}), "svg")
        assert "a &lt; b &amp; c" in ET.tostring(ET.fromstring(svg), encoding="unicode")

    def test_svg_deterministic(self, spiky):
        exp, reports = spiky
        a = export(build_plot(reports["capacity"], "xy", experiment=exp), "svg")
        b = export(build_plot(reports["capacity"], "xy", experiment=exp), "svg")
        assert a == b

    def test_incompatible(self, spiky):
        exp, reports = spiky
        with pytest.raises(IncompatibleKind):
            build_plot(make_series([1.0, 2.0]), "heatmap")
        with pytest.raises(IncompatibleKind):
            build_plot([], "box")
        with pytest.raises(IncompatibleKind):
            build_plot(exp, "pie")
        with pytest.raises(IncompatibleKind):
            PlotSpec("pie", "t", {})


class TestExport:
    def test_svg_only_for_plots(self, spiky):
        _, reports = spiky
        with pytest.raises(UnsupportedFormat):
            export(reports["anomaly"], "svg")
        with pytest.raises(UnsupportedFormat):
            export(reports["anomaly"], "csv")
        with pytest.raises(UnsupportedFormat):
            export(build_plot(make_series([1.0]), "xy"), "png")

    def test_envelopes_validate(self, spiky):
        _, reports = spiky
        for report in reports.values():
            env = json.loads(export(report, "json"))
            jsonschema.validate(env, SCHEMA)
            assert load_envelope(export(report, "json")).to_json() == report.to_json()

    def test_schema_rejects_extra_keys(self, spiky):
        _, reports = spiky
        env = json.loads(reports["leak"].to_json())
        env["extra"] = 1
        with pytest.raises(jsonschema.ValidationError):
            jsonschema.validate(env, SCHEMA)

    def test_xy_csv(self):
        spec = build_plot(make_series([1.5, 2.5], "m", t0=10, dt=5), "xy")
        assert export(spec, "csv").decode() == "series,t,value\nm,10,1.5\nm,15,2.5\n"

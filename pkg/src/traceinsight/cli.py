"""Command-line workflow: import traces, build experiments, analyze, report.

Workspace layout (root chosen by ``--workspace``, ``$TRACEINSIGHT_WORKSPACE``
or the current directory)::

    config.json                 stream offsets and default module parameters
    traces/<name>.jsonl         normalized events (ns timestamps, offsets applied)
    traces/<name>.quality.json  ingest quality report
    experiments/<id>/           saved experiment (manifest, series, events)
    reports/<exp>.<module>.json analysis envelopes
    reports/<exp>.report.md     rendered insight document (or .report.json)
    reports/plots/              SVG plots referenced from documents
"""

from __future__ import annotations

import argparse
import json
import os
import shutil
import sys
import tempfile
from pathlib import Path
from typing import Any, Sequence

from filelock import FileLock

from . import __version__
from .base import AnalysisReport, Registry
from .errors import IncompatibleKind, InvalidParameter, TraceInsightError, UnknownModule
from .ingest import StreamConfig, load_stream_configs, load_trace, write_jsonl
from .preprocess import Experiment, MetricSpec, extract_metric, load_experiment, save_experiment
from .registry import default_registry
from .report import build_plot, export, render_document
from .synthgen import ScenarioSpec, generate

ENV_WORKSPACE = "TRACEINSIGHT_WORKSPACE"
EXIT_OK, EXIT_USER, EXIT_INTERNAL = 0, 1, 2


class UsageError(Exception):
    """Bad command line or workspace state caused by the caller."""


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse exits with 2 by default
        raise UsageError(f"{self.prog}: {message}")


class Workspace:
    def __init__(self, root: str | os.PathLike) -> None:
        self.root = Path(root).resolve()

    @property
    def traces(self) -> Path:
        return self.root / "traces"

    @property
    def experiments(self) -> Path:
        return self.root / "experiments"

    @property
    def reports(self) -> Path:
        return self.root / "reports"

    @property
    def config_path(self) -> Path:
        return self.root / "config.json"

    def ensure(self) -> None:
        for d in (self.traces, self.experiments, self.reports):
            d.mkdir(parents=True, exist_ok=True)

    def lock(self) -> FileLock:
        self.root.mkdir(parents=True, exist_ok=True)
        return FileLock(str(self.root / ".lock"), timeout=30)

    def config(self) -> dict[str, Any]:
        if not self.config_path.exists():
            return {}
        try:
            data = json.loads(self.config_path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise UsageError(f"{self.config_path}: invalid JSON ({exc.msg})") from None
        if not isinstance(data, dict):
            raise UsageError(f"{self.config_path}: expected a JSON object")
        return data

    def experiment_dir(self, exp_id: str) -> Path:
        _check_name(exp_id, "experiment id")
        return self.experiments / exp_id

    def report_path(self, exp_id: str, module: str) -> Path:
        return self.reports / f"{exp_id}.{module}.json"


def _check_name(name: str, what: str) -> None:
    if not name or name.startswith(".") or any(c in name for c in "/\\") or name != name.strip():
        raise UsageError(f"invalid {what} {name!r}")


def atomic_write(path: Path, data: bytes) -> None:
    """Write to a sibling temp file, then rename over ``path``."""
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _guess_format(path: Path, explicit: str | None) -> str:
    if explicit:
        return explicit
    suffix = path.suffix.lower()
    if suffix in (".jsonl", ".ndjson", ".json"):
        return "jsonl"
    if suffix == ".csv":
        return "csv"
    raise UsageError(f"cannot infer the format of {path.name}; pass --format csv|jsonl")


# ---------------------------------------------------------------------------
# commands


def cmd_import(ws: Workspace, args: argparse.Namespace) -> int:
    src = Path(args.file)
    if not src.is_file():
        raise UsageError(f"no such trace file: {src}")
    fmt = _guess_format(src, args.format)
    if args.stream_config:
        cfg = load_stream_configs(args.stream_config)
    else:
        streams = ws.config().get("streams", {})
        cfg = {sid: StreamConfig.from_dict(sid, c) for sid, c in streams.items()}
    name = args.name or src.stem
    _check_name(name, "trace name")
    reader = load_trace(src, fmt, cfg, ts_unit=args.ts_unit)
    with ws.lock():
        ws.ensure()
        dest = ws.traces / f"{name}.jsonl"
        if dest.exists() and not args.force:
            raise UsageError(f"trace {name!r} already imported (use --force to replace)")
        fd, tmp = tempfile.mkstemp(prefix=f".{name}.", dir=ws.traces)
        try:
            with os.fdopen(fd, "w", encoding="utf-8") as fh:
                count = write_jsonl(reader, fh)
            os.replace(tmp, dest)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
        atomic_write(ws.traces / f"{name}.quality.json", reader.quality.to_json().encode("utf-8"))
    q = reader.quality
    print(f"imported {count} events into trace {name!r} ({q.dropped} lines dropped)")
    return EXIT_OK


def _trace_events(ws: Workspace, names: Sequence[str]) -> list:
    if not names:
        names = sorted(p.name[: -len(".jsonl")] for p in ws.traces.glob("*.jsonl"))
        if not names:
            raise UsageError("no traces imported; run 'import' first")
    events = []
    for name in names:
        path = ws.traces / f"{name}.jsonl"
        if not path.is_file():
            raise UsageError(f"unknown trace {name!r}")
        events.extend(load_trace(path, "jsonl").read_all())
    events.sort(key=lambda e: e.timestamp)
    return events


def cmd_experiment_create(ws: Workspace, args: argparse.Namespace) -> int:
    target = ws.experiment_dir(args.id)
    if not args.metric:
        raise UsageError("at least one --metric is required")
    try:
        specs = [MetricSpec.parse(m) for m in args.metric]
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    with ws.lock():
        ws.ensure()
        if target.exists():
            raise UsageError(f"experiment {args.id!r} already exists")
        events = _trace_events(ws, args.trace)
        series = [extract_metric(events, spec) for spec in specs]
        exp = Experiment.create(args.id, series, events)
        staging = Path(tempfile.mkdtemp(prefix=f".{args.id}.", dir=ws.experiments))
        try:
            save_experiment(exp, staging)
            os.replace(staging, target)
        except BaseException:
            shutil.rmtree(staging, ignore_errors=True)
            raise
    print(f"created experiment {args.id!r}: {len(exp.series)} metrics x {exp.length} samples, "
          f"{len(exp.events)} events")
    return EXIT_OK


def cmd_experiment_list(ws: Workspace, args: argparse.Namespace) -> int:
    if ws.experiments.is_dir():
        for d in sorted(ws.experiments.iterdir()):
            if (d / "manifest.json").is_file():
                print(d.name)
    return EXIT_OK


def parse_params(
    registry: Registry, modules: Sequence[str], raw: Sequence[str], defaults: dict[str, Any]
) -> dict[str, dict[str, Any]]:
    """Turn ``key=value`` / ``module.key=value`` strings into typed per-module params."""
    out: dict[str, dict[str, Any]] = {m: dict(defaults.get(m, {})) for m in modules}
    for item in raw:
        if "=" not in item:
            raise UsageError(f"--param {item!r} is not key=value")
        key, value = item.split("=", 1)
        key = key.strip()
        if "." in key:
            module, key = key.split(".", 1)
            targets = [module]
            if module not in out:
                raise UsageError(f"--param {item!r} names module {module!r}, which is not being run")
        elif len(modules) == 1:
            targets = list(modules)
        else:
            raise UsageError(f"--param {item!r} is ambiguous with several modules; use module.key=value")
        for module in targets:
            schema = {p.key: p for p in registry.descriptor(module).parameter_schema}
            if key not in schema:
                raise InvalidParameter(key, f"not a parameter of module {module!r}")
            out[module][key] = schema[key].coerce(value)
    return out


def cmd_analyze(ws: Workspace, args: argparse.Namespace) -> int:
    registry = default_registry()
    names = registry.names() if args.module == "all" else [args.module]
    for name in names:
        registry.descriptor(name)  # UnknownModule before any work
    exp_dir = ws.experiment_dir(args.experiment)
    if not exp_dir.is_dir():
        raise UsageError(f"unknown experiment {args.experiment!r}")
    params = parse_params(registry, names, args.param or [], ws.config().get("defaults", {}))
    exp = load_experiment(exp_dir)
    failures = []
    with ws.lock():
        ws.ensure()
        for name in names:
            try:
                report = registry.run(name, exp, params[name])
            except TraceInsightError as exc:
                if len(names) == 1:
                    raise
                failures.append(name)
                print(f"{name}: {type(exc).__name__}: {exc}", file=sys.stderr)
                continue
            path = ws.report_path(exp.id, name)
            atomic_write(path, report.to_json().encode("utf-8"))
            print(f"{name}: {path.relative_to(ws.root)} (confidence {report.confidence:.2f})")
    return EXIT_USER if failures else EXIT_OK


def _load_reports(ws: Workspace, exp_id: str) -> list[AnalysisReport]:
    reports = []
    for path in sorted(ws.reports.glob(f"{exp_id}.*.json")):
        module = path.name[len(exp_id) + 1: -len(".json")]
        if "." in module:  # rendered documents, not envelopes
            continue
        reports.append(AnalysisReport.from_envelope(json.loads(path.read_text(encoding="utf-8"))))
    return reports


def cmd_report(ws: Workspace, args: argparse.Namespace) -> int:
    ws.experiment_dir(args.experiment)
    reports = _load_reports(ws, args.experiment)
    if not reports:
        raise UsageError(f"no analysis reports for experiment {args.experiment!r}; run 'analyze' first")
    target = "markdown" if args.format == "md" else "json"
    plot_refs: dict[str, list[str]] = {}
    with ws.lock():
        if args.plots:
            exp_dir = ws.experiment_dir(args.experiment)
            exp = load_experiment(exp_dir) if exp_dir.is_dir() else None
            for r in reports:
                kind = "heatmap" if r.kind == "correlation" else "xy"
                try:
                    spec = build_plot(r, kind, experiment=exp)
                except IncompatibleKind:
                    continue
                rel = Path("plots") / f"{args.experiment}.{r.module}.svg"
                atomic_write(ws.reports / rel, export(spec, "svg"))
                plot_refs[r.module] = [rel.as_posix()]
        doc = render_document(reports, target, experiment_id=args.experiment,
                              generated_at=args.generated_at, plot_refs=plot_refs)
        out = Path(args.output) if args.output else ws.reports / f"{args.experiment}.report.{args.format}"
        atomic_write(out, doc)
    print(f"wrote {out}")
    return EXIT_OK


def cmd_modules_list(ws: Workspace, args: argparse.Namespace) -> int:
    registry = default_registry()
    if args.json:
        print(json.dumps([d.to_dict() for d in registry.list_modules()], indent=2, sort_keys=True))
    else:
        for d in registry.list_modules():
            print(f"{d.name}\t{d.version}\t{d.summary}")
    return EXIT_OK


def cmd_synth(ws: Workspace, args: argparse.Namespace) -> int:
    scenario = Path(args.scenario)
    if not scenario.is_file():
        raise UsageError(f"no such scenario file: {scenario}")
    spec = ScenarioSpec.from_json(scenario)
    out = Path(args.out) if args.out else ws.root / "synth" / scenario.stem
    files, truth = generate(spec, out, args.format)
    for f in files:
        print(f)
    print(f"{len(truth.features)} features; metric specs:")
    for s in truth.metric_specs():
        print(f"  --metric {s}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="traceinsight", description="Trace analysis: import, experiment, analyze, report.")
    p.add_argument("--workspace", help=f"workspace root (default: ${ENV_WORKSPACE} or the current directory)")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    imp = sub.add_parser("import", help="ingest a CSV or JSONL trace into the workspace")
    imp.add_argument("file")
    imp.add_argument("--format", choices=("csv", "jsonl"))
    imp.add_argument("--stream-config", help="JSON file of per-stream clock/timezone offsets")
    imp.add_argument("--ts-unit", choices=("s", "ms", "us", "ns"),
                     help="unit of integer timestamps when the file does not declare one")
    imp.add_argument("--name", help="trace name (default: file stem)")
    imp.add_argument("--force", action="store_true", help="replace an existing trace of the same name")
    imp.set_defaults(func=cmd_import)

    exp = sub.add_parser("experiment", help="manage experiments")
    exp_sub = exp.add_subparsers(dest="action", parser_class=_Parser)
    exp_sub.required = True
    create = exp_sub.add_parser("create", help="extract metrics and save an experiment")
    create.add_argument("id")
    create.add_argument("--metric", action="append", default=[],
                        help="name=..,event=..,field=..,agg=..,dt=..[,unit=..] (repeatable)")
    create.add_argument("--trace", action="append", default=[],
                        help="imported trace to use (repeatable; default: all)")
    create.set_defaults(func=cmd_experiment_create)
    lst = exp_sub.add_parser("list", help="list experiments")
    lst.set_defaults(func=cmd_experiment_list)

    an = sub.add_parser("analyze", help="run an analysis module on an experiment")
    an.add_argument("experiment")
    an.add_argument("--module", required=True, help="module name, or 'all'")
    an.add_argument("--param", action="append", default=[],
                    help="key=value (single module) or module.key=value (repeatable)")
    an.set_defaults(func=cmd_analyze)

    rep = sub.add_parser("report", help="render the insight document for an experiment")
    rep.add_argument("experiment")
    rep.add_argument("--format", choices=("md", "json"), default="md")
    rep.add_argument("--output", help="output path (default: reports/<experiment>.report.<format>)")
    rep.add_argument("--plots", action="store_true", help="also emit SVG plots and link them")
    rep.add_argument("--generated-at", help="timestamp string to stamp into the document")
    rep.set_defaults(func=cmd_report)

    mods = sub.add_parser("modules", help="inspect analysis modules")
    mods_sub = mods.add_subparsers(dest="action", parser_class=_Parser)
    mods_sub.required = True
    ml = mods_sub.add_parser("list", help="list registered modules")
    ml.add_argument("--json", action="store_true", help="print descriptors with parameter schemas")
    ml.set_defaults(func=cmd_modules_list)

    syn = sub.add_parser("synth", help="generate a synthetic trace from a scenario file")
    syn.add_argument("scenario")
    syn.add_argument("--out", help="output directory (default: <workspace>/synth/<scenario stem>)")
    syn.add_argument("--format", choices=("jsonl", "csv"), default="jsonl")
    syn.set_defaults(func=cmd_synth)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        root = args.workspace or os.environ.get(ENV_WORKSPACE) or os.getcwd()
        return args.func(Workspace(root), args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USER
    except UnknownModule as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USER
    except (TraceInsightError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_USER
    except Exception as exc:  # noqa: BLE001 - last-resort boundary
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())

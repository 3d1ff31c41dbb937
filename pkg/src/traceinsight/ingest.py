"""Trace ingestion: CSV / JSON-lines files into normalized ``TraceEvent`` streams.

Both formats accept leading directive lines of the form ``# key=value`` before
any data.  The only directive currently understood is ``ts_unit`` (one of
``ns``, ``us``, ``ms``, ``s``), which declares the unit of integer timestamps.
A JSON-lines file may instead start with a header object ``{"ts_unit": "ns"}``.
"""

from __future__ import annotations

import csv
import datetime as _dt
import json
import logging
import os
import re
from collections import Counter
from dataclasses import dataclass, field
from decimal import Decimal, InvalidOperation
from itertools import chain
from pathlib import Path
from typing import IO, Any, Iterable, Iterator, Mapping, NamedTuple, Sequence, Union

from .errors import (
    AmbiguousUnit,
    MalformedField,
    ParseError,
    TooManyErrors,
    TraceInsightError,
    UnparsableTimestamp,
)

logger = logging.getLogger(__name__)

FieldValue = Union[str, float, list]
RawTimestamp = Union[int, float, str]

DEFAULT_CHUNK_SIZE = 65_536
MAX_ERROR_FRACTION = 0.5

UNIT_SCALE = {"ns": 1, "us": 1_000, "ms": 1_000_000, "s": 1_000_000_000}
_NS_PER_MINUTE = 60 * 1_000_000_000
_MAX_TZ_MINUTES = 14 * 60

_SEPARATOR = re.compile(r":=|=|:")
_NUMERIC = re.compile(r"[+-]?\d+(?:\.\d+)?(?:[eE][+-]?\d+)?")
_INTEGER = re.compile(r"[+-]?\d+")
_ISO = re.compile(
    r"(\d{4})-(\d{2})-(\d{2})[T ](\d{2}):(\d{2}):(\d{2})(?:[.,](\d{1,9}))?"
    r"(Z|z|[+-]\d{2}:?\d{2})?"
)
_EPOCH_ORDINAL = _dt.date(1970, 1, 1).toordinal()


class TraceEvent(NamedTuple):
    """One timestamped occurrence on a stream.

    ``timestamp`` is integer nanoseconds since the Unix epoch (UTC) and
    ``sequence`` is the per-stream position in file order.
    """

    timestamp: int
    stream_id: str
    name: str
    fields: dict
    sequence: int


@dataclass(frozen=True)
class StreamConfig:
    stream_id: str
    clock_offset_ns: int = 0
    timezone_offset_minutes: int = 0

    def __post_init__(self) -> None:
        if abs(self.timezone_offset_minutes) > _MAX_TZ_MINUTES:
            raise ValueError(
                f"timezone_offset_minutes must be within ±{_MAX_TZ_MINUTES}, "
                f"got {self.timezone_offset_minutes}"
            )

    @property
    def naive_shift_ns(self) -> int:
        """Correction added to zone-less timestamps."""
        return self.clock_offset_ns - self.timezone_offset_minutes * _NS_PER_MINUTE

    @classmethod
    def from_dict(cls, stream_id: str, data: Mapping[str, Any]) -> "StreamConfig":
        return cls(
            stream_id=stream_id,
            clock_offset_ns=int(data.get("clock_offset_ns", 0)),
            timezone_offset_minutes=int(data.get("timezone_offset_minutes", 0)),
        )


def load_stream_configs(path: str | os.PathLike) -> dict[str, StreamConfig]:
    """Read a ``{stream_id: {clock_offset_ns, timezone_offset_minutes}}`` JSON file."""
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    if "streams" in data and isinstance(data["streams"], dict):
        data = data["streams"]
    return {sid: StreamConfig.from_dict(sid, cfg) for sid, cfg in data.items()}


# ---------------------------------------------------------------------------
# field assignments


def _split_top_level(text: str, sep: str | None) -> list[str]:
    """Split on ``sep`` (``None`` = whitespace) outside square brackets."""
    parts: list[str] = []
    depth = 0
    start = 0
    for i, ch in enumerate(text):
        if ch == "[":
            depth += 1
        elif ch == "]":
            depth -= 1
            if depth < 0:
                raise MalformedField(f"unbalanced brackets in {text!r}")
        elif depth == 0 and (ch == sep if sep is not None else ch.isspace()):
            parts.append(text[start:i])
            start = i + 1
    if depth != 0:
        raise MalformedField(f"unbalanced brackets in {text!r}")
    parts.append(text[start:])
    if sep is None:
        parts = [p for p in parts if p]
    return parts


def parse_value(text: str, _depth: int = 0) -> FieldValue:
    """Parse the right-hand side of an assignment into a FieldValue."""
    text = text.strip()
    if len(text) >= 2 and text[0] == "[" and text[-1] == "]":
        if _depth > 1:
            raise MalformedField(f"lists nest at most one level: {text!r}")
        inner = text[1:-1].strip()
        if not inner:
            return []
        return [parse_value(part, _depth + 1) for part in _split_top_level(inner, ",")]
    if _NUMERIC.fullmatch(text):
        return float(text)
    return text


def parse_field_assignment(token: str) -> tuple[str, FieldValue]:
    """Parse ``key:=value``, ``key=value``, ``key:value`` or ``key=[a,b]``.

    The leftmost separator wins; at that position ``:=`` is preferred over ``:``
    so ``a:=b`` never yields the key ``a:``.
    """
    if not token or not token.strip():
        raise MalformedField("empty field token")
    m = _SEPARATOR.search(token)
    if m is None:
        raise MalformedField(f"no separator in field token {token!r}")
    key = token[: m.start()].strip()
    if not key:
        raise MalformedField(f"empty key in field token {token!r}")
    return key, parse_value(token[m.end():])


def parse_field_tokens(text: str) -> dict[str, FieldValue]:
    """Parse a whitespace-separated list of assignment tokens."""
    out: dict[str, FieldValue] = {}
    for token in _split_top_level(text.strip(), None):
        key, value = parse_field_assignment(token)
        if key in out:
            raise MalformedField(f"duplicate field key {key!r}")
        out[key] = value
    return out


def format_field_value(value: FieldValue) -> str:
    if isinstance(value, list):
        return "[" + ",".join(format_field_value(v) for v in value) + "]"
    if isinstance(value, float):
        return repr(value)
    return str(value)


# ---------------------------------------------------------------------------
# timestamps


def _iso_to_ns(text: str) -> tuple[int, bool]:
    """Return (nanoseconds, has_explicit_zone) for an ISO-8601 timestamp."""
    m = _ISO.fullmatch(text)
    if m is None:
        raise UnparsableTimestamp(f"unrecognized timestamp {text!r}")
    year, month, day, hour, minute, second = (int(g) for g in m.groups()[:6])
    frac, zone = m.group(7), m.group(8)
    try:
        days = _dt.date(year, month, day).toordinal() - _EPOCH_ORDINAL
    except ValueError as exc:
        raise UnparsableTimestamp(f"invalid date in {text!r}: {exc}") from None
    if hour > 23 or minute > 59 or second > 60:
        raise UnparsableTimestamp(f"invalid time of day in {text!r}")
    ns = ((days * 24 + hour) * 60 + minute) * 60 + second
    ns = ns * 1_000_000_000 + (int(frac.ljust(9, "0")) if frac else 0)
    if zone is None:
        return ns, False
    if zone in ("Z", "z"):
        return ns, True
    sign = -1 if zone[0] == "-" else 1
    digits = zone[1:].replace(":", "")
    offset_min = sign * (int(digits[:2]) * 60 + int(digits[2:]))
    return ns - offset_min * _NS_PER_MINUTE, True


def _scaled(raw: int | Decimal, unit: str | None) -> int:
    if unit is None:
        raise AmbiguousUnit("numeric timestamp without a declared ts_unit")
    try:
        scale = UNIT_SCALE[unit]
    except KeyError:
        raise AmbiguousUnit(f"unknown timestamp unit {unit!r}") from None
    if isinstance(raw, int):
        return raw * scale
    return int((raw * scale).to_integral_value())


def normalize_timestamp(
    raw: RawTimestamp, cfg: StreamConfig | None = None, unit: str | None = None
) -> int:
    """Convert a raw timestamp to integer nanoseconds UTC.

    Numeric input is scaled by ``unit`` and then corrected by the stream's
    timezone and clock offsets.  ISO-8601 text with an explicit zone ignores
    the configured timezone offset; the clock offset still applies.
    """
    cfg = cfg or StreamConfig("")
    if isinstance(raw, bool):
        raise UnparsableTimestamp(f"boolean is not a timestamp: {raw!r}")
    if isinstance(raw, int):
        return _scaled(raw, unit) + cfg.naive_shift_ns
    if isinstance(raw, float):
        if raw != raw or raw in (float("inf"), float("-inf")):
            raise UnparsableTimestamp(f"non-finite timestamp {raw!r}")
        return _scaled(Decimal(repr(raw)), unit) + cfg.naive_shift_ns
    if not isinstance(raw, str):
        raise UnparsableTimestamp(f"unsupported timestamp type {type(raw).__name__}")
    text = raw.strip()
    if _INTEGER.fullmatch(text):
        return _scaled(int(text), unit) + cfg.naive_shift_ns
    if _NUMERIC.fullmatch(text):
        try:
            return _scaled(Decimal(text), unit) + cfg.naive_shift_ns
        except InvalidOperation:
            raise UnparsableTimestamp(f"bad numeric timestamp {text!r}") from None
    ns, zoned = _iso_to_ns(text)
    if zoned:
        return ns + cfg.clock_offset_ns
    return ns + cfg.naive_shift_ns


# ---------------------------------------------------------------------------
# quality reporting


@dataclass(frozen=True)
class LineError:
    line: int
    reason: str
    message: str = ""


@dataclass
class QualityReport:
    events: int = 0
    dropped: int = 0
    reasons: dict[str, int] = field(default_factory=dict)
    stream_ranges: dict[str, tuple[int, int]] = field(default_factory=dict)
    errors: list[LineError] = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        return {
            "events": self.events,
            "dropped": self.dropped,
            "reasons": dict(sorted(self.reasons.items())),
            "stream_ranges": {
                sid: [lo, hi] for sid, (lo, hi) in sorted(self.stream_ranges.items())
            },
            "errors": [
                {"line": e.line, "reason": e.reason, "message": e.message}
                for e in self.errors
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


class _QualityAccumulator:
    def __init__(self) -> None:
        self.events = 0
        self.errors: list[LineError] = []
        self.ranges: dict[str, list[int]] = {}

    def add_event(self, ev: TraceEvent) -> None:
        self.events += 1
        r = self.ranges.get(ev.stream_id)
        if r is None:
            self.ranges[ev.stream_id] = [ev.timestamp, ev.timestamp]
        elif ev.timestamp < r[0]:
            r[0] = ev.timestamp
        elif ev.timestamp > r[1]:
            r[1] = ev.timestamp

    def add_error(self, err: LineError) -> None:
        self.errors.append(err)

    def report(self) -> QualityReport:
        return QualityReport(
            events=self.events,
            dropped=len(self.errors),
            reasons=dict(Counter(e.reason for e in self.errors)),
            stream_ranges={sid: (r[0], r[1]) for sid, r in self.ranges.items()},
            errors=list(self.errors),
        )


def quality_report(
    events_ingested: Iterable[TraceEvent], errors: Iterable[LineError] = ()
) -> QualityReport:
    """Summarize an ingested event stream and its per-line errors."""
    acc = _QualityAccumulator()
    for ev in events_ingested:
        acc.add_event(ev)
    for err in errors:
        acc.add_error(err)
    return acc.report()


# ---------------------------------------------------------------------------
# readers


def _json_field(value: Any, depth: int = 0) -> FieldValue:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, float)):
        return float(value)
    if isinstance(value, str):
        return value
    if isinstance(value, list):
        if depth > 1:
            raise MalformedField("lists nest at most one level")
        return [_json_field(v, depth + 1) for v in value]
    raise MalformedField(f"unsupported field value type {type(value).__name__}")


def _read_directives(fh: IO[str]) -> tuple[dict[str, str], int, str | None]:
    """Consume leading ``# key=value`` lines.

    Returns the directives, the number of lines consumed and the first
    non-directive line (or ``None`` at EOF).
    """
    directives: dict[str, str] = {}
    consumed = 0
    for line in fh:
        consumed += 1
        stripped = line.strip()
        if not stripped:
            continue
        if stripped.startswith("#"):
            body = stripped.lstrip("#").strip()
            if "=" in body:
                k, v = body.split("=", 1)
                directives[k.strip()] = v.strip()
            continue
        return directives, consumed, line
    return directives, consumed, None


class TraceReader:
    """Chunked, single-pass reader over one trace file.

    Iterating the reader yields ``TraceEvent`` objects in file order;
    :meth:`chunks` yields immutable tuples of at most ``chunk_size`` events.
    The quality report is available from :attr:`quality` once the file has
    been fully consumed.
    """

    def __init__(
        self,
        path: str | os.PathLike,
        fmt: str,
        cfg: Mapping[str, StreamConfig] | None = None,
        *,
        chunk_size: int = DEFAULT_CHUNK_SIZE,
        ts_unit: str | None = None,
    ) -> None:
        if fmt not in ("csv", "jsonl"):
            raise ValueError(f"unsupported trace format {fmt!r}")
        if chunk_size < 1:
            raise ValueError("chunk_size must be >= 1")
        self.path = Path(path)
        if not self.path.is_file():
            raise FileNotFoundError(f"trace file not found: {self.path}")
        self.fmt = fmt
        self.cfg = dict(cfg or {})
        self.chunk_size = chunk_size
        self.ts_unit = ts_unit
        self.peak_buffered = 0
        self._acc = _QualityAccumulator()
        self._sequences: dict[str, int] = {}
        self._shifts: dict[str, int] = {}
        self._consumed = False
        self._jsonl_unit = ts_unit
        self._quality: QualityReport | None = None

    @property
    def quality(self) -> QualityReport:
        if self._quality is None:
            raise RuntimeError("quality report is available after the trace is consumed")
        return self._quality

    def __iter__(self) -> Iterator[TraceEvent]:
        for chunk in self.chunks():
            yield from chunk

    def read_all(self) -> list[TraceEvent]:
        return list(self)

    def chunks(self) -> Iterator[tuple[TraceEvent, ...]]:
        if self._consumed:
            raise RuntimeError("TraceReader is single-pass")
        self._consumed = True
        with open(self.path, "r", encoding="utf-8", newline="") as fh:
            directives, offset, first = _read_directives(fh)
            unit = self.ts_unit or directives.get("ts_unit")
            if first is None:
                self._finish()
                return
            self._jsonl_unit = unit
            if self.fmt == "csv":
                yield from self._emit(self._csv_rows(fh, first, offset), unit)
            else:
                yield from self._emit_jsonl(chain([first], fh), offset)
        self._finish()

    # -- format specific row sources; each yields (line_no, ts, stream, name, fields)

    def _emit_jsonl(self, lines: Iterable[str], offset: int) -> Iterator[tuple[TraceEvent, ...]]:
        # Hot path: decode with the C scanner and build events inline; anything
        # irregular falls back to the general _build().
        scan = json.JSONDecoder().scan_once
        acc = self._acc
        ranges = acc.ranges
        seqs = self._sequences
        shifts = self._shifts
        buf: list[TraceEvent] = []
        chunk_size = self.chunk_size
        n_events = 0
        line_no = offset - 1
        for line in lines:
            line_no += 1
            try:
                obj, end = scan(line, 0)
                if end < len(line) and line[end:].strip():
                    raise ValueError("trailing data")
            except (StopIteration, ValueError):
                if not line.strip():
                    continue
                try:
                    obj = json.loads(line)
                except json.JSONDecodeError as exc:
                    acc.add_error(LineError(line_no, "ParseError", f"invalid JSON: {exc.msg}"))
                    continue
            if type(obj) is not dict:
                acc.add_error(LineError(line_no, "ParseError", "record is not a JSON object"))
                continue
            ev = None
            ts = obj.get("ts")
            unit = self._jsonl_unit
            if type(ts) is int and unit is not None and len(obj) == 4:
                stream = obj.get("stream")
                name = obj.get("name")
                raw_fields = obj.get("fields")
                if (
                    type(stream) is str
                    and type(name) is str
                    and stream
                    and name
                    and type(raw_fields) is dict
                    and "" not in raw_fields
                ):
                    fields = {}
                    for k, v in raw_fields.items():
                        t = type(v)
                        if t is int or t is float:
                            fields[k] = float(v)
                        elif t is str:
                            fields[k] = v
                        else:
                            break
                    else:
                        shift = shifts.get(stream)
                        if shift is None:
                            cfg = self.cfg.get(stream) or StreamConfig(stream)
                            shift = shifts[stream] = cfg.naive_shift_ns
                        ts = ts * UNIT_SCALE[unit] + shift
                        if ts >= 0:
                            seq = seqs.get(stream, 0)
                            seqs[stream] = seq + 1
                            ev = TraceEvent(ts, stream, name, fields, seq)
                            n_events += 1
                            r = ranges.get(stream)
                            if r is None:
                                ranges[stream] = [ts, ts]
                            elif ts < r[0]:
                                r[0] = ts
                            elif ts > r[1]:
                                r[1] = ts
            if ev is None:
                if "ts" not in obj and set(obj) == {"ts_unit"}:
                    self._jsonl_unit = self.ts_unit or str(obj["ts_unit"])
                    continue
                try:
                    ev = self._build(obj, unit, False)
                except AmbiguousUnit:
                    raise
                except TraceInsightError as exc:
                    acc.add_error(LineError(line_no, type(exc).__name__, str(exc)))
                    continue
                acc.add_event(ev)
            buf.append(ev)
            if len(buf) >= chunk_size:
                self.peak_buffered = max(self.peak_buffered, len(buf))
                yield tuple(buf)
                buf = []
        acc.events += n_events
        if buf:
            self.peak_buffered = max(self.peak_buffered, len(buf))
            yield tuple(buf)

    def _csv_rows(self, fh: IO[str], first: str, offset: int):
        reader = csv.reader(chain([first], fh))
        header = next(reader)
        header = [h.strip() for h in header]
        missing = {"ts", "stream", "name"} - set(header)
        if missing:
            raise ParseError(f"CSV header missing required columns: {sorted(missing)}")
        width = len(header)
        base = offset - 1
        for row in reader:
            line_no = base + reader.line_num
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != width:
                yield line_no, ParseError(f"expected {width} columns, got {len(row)}")
                continue
            yield line_no, dict(zip(header, row))

    def _emit(self, rows, unit: str | None) -> Iterator[tuple[TraceEvent, ...]]:
        buf: list[TraceEvent] = []
        add_event = self._acc.add_event
        for line_no, rec in rows:
            if isinstance(rec, TraceInsightError):
                self._acc.add_error(LineError(line_no, type(rec).__name__, str(rec)))
                continue
            try:
                ev = self._build(rec, unit, True)
            except AmbiguousUnit:
                raise
            except TraceInsightError as exc:
                self._acc.add_error(LineError(line_no, type(exc).__name__, str(exc)))
                continue
            add_event(ev)
            buf.append(ev)
            if len(buf) >= self.chunk_size:
                self.peak_buffered = max(self.peak_buffered, len(buf))
                yield tuple(buf)
                buf = []
        if buf:
            self.peak_buffered = max(self.peak_buffered, len(buf))
            yield tuple(buf)

    def _build(self, rec: dict, unit: str | None, csv_mode: bool) -> TraceEvent:
        try:
            raw_ts = rec["ts"]
            stream = rec["stream"]
            name = rec["name"]
        except KeyError as exc:
            raise ParseError(f"missing required key {exc.args[0]!r}") from None
        if not isinstance(stream, str) or not isinstance(name, str) or not stream or not name:
            raise ParseError("stream and name must be non-empty strings")
        shift = self._shifts.get(stream)
        if shift is None:
            cfg = self.cfg.get(stream) or StreamConfig(stream)
            shift = self._shifts[stream] = cfg.naive_shift_ns
        if type(raw_ts) is int:
            if unit is None:
                raise AmbiguousUnit(
                    f"{self.path}: integer timestamps require a ts_unit directive"
                )
            ts = raw_ts * UNIT_SCALE[unit] + shift
        else:
            if isinstance(raw_ts, str) and unit is None and _NUMERIC.fullmatch(raw_ts.strip()):
                raise AmbiguousUnit(
                    f"{self.path}: numeric timestamps require a ts_unit directive"
                )
            ts = normalize_timestamp(raw_ts, self.cfg.get(stream) or StreamConfig(stream), unit)
        if ts < 0:
            raise UnparsableTimestamp(f"timestamp normalizes before the epoch: {ts}")

        if csv_mode:
            fields: dict[str, FieldValue] = {}
            tokens = rec.get("fields", "")
            if tokens and tokens.strip():
                fields = parse_field_tokens(tokens)
            for key, cell in rec.items():
                if key in ("ts", "stream", "name", "fields") or cell == "" or cell is None:
                    continue
                if key in fields:
                    raise MalformedField(f"duplicate field key {key!r}")
                fields[key] = parse_value(cell)
        else:
            raw_fields = rec.get("fields")
            if raw_fields is None:
                fields = {}
            elif isinstance(raw_fields, dict):
                fields = {}
                for key, value in raw_fields.items():
                    if not key:
                        raise MalformedField("empty field key")
                    t = type(value)
                    fields[key] = float(value) if (t is float or t is int) else _json_field(value)
            else:
                raise MalformedField("'fields' must be an object")
            if len(rec) > 4 or (len(rec) == 4 and "fields" not in rec):
                for key, value in rec.items():
                    if key in ("ts", "stream", "name", "fields"):
                        continue
                    if key in fields:
                        raise MalformedField(f"duplicate field key {key!r}")
                    fields[key] = _json_field(value)

        seq = self._sequences.get(stream, 0)
        self._sequences[stream] = seq + 1
        return TraceEvent(ts, stream, name, fields, seq)

    def _finish(self) -> None:
        report = self._acc.report()
        self._quality = report
        total = report.events + report.dropped
        if total and report.dropped / total > MAX_ERROR_FRACTION:
            raise TooManyErrors(
                f"{self.path}: {report.dropped} of {total} lines malformed "
                f"(limit {MAX_ERROR_FRACTION:.0%})"
            )


def load_trace(
    path: str | os.PathLike,
    fmt: str,
    cfg: Mapping[str, StreamConfig] | None = None,
    *,
    chunk_size: int = DEFAULT_CHUNK_SIZE,
    ts_unit: str | None = None,
) -> TraceReader:
    """Open a trace file for streaming ingestion.

    The returned reader is lazy: nothing is parsed until it is iterated.
    """
    return TraceReader(path, fmt, cfg, chunk_size=chunk_size, ts_unit=ts_unit)


# ---------------------------------------------------------------------------
# writers


def _json_ready(value: FieldValue) -> Any:
    if isinstance(value, list):
        return [_json_ready(v) for v in value]
    return value


def event_to_record(ev: TraceEvent) -> dict[str, Any]:
    return {
        "ts": ev.timestamp,
        "stream": ev.stream_id,
        "name": ev.name,
        "fields": {k: _json_ready(v) for k, v in ev.fields.items()},
    }


def write_jsonl(events: Iterable[TraceEvent], dest: str | os.PathLike | IO[str]) -> int:
    """Write events as JSON lines with nanosecond timestamps; returns the count."""
    if isinstance(dest, (str, os.PathLike)):
        with open(dest, "w", encoding="utf-8") as fh:
            return write_jsonl(events, fh)
    dest.write('{"ts_unit": "ns"}\n')
    n = 0
    dumps = json.dumps
    for ev in events:
        dest.write(dumps(event_to_record(ev), separators=(",", ":")))
        dest.write("\n")
        n += 1
    return n


def write_csv(
    events: Iterable[TraceEvent],
    dest: str | os.PathLike | IO[str],
    extra_columns: Sequence[str] = (),
) -> int:
    """Write events as CSV; fields not listed in ``extra_columns`` go to ``fields``.

    Text values that look numeric are re-read as numbers, so CSV is not a
    lossless round-trip format; use :func:`write_jsonl` for that.
    """
    if isinstance(dest, (str, os.PathLike)):
        with open(dest, "w", encoding="utf-8", newline="") as fh:
            return write_csv(events, fh, extra_columns)
    dest.write("# ts_unit=ns\n")
    writer = csv.writer(dest, lineterminator="\n")
    writer.writerow(["ts", "stream", "name", "fields", *extra_columns])
    n = 0
    for ev in events:
        tokens = " ".join(
            f"{k}={format_field_value(v)}" for k, v in ev.fields.items() if k not in extra_columns
        )
        extras = [
            format_field_value(ev.fields[c]) if c in ev.fields else "" for c in extra_columns
        ]
        writer.writerow([ev.timestamp, ev.stream_id, ev.name, tokens, *extras])
        n += 1
    return n


def read_events(text: str, fmt: str = "jsonl", **kwargs) -> list[TraceEvent]:
    """Parse trace text held in memory (convenience for small inputs and tests)."""
    import tempfile

    suffix = ".csv" if fmt == "csv" else ".jsonl"
    with tempfile.TemporaryDirectory() as tmp:
        p = Path(tmp) / f"trace{suffix}"
        p.write_text(text, encoding="utf-8")
        return load_trace(p, fmt, **kwargs).read_all()

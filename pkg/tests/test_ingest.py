import json
import string

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from traceinsight.errors import (
    AmbiguousUnit,
    MalformedField,
    TooManyErrors,
    UnparsableTimestamp,
)
from traceinsight.ingest import (
    LineError,
    StreamConfig,
    TraceEvent,
    load_stream_configs,
    load_trace,
    normalize_timestamp,
    parse_field_assignment,
    parse_field_tokens,
    parse_value,
    quality_report,
    read_events,
    write_csv,
    write_jsonl,
)


class TestFieldAssignment:
    def test_colon_equals(self):
        assert parse_field_assignment("state:=RUNNING") == ("state", "RUNNING")

    def test_equals_numeric(self):
        key, value = parse_field_assignment("cpu=5")
        assert key == "cpu" and value == 5.0 and isinstance(value, float)

    def test_colon(self):
        assert parse_field_assignment("prio:20") == ("prio", 20.0)

    def test_list(self):
        assert parse_field_assignment("cpus=[0,1]") == ("cpus", [0.0, 1.0])

    def test_nested_list_one_level(self):
        assert parse_field_assignment("m=[[1,2],x]") == ("m", [[1.0, 2.0], "x"])

    def test_nested_list_two_levels_rejected(self):
        with pytest.raises(MalformedField):
            parse_field_assignment("m=[[[1]]]")

    def test_no_separator(self):
        with pytest.raises(MalformedField):
            parse_field_assignment("novalue")

    def test_empty_key(self):
        with pytest.raises(MalformedField):
            parse_field_assignment("=5")

    def test_first_separator_wins(self):
        # value keeps the later separators
        assert parse_field_assignment("key=a:b") == ("key", "a:b")
        assert parse_field_assignment("key:a=b") == ("key", "a=b")
        assert parse_field_assignment("key:=a=b") == ("key", "a=b")

    @pytest.mark.parametrize("text", ["0x1f", "1e", "+", "1.2.3", "nan", "inf", "1_000", ".5", "7."])
    def test_strict_numeric_grammar(self, text):
        assert parse_value(text) == text

    @pytest.mark.parametrize("text,expected", [("-3", -3.0), ("+2.5", 2.5), ("1e3", 1000.0),
                                               ("007", 7.0), ("-1.5E-2", -0.015)])
    def test_numeric_values(self, text, expected):
        assert parse_value(text) == expected

    def test_tokens_duplicate_key(self):
        with pytest.raises(MalformedField):
            parse_field_tokens("a=1 a=2")

    def test_tokens_keep_list_spaces(self):
        assert parse_field_tokens("a=[1, 2] b:=x") == {"a": [1.0, 2.0], "b": "x"}

    @given(
        key=st.text(alphabet=string.ascii_lowercase, min_size=1, max_size=8),
        value=st.text(alphabet=string.ascii_letters + string.digits + "_-.", min_size=1, max_size=10),
        sep=st.sampled_from([":=", "=", ":"]),
    )
    @settings(max_examples=300)
    def test_total_over_syntaxes(self, key, value, sep):
        k, v = parse_field_assignment(f"{key}{sep}{value}")
        assert k == key
        assert v == parse_value(value)


class TestTimestamps:
    def test_seconds_unit(self):
        assert normalize_timestamp(1000, unit="s") == 1_000_000_000_000

    def test_timezone_offset(self):
        cfg = StreamConfig("s", timezone_offset_minutes=60)
        assert normalize_timestamp(0, cfg, unit="ns") == -3_600_000_000_000

    @pytest.mark.parametrize("tz", [-600, 0, 60, 840])
    def test_iso_with_zone_ignores_timezone(self, tz):
        cfg = StreamConfig("s", timezone_offset_minutes=tz)
        assert normalize_timestamp("1970-01-01T01:00:00+01:00", cfg) == 0

    def test_iso_zone_keeps_clock_offset(self):
        cfg = StreamConfig("s", clock_offset_ns=5, timezone_offset_minutes=30)
        assert normalize_timestamp("1970-01-01T00:00:00Z", cfg) == 5

    def test_iso_naive_uses_timezone(self):
        cfg = StreamConfig("s", timezone_offset_minutes=60)
        assert normalize_timestamp("1970-01-01T01:00:00", cfg) == 0

    def test_iso_fraction(self):
        assert normalize_timestamp("1970-01-01T00:00:01.000000123Z") == 1_000_000_123

    def test_clock_offset(self):
        cfg = StreamConfig("s", clock_offset_ns=-7)
        assert normalize_timestamp(100, cfg, unit="ns") == 93

    def test_fractional_units(self):
        assert normalize_timestamp("1.5", unit="ms") == 1_500_000
        assert normalize_timestamp(0.25, unit="s") == 250_000_000

    def test_integer_without_unit_is_ambiguous(self):
        with pytest.raises(AmbiguousUnit):
            normalize_timestamp(5)

    @pytest.mark.parametrize("raw", ["yesterday", "2024-13-01T00:00:00Z", True, None, float("nan")])
    def test_unparsable(self, raw):
        with pytest.raises(UnparsableTimestamp):
            normalize_timestamp(raw, unit="ns")

    def test_timezone_limit(self):
        with pytest.raises(ValueError):
            StreamConfig("s", timezone_offset_minutes=14 * 60 + 1)

    def test_stream_config_file(self, tmp_path):
        p = tmp_path / "streams.json"
        p.write_text(json.dumps({"streams": {"a": {"clock_offset_ns": 3}}}))
        cfg = load_stream_configs(p)
        assert cfg["a"].clock_offset_ns == 3 and cfg["a"].timezone_offset_minutes == 0


class TestQualityReport:
    def test_empty(self):
        q = quality_report([], [])
        assert (q.events, q.dropped, q.reasons, q.stream_ranges) == (0, 0, {}, {})

    def test_counts(self):
        evs = [TraceEvent(i, "s", "e", {}, i) for i in range(10)]
        errs = [LineError(3, "MalformedField"), LineError(7, "MalformedField")]
        q = quality_report(evs, errs)
        assert q.dropped == 2 and q.reasons == {"MalformedField": 2}

    def test_ranges(self):
        evs = [TraceEvent(t, "s", "e", {}, i) for i, t in enumerate([7, 5, 9, 6])]
        assert quality_report(evs).stream_ranges == {"s": (5, 9)}


class TestLoadTrace:
    def test_empty_file(self, tmp_path):
        p = tmp_path / "empty.csv"
        p.write_text("")
        r = load_trace(p, "csv")
        assert r.read_all() == []
        assert r.quality.events == 0 and r.quality.dropped == 0

    def test_csv_with_malformed_line(self, tmp_path):
        p = tmp_path / "t.csv"
        p.write_text("# ts_unit=ns\nts,stream,name,fields\n1,s,e,a=1\n2,s,e,broken\n3,s,e,a:=x b=2\n")
        r = load_trace(p, "csv")
        events = r.read_all()
        assert [e.timestamp for e in events] == [1, 3]
        assert events[1].fields == {"a": "x", "b": 2.0}
        assert r.quality.dropped == 1
        assert r.quality.errors[0].line == 4
        assert r.quality.errors[0].reason == "MalformedField"

    def test_csv_extra_columns_become_fields(self, tmp_path):
        p = tmp_path / "t.csv"
        p.write_text("ts,stream,name,fields,cpu\n1,s,e,,42\n")
        events = load_trace(p, "csv", ts_unit="ns").read_all()
        assert events[0].fields == {"cpu": 42.0}

    def test_missing_unit_is_fatal(self, tmp_path):
        p = tmp_path / "t.csv"
        p.write_text("ts,stream,name\n1,s,e\n")
        with pytest.raises(AmbiguousUnit):
            load_trace(p, "csv").read_all()

    def test_iso_timestamps_need_no_unit(self, tmp_path):
        p = tmp_path / "t.jsonl"
        p.write_text('{"ts":"1970-01-01T00:00:01Z","stream":"s","name":"e"}\n')
        assert load_trace(p, "jsonl").read_all()[0].timestamp == 1_000_000_000

    def test_jsonl_header_unit_and_offsets(self, tmp_path):
        p = tmp_path / "t.jsonl"
        p.write_text('{"ts_unit":"ms"}\n{"ts":2,"stream":"a","name":"e","fields":{"x":1}}\n'
                     '{"ts":3,"stream":"b","name":"e"}\n')
        cfg = {"a": StreamConfig("a", clock_offset_ns=10)}
        events = load_trace(p, "jsonl", cfg).read_all()
        assert [e.timestamp for e in events] == [2_000_010, 3_000_000]
        assert events[0].fields == {"x": 1.0}

    def test_sequences_per_stream(self, tmp_path):
        p = tmp_path / "t.jsonl"
        lines = [json.dumps({"ts": i, "stream": "ab"[i % 2], "name": "e"}) for i in range(7)]
        p.write_text('{"ts_unit":"ns"}\n' + "\n".join(lines) + "\n")
        events = load_trace(p, "jsonl").read_all()
        for sid in "ab":
            seqs = [e.sequence for e in events if e.stream_id == sid]
            assert seqs == list(range(len(seqs)))

    def test_negative_timestamp_is_line_error(self, tmp_path):
        p = tmp_path / "t.jsonl"
        p.write_text('{"ts_unit":"ns"}\n{"ts":5,"stream":"s","name":"e"}\n{"ts":6,"stream":"s","name":"e"}\n')
        cfg = {"s": StreamConfig("s", timezone_offset_minutes=60)}
        with pytest.raises(TooManyErrors):
            load_trace(p, "jsonl", cfg).read_all()

    def test_error_threshold(self, tmp_path):
        half = tmp_path / "half.jsonl"
        half.write_text('{"ts_unit":"ns"}\n{"ts":1,"stream":"s","name":"e"}\nnot json\n')
        r = load_trace(half, "jsonl")
        assert len(r.read_all()) == 1 and r.quality.dropped == 1
        worse = tmp_path / "worse.jsonl"
        worse.write_text('{"ts_unit":"ns"}\n{"ts":1,"stream":"s","name":"e"}\nnot json\n{"ts":2}\n')
        with pytest.raises(TooManyErrors):
            load_trace(worse, "jsonl").read_all()

    def test_chunking_bounds_buffer(self, tmp_path):
        p = tmp_path / "t.jsonl"
        lines = [json.dumps({"ts": i, "stream": "s", "name": "e", "fields": {"v": i}}) for i in range(1000)]
        p.write_text('{"ts_unit":"ns"}\n' + "\n".join(lines) + "\n")
        r = load_trace(p, "jsonl", chunk_size=64)
        sizes = [len(c) for c in r.chunks()]
        assert sum(sizes) == 1000 and max(sizes) == 64
        assert r.peak_buffered <= 2 * 64

    def test_single_pass(self, tmp_path):
        p = tmp_path / "t.csv"
        p.write_text("")
        r = load_trace(p, "csv")
        r.read_all()
        with pytest.raises(RuntimeError):
            r.read_all()

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_trace(tmp_path / "nope.csv", "csv")


field_values = st.recursive(
    st.one_of(st.floats(allow_nan=False, allow_infinity=False, width=64),
              st.text(alphabet=string.ascii_letters, min_size=1, max_size=6)),
    lambda inner: st.lists(inner, max_size=3),
    max_leaves=6,
).filter(lambda v: not (isinstance(v, list) and any(isinstance(x, list) and any(isinstance(y, list) for y in x) for x in v)))

events_strategy = st.lists(
    st.tuples(
        st.integers(min_value=0, max_value=2**62),
        st.sampled_from(["s1", "s2"]),
        st.sampled_from(["sched", "irq"]),
        st.dictionaries(st.text(alphabet=string.ascii_lowercase, min_size=1, max_size=5), field_values, max_size=3),
    ),
    max_size=20,
)


@given(events_strategy)
@settings(max_examples=100, deadline=None)
def test_jsonl_round_trip(raw):
    seqs: dict[str, int] = {}
    events = []
    for ts, sid, name, fields in raw:
        events.append(TraceEvent(ts, sid, name, fields, seqs.get(sid, 0)))
        seqs[sid] = seqs.get(sid, 0) + 1
    import io

    buf = io.StringIO()
    write_jsonl(events, buf)
    again = read_events(buf.getvalue(), "jsonl")
    assert again == events


def test_csv_writer_reads_back(tmp_path):
    events = [TraceEvent(10, "s", "e", {"a": 1.0, "b": "x", "c": [1.0, 2.0]}, 0),
              TraceEvent(20, "s", "e", {"a": 2.0}, 1)]
    p = tmp_path / "t.csv"
    write_csv(events, p, extra_columns=["a"])
    assert load_trace(p, "csv").read_all() == events

import json

import pytest

from conftest import ROOT, make_event, make_sequence
from core.errors import SequenceError, TraceFormatError
from core.trace_model import (
    ToolCatalog,
    assemble_sequences,
    filter_rare,
    parse_trace_log,
    serialize_trace_log,
)


def _line(**fields):
    record = {
        "trace_id": "t1",
        "seq_index": 0,
        "timestamp_ms": 1000,
        "agent_role": "Researcher",
        "tool_name": "list_files",
        "tool_input": "./AI",
    }
    record.update(fields)
    return json.dumps(record).encode("utf-8")


def test_parse_minimal_record_defaults_optional_fields():
    (event,) = parse_trace_log([_line()])
    assert event.thoughts == ""
    assert event.task_result == ""
    assert event.input_tokens == 0
    assert event.idle_ms == 0 and event.processing_ms == 0


def test_timing_recomputed_from_timestamps():
    events = parse_trace_log(
        [
            _line(seq_index=1, timestamp_ms=4000, tool_name="read_file"),
            _line(seq_index=0, timestamp_ms=1000),
            _line(seq_index=2, timestamp_ms=9000, tool_name="send_email"),
        ]
    )
    by_index = {e.seq_index: e for e in events}
    assert [e.seq_index for e in events] == [1, 0, 2]
    assert (by_index[0].idle_ms, by_index[0].processing_ms) == (0, 0)
    assert (by_index[1].idle_ms, by_index[1].processing_ms) == (3000, 3000)
    assert (by_index[2].idle_ms, by_index[2].processing_ms) == (5000, 8000)


def test_blank_lines_are_skipped():
    events = parse_trace_log([_line(), b"   \n", _line(seq_index=1, timestamp_ms=2000)])
    assert len(events) == 2


@pytest.mark.parametrize(
    "raw, field",
    [
        (b"{not json", "<record>"),
        (b"[1, 2]", "<record>"),
        (json.dumps({"trace_id": "t1"}).encode(), "seq_index"),
        (_line(tool_name=""), "tool_name"),
        (_line(seq_index=-1), "seq_index"),
        (_line(timestamp_ms="noon"), "timestamp_ms"),
        (_line(input_tokens=True), "input_tokens"),
        (_line(tool_input=5), "tool_input"),
        (b"\xff\xfe", "<record>"),
    ],
)
def test_malformed_records_name_line_and_field(raw, field):
    with pytest.raises(TraceFormatError) as info:
        parse_trace_log([_line(trace_id="ok", seq_index=0), raw])
    assert info.value.line == 2
    assert info.value.field == field


def test_duplicate_sequence_index_rejected():
    with pytest.raises(TraceFormatError) as info:
        parse_trace_log([_line(), _line(timestamp_ms=2000)])
    assert info.value.field == "seq_index"
    assert "line 1" in str(info.value)


def test_timestamps_must_not_go_backwards():
    with pytest.raises(TraceFormatError) as info:
        parse_trace_log([_line(timestamp_ms=5000), _line(seq_index=1, timestamp_ms=4000)])
    assert info.value.field == "timestamp_ms"


def test_serialize_then_parse_keeps_events():
    events = [
        make_event(seq_index=0, idle_ms=0, processing_ms=0, thoughts="First I should look."),
        make_event(seq_index=1, tool_input="./Cars/ev-market-2025.txt"),
    ]
    parsed = parse_trace_log(serialize_trace_log(events).splitlines())
    assert parsed == events


def test_assemble_orders_by_seq_index_and_trace():
    events = parse_trace_log(
        [
            _line(trace_id="b", seq_index=1, timestamp_ms=3000, tool_name="read_file"),
            _line(trace_id="a"),
            _line(trace_id="b", seq_index=0, timestamp_ms=1000),
        ]
    )
    seqs = assemble_sequences(events)
    assert [s.trace_id for s in seqs] == ["a", "b"]
    assert seqs[1].tool_names == ["list_files", "read_file"]


def test_assemble_rejects_gaps():
    events = parse_trace_log([_line(), _line(seq_index=2, timestamp_ms=2000)])
    with pytest.raises(SequenceError, match="gap"):
        assemble_sequences(events)


def test_assemble_rejects_mixed_roles():
    events = parse_trace_log([_line(), _line(seq_index=1, timestamp_ms=2000, agent_role="Other")])
    with pytest.raises(SequenceError, match="mixed agent_role"):
        assemble_sequences(events)


def test_filter_rare_flags_infrequent_paths():
    seqs = [
        make_sequence("a", ["list_files", "read_file"]),
        make_sequence("b", ["list_files", "read_file", "read_file"]),
        make_sequence("c", ["list_files", "send_email"]),
    ]
    kept, flagged = filter_rare(seqs, min_freq=2)
    assert [s.trace_id for s in kept] == ["a", "b"]
    assert [s.trace_id for s in flagged] == ["c"]
    assert filter_rare(seqs, 1) == (seqs, [])


def test_filter_rare_rejects_zero_threshold():
    with pytest.raises(ValueError):
        filter_rare([], 0)


def test_tool_catalog():
    catalog = ToolCatalog.from_sequences([make_sequence("a", ["list_files", "read_file"])])
    assert "read_file" in catalog and len(catalog) == 2
    with pytest.raises(SequenceError):
        ToolCatalog.from_sequences([])


def test_staging_fixture_parses_into_sixty_traces():
    with (ROOT / "data" / "fixtures" / "staging_traces.jsonl").open("rb") as fh:
        seqs = assemble_sequences(parse_trace_log(fh))
    assert len(seqs) == 60
    assert {s.agent_role for s in seqs} == {"Senior Data Researcher"}
    assert all(s.tool_names[0] == "list_files" and s.tool_names[-1] == "send_email" for s in seqs)

import pathlib

import pytest

from core.trace_model import ExecutionSequence, TraceEvent

ROOT = pathlib.Path(__file__).resolve().parents[1]
FIXTURES = pathlib.Path(__file__).resolve().parent / "fixtures"

BASE_MS = 1740960000000  # 2025-03-03 00:00 UTC


def make_event(trace_id="t1", seq_index=0, tool_name="read_file", tool_input="./AI/a.txt", **kw):
    values = dict(
        trace_id=trace_id,
        seq_index=seq_index,
        timestamp=BASE_MS + 10 * 3_600_000 + seq_index * 2000,
        agent_role="Senior Data Researcher",
        thoughts="",
        tool_name=tool_name,
        tool_input=tool_input,
        task_result="",
        input_tokens=500,
        output_tokens=100,
        idle_ms=2000 if seq_index else 0,
        processing_ms=seq_index * 2000,
    )
    values.update(kw)
    return TraceEvent(**values)


def make_sequence(trace_id, tools, role="Senior Data Researcher"):
    events = tuple(
        make_event(trace_id=trace_id, seq_index=i, tool_name=tool, tool_input=f"{tool}-input", agent_role=role)
        for i, tool in enumerate(tools)
    )
    return ExecutionSequence(trace_id=trace_id, agent_role=role, events=events)


@pytest.fixture
def event_factory():
    return make_event


@pytest.fixture
def sequence_factory():
    return make_sequence


@pytest.fixture
def file_writer_inputs():
    return (FIXTURES / "file_writer_inputs.txt").read_text(encoding="utf-8").splitlines()

"""
Trace data model: parse newline-delimited JSON trace logs into tool-invocation
events, recompute timing attributes from timestamps, and assemble per-trace
execution sequences.

Token counts are taken as per-event values (one LLM call per tool invocation),
not running totals per trace.
"""
import dataclasses
import json
import logging
from collections import defaultdict
from dataclasses import dataclass
from typing import IO, Dict, FrozenSet, Iterable, List, Sequence, Tuple

import pandas as pd

from core.cfg_learn import collapse_path
from core.errors import SequenceError, TraceFormatError


logger = logging.getLogger(__name__)

REQUIRED_FIELDS = ("trace_id", "seq_index", "timestamp_ms", "agent_role", "tool_name", "tool_input")
OPTIONAL_TEXT_FIELDS = ("thoughts", "task_result")
OPTIONAL_COUNT_FIELDS = ("input_tokens", "output_tokens")
RECORD_FIELDS = (
    "trace_id",
    "seq_index",
    "timestamp_ms",
    "agent_role",
    "thoughts",
    "tool_name",
    "tool_input",
    "task_result",
    "input_tokens",
    "output_tokens",
)


@dataclass(frozen=True)
class TraceEvent:
    trace_id: str
    seq_index: int
    timestamp: int
    agent_role: str
    thoughts: str
    tool_name: str
    tool_input: str
    task_result: str
    input_tokens: int
    output_tokens: int
    idle_ms: int = 0
    processing_ms: int = 0


@dataclass(frozen=True)
class ExecutionSequence:
    trace_id: str
    agent_role: str
    events: Tuple[TraceEvent, ...]

    @property
    def tool_names(self) -> List[str]:
        return [e.tool_name for e in self.events]

    def __len__(self) -> int:
        return len(self.events)


@dataclass(frozen=True)
class ToolCatalog:
    tools: FrozenSet[str]

    @classmethod
    def from_sequences(cls, sequences: Iterable[ExecutionSequence]) -> "ToolCatalog":
        tools = frozenset(e.tool_name for seq in sequences for e in seq.events)
        if not tools:
            raise SequenceError("Tool catalog is empty: corpus contains no tool invocations.")
        return cls(tools=tools)

    def __contains__(self, tool: object) -> bool:
        return tool in self.tools

    def __len__(self) -> int:
        return len(self.tools)


def parse_trace_log(stream: IO[bytes] | Iterable[bytes]) -> List[TraceEvent]:
    events: List[TraceEvent] = []
    seen: Dict[Tuple[str, int], int] = {}
    for line_no, raw in enumerate(stream, start=1):
        if isinstance(raw, bytes):
            try:
                text = raw.decode("utf-8")
            except UnicodeDecodeError as exc:
                raise TraceFormatError(line_no, "<record>", f"not UTF-8: {exc}") from exc
        else:
            text = raw
        if not text.strip():
            continue
        event = _parse_record(text, line_no)
        key = (event.trace_id, event.seq_index)
        if key in seen:
            raise TraceFormatError(
                line_no,
                "seq_index",
                f"duplicate (trace_id={event.trace_id!r}, seq_index={event.seq_index}); first seen on line {seen[key]}",
            )
        seen[key] = line_no
        events.append(event)
    return _with_timing(events, seen)


def serialize_trace_log(events: Sequence[TraceEvent]) -> bytes:
    lines = []
    for e in events:
        record = {
            "trace_id": e.trace_id,
            "seq_index": e.seq_index,
            "timestamp_ms": e.timestamp,
            "agent_role": e.agent_role,
            "thoughts": e.thoughts,
            "tool_name": e.tool_name,
            "tool_input": e.tool_input,
            "task_result": e.task_result,
            "input_tokens": e.input_tokens,
            "output_tokens": e.output_tokens,
        }
        lines.append(json.dumps(record, ensure_ascii=False, sort_keys=True))
    return ("\n".join(lines) + ("\n" if lines else "")).encode("utf-8")


def assemble_sequences(events: Sequence[TraceEvent]) -> List[ExecutionSequence]:
    grouped: Dict[str, List[TraceEvent]] = defaultdict(list)
    for e in events:
        grouped[e.trace_id].append(e)

    sequences: List[ExecutionSequence] = []
    for trace_id in sorted(grouped):
        trace_events = sorted(grouped[trace_id], key=lambda e: e.seq_index)
        for expected, e in enumerate(trace_events):
            if e.seq_index != expected:
                raise SequenceError(
                    f"Trace {trace_id!r}: seq_index gap, expected {expected} but found {e.seq_index}."
                )
        roles = {e.agent_role for e in trace_events}
        if len(roles) > 1:
            raise SequenceError(f"Trace {trace_id!r}: mixed agent_role values {sorted(roles)}.")
        sequences.append(
            ExecutionSequence(trace_id=trace_id, agent_role=trace_events[0].agent_role, events=tuple(trace_events))
        )
    return sequences


def filter_rare(
    sequences: Sequence[ExecutionSequence], min_freq: int
) -> Tuple[List[ExecutionSequence], List[ExecutionSequence]]:
    if min_freq < 1:
        raise ValueError("min_freq must be >= 1")
    if not sequences:
        return [], []

    paths = pd.Series([" > ".join(collapse_path(seq.tool_names)) for seq in sequences])
    counts = paths.map(paths.value_counts())
    kept = [seq for seq, n in zip(sequences, counts) if n >= min_freq]
    flagged = [seq for seq, n in zip(sequences, counts) if n < min_freq]
    if flagged:
        logger.warning(
            "Flagged %d of %d sequences with tool paths seen fewer than %d times",
            len(flagged),
            len(sequences),
            min_freq,
        )
    return kept, flagged


def _parse_record(text: str, line_no: int) -> TraceEvent:
    try:
        record = json.loads(text)
    except json.JSONDecodeError as exc:
        raise TraceFormatError(line_no, "<record>", f"invalid JSON: {exc.msg}") from exc
    if not isinstance(record, dict):
        raise TraceFormatError(line_no, "<record>", "record must be a JSON object")

    for field in REQUIRED_FIELDS:
        if field not in record:
            raise TraceFormatError(line_no, field, "missing required field")

    for field in ("trace_id", "agent_role", "tool_name", "tool_input") + OPTIONAL_TEXT_FIELDS:
        value = record.get(field, "")
        if not isinstance(value, str):
            raise TraceFormatError(line_no, field, f"expected string, got {type(value).__name__}")
    if not record["tool_name"]:
        raise TraceFormatError(line_no, "tool_name", "must be non-empty")

    for field in ("seq_index", "timestamp_ms") + OPTIONAL_COUNT_FIELDS:
        value = record.get(field, 0)
        if isinstance(value, bool) or not isinstance(value, int):
            raise TraceFormatError(line_no, field, f"expected integer, got {value!r}")
        if value < 0:
            raise TraceFormatError(line_no, field, f"must be non-negative, got {value}")

    return TraceEvent(
        trace_id=record["trace_id"],
        seq_index=record["seq_index"],
        timestamp=record["timestamp_ms"],
        agent_role=record["agent_role"],
        thoughts=record.get("thoughts", ""),
        tool_name=record["tool_name"],
        tool_input=record["tool_input"],
        task_result=record.get("task_result", ""),
        input_tokens=record.get("input_tokens", 0),
        output_tokens=record.get("output_tokens", 0),
    )


def _with_timing(events: List[TraceEvent], lines: Dict[Tuple[str, int], int]) -> List[TraceEvent]:
    """Recompute idle_ms / processing_ms from timestamps, keeping file order."""
    by_trace: Dict[str, Dict[int, TraceEvent]] = defaultdict(dict)
    for e in events:
        by_trace[e.trace_id][e.seq_index] = e

    timed: Dict[Tuple[str, int], TraceEvent] = {}
    for trace_id, indexed in by_trace.items():
        ordered = [indexed[i] for i in sorted(indexed)]
        first_ts = ordered[0].timestamp
        prev_ts = first_ts
        for e in ordered:
            if e.timestamp < prev_ts:
                raise TraceFormatError(
                    lines[(trace_id, e.seq_index)],
                    "timestamp_ms",
                    f"trace {trace_id!r} goes back in time at seq_index {e.seq_index}",
                )
            timed[(trace_id, e.seq_index)] = dataclasses.replace(
                e, idle_ms=e.timestamp - prev_ts, processing_ms=e.timestamp - first_ts
            )
            prev_ts = e.timestamp
    return [timed[(e.trace_id, e.seq_index)] for e in events]

"""
Control-flow learning: build the tool-transition graph from benign sequences,
derive per-tool leading-context path sets, and answer admissibility queries
(path mode and the looser edge mode).
"""
from dataclasses import dataclass
from typing import TYPE_CHECKING, Dict, FrozenSet, Iterable, List, Optional, Sequence, Tuple

from core.errors import LearnError

if TYPE_CHECKING:
    from core.trace_model import ExecutionSequence


Path = Tuple[str, ...]


@dataclass(frozen=True)
class Cfg:
    nodes: FrozenSet[str]
    edges: FrozenSet[Tuple[str, str]]
    start_tools: FrozenSet[str]

    def to_dict(self) -> Dict[str, list]:
        return {
            "nodes": sorted(self.nodes),
            "edges": [list(e) for e in sorted(self.edges)],
            "start_tools": sorted(self.start_tools),
        }


@dataclass(frozen=True)
class ToolFlowSpec:
    tool_name: str
    repeat: bool
    required_leading_contexts: FrozenSet[Path]
    allowed_predecessors: FrozenSet[str] = frozenset()
    may_start: bool = False

    def sorted_contexts(self) -> List[Path]:
        return sorted(self.required_leading_contexts, key=lambda p: (len(p), p))


def collapse_path(tools: Iterable[str]) -> List[str]:
    collapsed: List[str] = []
    for tool in tools:
        if not collapsed or collapsed[-1] != tool:
            collapsed.append(tool)
    return collapsed


def build_cfg(sequences: Sequence["ExecutionSequence"]) -> Cfg:
    if not sequences:
        raise LearnError("Cannot build a control-flow graph from an empty corpus.")
    nodes = set()
    edges = set()
    starts = set()
    for seq in sequences:
        names = seq.tool_names
        if not names:
            continue
        starts.add(names[0])
        nodes.update(names)
        edges.update(zip(names, names[1:]))
    return Cfg(nodes=frozenset(nodes), edges=frozenset(edges), start_tools=frozenset(starts))


def leading_contexts(sequences: Sequence["ExecutionSequence"], tool: str) -> ToolFlowSpec:
    contexts = set()
    predecessors = set()
    may_start = False
    repeat = False
    for seq in sequences:
        names = seq.tool_names
        positions = [i for i, name in enumerate(names) if name == tool]
        if len(positions) >= 2:
            repeat = True
        for i in positions:
            contexts.add(tuple(collapse_path(names[:i])))
            if i == 0:
                may_start = True
            else:
                predecessors.add(names[i - 1])
    if not contexts:
        raise LearnError(f"Tool {tool!r} does not appear in any training sequence.")
    return ToolFlowSpec(
        tool_name=tool,
        repeat=repeat,
        required_leading_contexts=frozenset(contexts),
        allowed_predecessors=frozenset(predecessors),
        may_start=may_start,
    )


def flow_specs(sequences: Sequence["ExecutionSequence"]) -> Dict[str, ToolFlowSpec]:
    tools = sorted({name for seq in sequences for name in seq.tool_names})
    return {tool: leading_contexts(sequences, tool) for tool in tools}


def path_allowed(spec: ToolFlowSpec, prior_tools: Sequence[str]) -> bool:
    return tuple(collapse_path(prior_tools)) in spec.required_leading_contexts


def edge_allowed(cfg: Cfg, from_tool: Optional[str], to_tool: str) -> bool:
    if from_tool is None:
        return to_tool in cfg.start_tools
    return (from_tool, to_tool) in cfg.edges


def local_cfg(spec: ToolFlowSpec) -> Cfg:
    """The slice of the graph incident on one tool, rebuilt from its flow spec."""
    nodes = set(spec.allowed_predecessors) | {spec.tool_name}
    return Cfg(
        nodes=frozenset(nodes),
        edges=frozenset((p, spec.tool_name) for p in spec.allowed_predecessors),
        start_tools=frozenset({spec.tool_name}) if spec.may_start else frozenset(),
    )


def render_flow(spec: ToolFlowSpec) -> List[str]:
    lines = [f"{spec.tool_name}:", f"  repeat: {str(spec.repeat).lower()}", "  required_leading_contexts:"]
    for path in spec.sorted_contexts():
        if not path:
            lines.append("    -- (trace start)")
            continue
        lines.append("    path:")
        lines.extend(f"      -- {step}" for step in path)
    return lines

"""
Per-agent, per-tool access-control policies: assembly, canonical JSON
serialization (validated with pydantic), human-readable rendering, and a
directory-backed repository with atomic snapshot replacement.
"""
import json
import logging
import pathlib
import re
import threading
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Dict, FrozenSet, List, Mapping, Optional, Sequence, Tuple

from pydantic import BaseModel, ConfigDict, Field, ValidationError

from core.cfg_learn import ToolFlowSpec, render_flow
from core.embed import NUMERIC_ATTRIBUTES, EmbedConfig
from core.errors import ConfigError, PolicySchemaError, RepositoryError
from core.hashing import fnv1a_64_hex
from core.rule_induct import AttributePredicate, ClusterRule, Interval, TextualPredicate, check_portable


logger = logging.getLogger(__name__)


def canonical_tool(tool_name: str) -> str:
    return tool_name.strip().lower()


def role_key(agent_role: str) -> str:
    return re.sub(r"[^a-z0-9]+", "_", agent_role.strip().lower()).strip("_")


def make_rule_id(agent_role: str, tool_name: str) -> str:
    return f"{role_key(agent_role)}/{fnv1a_64_hex(canonical_tool(tool_name))}"


@dataclass(frozen=True)
class AccessControlPolicy:
    rule_id: str
    agent_role: str
    tool_name: str
    rules: Tuple[ClusterRule, ...]
    flow: ToolFlowSpec
    embed_config: EmbedConfig
    created_at: int
    source_trace_count: int

    @property
    def envelope(self) -> AttributePredicate:
        """Union of the per-rule ranges, for display only."""
        env = self.rules[0].attribute
        for rule in self.rules[1:]:
            env = env.union(rule.attribute)
        return env


def build_policy(
    agent_role: str,
    tool_name: str,
    rules: Sequence[ClusterRule],
    flow: ToolFlowSpec,
    embed_config: EmbedConfig,
    source_trace_count: int,
    created_at: int,
) -> AccessControlPolicy:
    if not rules:
        raise PolicySchemaError("rules", "a policy needs at least one cluster rule")
    if flow.tool_name != tool_name:
        raise PolicySchemaError("flow.tool_name", f"{flow.tool_name!r} does not match {tool_name!r}")
    if not tool_name.strip():
        raise PolicySchemaError("tool_name", "must be non-empty")
    return AccessControlPolicy(
        rule_id=make_rule_id(agent_role, tool_name),
        agent_role=agent_role,
        tool_name=tool_name,
        rules=tuple(sorted(rules, key=lambda r: r.rule_index)),
        flow=flow,
        embed_config=embed_config,
        created_at=int(created_at),
        source_trace_count=int(source_trace_count),
    )


# --- document schema ---------------------------------------------------------


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class BoundsDoc(_Strict):
    min: float
    max: float


class AttributeConstraintsDoc(_Strict):
    rule_index: int = Field(ge=0)
    support: int = Field(ge=1)
    max_input_tokens: BoundsDoc
    max_output_tokens: BoundsDoc
    min_hour: BoundsDoc
    max_hour: BoundsDoc
    max_idle_time: BoundsDoc
    max_processing_time: BoundsDoc


class InputPatternsDoc(_Strict):
    rule_index: int = Field(ge=0)
    patterns: List[str] = Field(min_length=1)


class FlowDoc(_Strict):
    repeat: bool
    required_leading_contexts: List[List[str]] = Field(min_length=1)
    allowed_predecessors: List[str] = Field(default_factory=list)
    may_start: bool = False


class EmbedConfigDoc(_Strict):
    token_cap: int = Field(gt=0)
    idle_cap_ms: int = Field(gt=0)
    processing_cap_ms: int = Field(gt=0)
    timezone_offset_minutes: int = Field(gt=-24 * 60, lt=24 * 60)


class MetadataDoc(_Strict):
    created_at: int = Field(ge=0)
    source_trace_count: int = Field(ge=0)
    attribute_envelope: Optional[Dict[str, BoundsDoc]] = None


class PolicyDocument(_Strict):
    rule_id: str
    agent_role: str
    tool_name: str = Field(min_length=1)
    attribute_constraints: List[AttributeConstraintsDoc] = Field(min_length=1)
    input_patterns: List[InputPatternsDoc] = Field(min_length=1)
    flow: FlowDoc
    embed_config: EmbedConfigDoc
    metadata: MetadataDoc


def _bounds(iv: Interval) -> Dict[str, float]:
    return {"min": float(iv.lo), "max": float(iv.hi)}


def to_document(policy: AccessControlPolicy) -> Dict:
    flow = policy.flow
    return {
        "rule_id": policy.rule_id,
        "agent_role": policy.agent_role,
        "tool_name": policy.tool_name,
        "attribute_constraints": [
            {"rule_index": r.rule_index, "support": r.support, **{k: _bounds(iv) for k, iv in r.attribute.items()}}
            for r in policy.rules
        ],
        "input_patterns": [{"rule_index": r.rule_index, "patterns": list(r.textual.patterns)} for r in policy.rules],
        "flow": {
            "repeat": flow.repeat,
            "required_leading_contexts": [list(p) for p in flow.sorted_contexts()],
            "allowed_predecessors": sorted(flow.allowed_predecessors),
            "may_start": flow.may_start,
        },
        "embed_config": policy.embed_config.to_dict(),
        "metadata": {
            "created_at": policy.created_at,
            "source_trace_count": policy.source_trace_count,
            "attribute_envelope": {k: _bounds(iv) for k, iv in policy.envelope.items()},
        },
    }


def serialize(policy: AccessControlPolicy) -> bytes:
    text = json.dumps(to_document(policy), sort_keys=True, indent=2, ensure_ascii=False)
    return (text + "\n").encode("utf-8")


def deserialize(data: bytes | str, source: Optional[str] = None) -> AccessControlPolicy:
    try:
        raw = json.loads(data)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise PolicySchemaError("<document>", f"not valid JSON: {exc}", source) from exc
    try:
        doc = PolicyDocument.model_validate(raw)
    except ValidationError as exc:
        first = exc.errors()[0]
        where = ".".join(str(part) for part in first["loc"]) or "<document>"
        raise PolicySchemaError(where, first["msg"], source) from exc
    return from_document(doc, source)


def from_document(doc: PolicyDocument, source: Optional[str] = None) -> AccessControlPolicy:
    expected_id = make_rule_id(doc.agent_role, doc.tool_name)
    if doc.rule_id != expected_id:
        raise PolicySchemaError("rule_id", f"expected {expected_id!r} for this role and tool", source)

    patterns_by_index: Dict[int, List[str]] = {}
    for i, entry in enumerate(doc.input_patterns):
        for j, pattern in enumerate(entry.patterns):
            try:
                check_portable(pattern)
            except ValueError as exc:
                raise PolicySchemaError(f"input_patterns.{i}.patterns.{j}", str(exc), source) from exc
        if entry.rule_index in patterns_by_index:
            raise PolicySchemaError(f"input_patterns.{i}.rule_index", "duplicate rule_index", source)
        patterns_by_index[entry.rule_index] = entry.patterns

    rules = []
    for i, entry in enumerate(doc.attribute_constraints):
        if entry.rule_index not in patterns_by_index:
            raise PolicySchemaError(f"attribute_constraints.{i}.rule_index", "no matching input_patterns entry", source)
        intervals = {}
        for name in NUMERIC_ATTRIBUTES:
            b = getattr(entry, name)
            if b.min > b.max:
                raise PolicySchemaError(f"attribute_constraints.{i}.{name}", "min exceeds max", source)
            if name.endswith("_hour") and not (0 <= b.min and b.max < 24):
                raise PolicySchemaError(f"attribute_constraints.{i}.{name}", "hour bounds must lie in [0, 24)", source)
            intervals[name] = Interval(b.min, b.max)
        rules.append(
            ClusterRule(
                rule_index=entry.rule_index,
                textual=TextualPredicate(patterns=tuple(patterns_by_index.pop(entry.rule_index))),
                attribute=AttributePredicate(**intervals),
                support=entry.support,
            )
        )
    if patterns_by_index:
        raise PolicySchemaError("input_patterns", f"rule_index {sorted(patterns_by_index)} has no attribute constraints", source)

    flow = ToolFlowSpec(
        tool_name=doc.tool_name,
        repeat=doc.flow.repeat,
        required_leading_contexts=frozenset(tuple(p) for p in doc.flow.required_leading_contexts),
        allowed_predecessors=frozenset(doc.flow.allowed_predecessors),
        may_start=doc.flow.may_start,
    )
    try:
        embed_config = EmbedConfig(**doc.embed_config.model_dump())
    except ConfigError as exc:
        raise PolicySchemaError(f"embed_config.{exc.key.split('.')[-1]}", str(exc), source) from exc
    return AccessControlPolicy(
        rule_id=doc.rule_id,
        agent_role=doc.agent_role,
        tool_name=doc.tool_name,
        rules=tuple(sorted(rules, key=lambda r: r.rule_index)),
        flow=flow,
        embed_config=embed_config,
        created_at=doc.metadata.created_at,
        source_trace_count=doc.metadata.source_trace_count,
    )


# --- rendering ----------------------------------------------------------------


def format_hour(value: float) -> str:
    total = int(round(value * 60))
    return f"{total // 60:02d}:{total % 60:02d}"


def _format_range(name: str, iv: Interval) -> str:
    return f"{name}: {iv.lo:g} .. {iv.hi:g}"


def render_policy(policy: AccessControlPolicy) -> str:
    env = policy.envelope
    lines = [
        f"rule_id: {policy.rule_id}",
        f"agent_role: {policy.agent_role}",
        f"tool_name: {policy.tool_name}",
        "attribute_constraints (policy envelope):",
    ]
    for name, iv in env.items():
        if not name.endswith("_hour"):
            lines.append("  " + _format_range(name, iv))
    lines.append(f"  working_hours: {format_hour(env.min_hour.lo)}-{format_hour(env.max_hour.hi)}")
    lines.append("rules:")
    for rule in policy.rules:
        attr = rule.attribute
        lines.append(f"  [{rule.rule_index}] support={rule.support}")
        lines.append("    input_patterns:")
        lines.extend(f"      - {p}" for p in rule.textual.patterns)
        lines.append(f"    working_hours: {format_hour(attr.min_hour.lo)}-{format_hour(attr.max_hour.hi)}")
        for name, iv in attr.items():
            if not name.endswith("_hour"):
                lines.append("    " + _format_range(name, iv))
    lines.append("flow:")
    lines.extend("  " + line for line in render_flow(policy.flow))
    return "\n".join(lines)


# --- repository -----------------------------------------------------------------


def policy_path(directory: pathlib.Path, policy: AccessControlPolicy) -> pathlib.Path:
    tool_slug = re.sub(r"[^a-z0-9]+", "_", canonical_tool(policy.tool_name)).strip("_") or "tool"
    return directory / role_key(policy.agent_role) / f"{tool_slug}.json"


@dataclass(frozen=True)
class PolicySnapshot:
    policies: Mapping[str, AccessControlPolicy] = field(default_factory=lambda: MappingProxyType({}))

    @property
    def known_tools(self) -> FrozenSet[str]:
        return frozenset(canonical_tool(p.tool_name) for p in self.policies.values())

    def lookup(self, agent_role: str, tool_name: str) -> Optional[AccessControlPolicy]:
        policy = self.policies.get(make_rule_id(agent_role, tool_name))
        if policy is None or canonical_tool(policy.tool_name) != canonical_tool(tool_name):
            return None
        return policy

    def __len__(self) -> int:
        return len(self.policies)


def _check_collision(policies: Mapping[str, AccessControlPolicy], policy: AccessControlPolicy) -> None:
    existing = policies.get(policy.rule_id)
    if existing is None:
        return
    same_tool = canonical_tool(existing.tool_name) == canonical_tool(policy.tool_name)
    if not same_tool or existing.agent_role != policy.agent_role:
        raise RepositoryError(
            f"rule_id collision on {policy.rule_id}: "
            f"({existing.agent_role!r}, {existing.tool_name!r}) vs ({policy.agent_role!r}, {policy.tool_name!r})"
        )


class PolicyRepository:
    """Many readers, one writer at a time; readers always see a whole snapshot."""

    def __init__(self, directory: Optional[str | pathlib.Path] = None) -> None:
        self.directory = pathlib.Path(directory) if directory else None
        self._lock = threading.Lock()
        self._snapshot = PolicySnapshot()

    def snapshot(self) -> PolicySnapshot:
        return self._snapshot

    def get(self, rule_id: str) -> Optional[AccessControlPolicy]:
        return self._snapshot.policies.get(rule_id)

    def list(self) -> List[AccessControlPolicy]:
        snap = self._snapshot
        return [snap.policies[k] for k in sorted(snap.policies)]

    def put(self, policy: AccessControlPolicy, write: bool = True) -> PolicySnapshot:
        with self._lock:
            current = dict(self._snapshot.policies)
            _check_collision(current, policy)
            if write and self.directory is not None:
                path = policy_path(self.directory, policy)
                path.parent.mkdir(parents=True, exist_ok=True)
                path.write_bytes(serialize(policy))
            current[policy.rule_id] = policy
            self._snapshot = PolicySnapshot(MappingProxyType(current))
            return self._snapshot

    def reload(self, directory: Optional[str | pathlib.Path] = None) -> PolicySnapshot:
        directory = pathlib.Path(directory) if directory else self.directory
        with self._lock:
            try:
                loaded = self._read_directory(directory)
            except (PolicySchemaError, RepositoryError, OSError) as exc:
                logger.error("Policy reload from %s failed, keeping %d loaded policies: %s", directory, len(self._snapshot), exc)
                if isinstance(exc, RepositoryError):
                    raise
                raise RepositoryError(str(exc)) from exc
            self.directory = directory
            self._snapshot = PolicySnapshot(MappingProxyType(loaded))
            logger.info("Loaded %d policies from %s", len(loaded), directory)
            return self._snapshot

    @staticmethod
    def _read_directory(directory: Optional[pathlib.Path]) -> Dict[str, AccessControlPolicy]:
        if directory is None or not directory.is_dir():
            raise RepositoryError(f"Policy directory not found: {directory}")
        loaded: Dict[str, AccessControlPolicy] = {}
        for path in sorted(directory.rglob("*.json")):
            policy = deserialize(path.read_bytes(), source=str(path))
            if policy.rule_id in loaded:
                _check_collision(loaded, policy)
                raise RepositoryError(f"Two policy files for {policy.rule_id}; second is {path}")
            loaded[policy.rule_id] = policy
        return loaded

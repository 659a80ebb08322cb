"""
Runtime enforcement: check one tool invocation against its policy and return an
allow / alert / terminate verdict with itemized violations.

A policy accepts an invocation when its leading context is allowed AND some
single cluster rule accepts it (input pattern and attribute ranges together).
"""
import logging
import threading
from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Set, Tuple

from core.cfg_learn import ToolFlowSpec, collapse_path, path_allowed
from core.errors import ConfigError
from core.policy_store import AccessControlPolicy, PolicySnapshot, canonical_tool
from core.rule_induct import ClusterRule, TextualPredicate, attribute_values
from core.trace_model import ExecutionSequence, TraceEvent


logger = logging.getLogger(__name__)

DECISIONS = ("allow", "alert", "terminate")
SEVERITIES = ("advisory", "alert", "terminate")
VIOLATION_KINDS = ("flow", "input_pattern", "attribute", "unknown_tool", "no_policy")
_RANK = {"advisory": 0, "alert": 1, "terminate": 2}

DEFAULT_SEVERITY = {"flow": "terminate", "input_pattern": "terminate", "attribute": "alert"}


@dataclass(frozen=True)
class InvocationContext:
    agent_role: str
    tool_name: str
    tool_input: str = ""
    thoughts: str = ""
    input_tokens: int = 0
    output_tokens: int = 0
    timestamp: int = 0
    idle_ms: int = 0
    processing_ms: int = 0
    prior_tools: Tuple[str, ...] = ()


@dataclass(frozen=True)
class Violation:
    kind: str
    detail: str
    rule_index: Optional[int] = None

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass(frozen=True)
class Verdict:
    decision: str
    violations: Tuple[Violation, ...] = ()

    @property
    def allowed(self) -> bool:
        return self.decision == "allow"

    def to_dict(self) -> Dict[str, Any]:
        return {"decision": self.decision, "violations": [v.to_dict() for v in self.violations]}


@dataclass(frozen=True)
class EnforceConfig:
    attribute_slack_factor: float = 2.0
    time_constraints_exempt_from_slack: bool = True
    severity: Mapping[str, str] = field(default_factory=lambda: dict(DEFAULT_SEVERITY))
    unknown_tool: str = "terminate"
    flow_mode: str = "path"

    def __post_init__(self) -> None:
        if self.attribute_slack_factor < 1:
            raise ConfigError("enforce.attribute_slack_factor", "must be >= 1")
        if self.unknown_tool not in ("terminate", "alert"):
            raise ConfigError("enforce.unknown_tool", "must be 'terminate' or 'alert'")
        if self.flow_mode not in ("path", "edge"):
            raise ConfigError("enforce.flow_mode", "must be 'path' or 'edge'")
        for kind, level in self.severity.items():
            if kind not in VIOLATION_KINDS:
                raise ConfigError(f"enforce.severity.{kind}", "unknown violation kind")
            if level not in SEVERITIES:
                raise ConfigError(f"enforce.severity.{kind}", f"must be one of {SEVERITIES}")

    @classmethod
    def from_settings(cls, settings: Mapping[str, Any]) -> "EnforceConfig":
        section = settings.get("enforce", {})
        return cls(
            attribute_slack_factor=float(section.get("attribute_slack_factor", 2.0)),
            time_constraints_exempt_from_slack=bool(section.get("time_constraints_exempt_from_slack", True)),
            severity={**DEFAULT_SEVERITY, **(section.get("severity") or {})},
            unknown_tool=str(section.get("unknown_tool", "terminate")),
            flow_mode=str(section.get("flow_mode", "path")),
        )

    def severity_of(self, kind: str) -> str:
        if kind in ("unknown_tool", "no_policy"):
            return self.severity.get(kind, self.unknown_tool)
        return self.severity.get(kind, "terminate")


def decide(violations: Sequence[Violation], cfg: EnforceConfig) -> Verdict:
    level = max((_RANK[cfg.severity_of(v.kind)] for v in violations), default=0)
    decision = {0: "allow", 1: "alert", 2: "terminate"}[level]
    return Verdict(decision=decision, violations=tuple(violations))


def flow_allowed(flow: ToolFlowSpec, prior_tools: Sequence[str], mode: str = "path") -> bool:
    if mode == "edge":
        if not prior_tools:
            return flow.may_start
        return prior_tools[-1] in flow.allowed_predecessors
    return path_allowed(flow, prior_tools)


def check_input(tool_input: str, predicate: TextualPredicate) -> bool:
    return predicate.matches(tool_input)


def check_attributes(
    ctx: InvocationContext,
    rule: ClusterRule,
    cfg: EnforceConfig,
    offset_minutes: int = 0,
) -> List[Violation]:
    values = attribute_values(
        ctx.input_tokens, ctx.output_tokens, ctx.timestamp, ctx.idle_ms, ctx.processing_ms, offset_minutes
    )
    f = cfg.attribute_slack_factor
    violations = []
    for name, iv in rule.attribute.items():
        value = values[name]
        is_time = name.endswith("_hour")
        if is_time and cfg.time_constraints_exempt_from_slack:
            # hour window: earliest start .. latest end, no slack
            ok = value >= iv.lo if name == "min_hour" else value <= iv.hi
            bound = f"{iv.lo:g}" if name == "min_hour" else f"{iv.hi:g}"
            if not ok:
                violations.append(
                    Violation("attribute", f"{name}: {value:g} outside window bound {bound}", rule.rule_index)
                )
            continue
        lo, hi = max(iv.lo / f, 0.0), iv.hi * f
        if not lo <= value <= hi:
            violations.append(
                Violation("attribute", f"{name}: {value:g} outside [{lo:g}, {hi:g}]", rule.rule_index)
            )
    return violations


def evaluate_rule(ctx: InvocationContext, rule: ClusterRule, cfg: EnforceConfig, offset_minutes: int = 0) -> List[Violation]:
    failed = []
    if not check_input(ctx.tool_input, rule.textual):
        failed.append(Violation("input_pattern", f"tool_input matches none of {len(rule.textual.patterns)} pattern(s)", rule.rule_index))
    failed.extend(check_attributes(ctx, rule, cfg, offset_minutes))
    return failed


def check_policy(ctx: InvocationContext, policy: AccessControlPolicy, cfg: EnforceConfig) -> Verdict:
    violations: List[Violation] = []
    if not flow_allowed(policy.flow, ctx.prior_tools, cfg.flow_mode):
        context = " > ".join(collapse_path(ctx.prior_tools)) or "(trace start)"
        violations.append(Violation("flow", f"{policy.tool_name} not allowed after {context}"))

    offset = policy.embed_config.timezone_offset_minutes
    best: Optional[List[Violation]] = None
    for rule in policy.rules:
        failed = evaluate_rule(ctx, rule, cfg, offset)
        if best is None or len(failed) < len(best):
            best = failed
        if not failed:
            break
    violations.extend(best or [])
    return decide(violations, cfg)


def check_invocation(ctx: InvocationContext, snapshot: PolicySnapshot, cfg: Optional[EnforceConfig] = None) -> Verdict:
    cfg = cfg or EnforceConfig()
    policy = snapshot.lookup(ctx.agent_role, ctx.tool_name)
    if policy is None:
        if canonical_tool(ctx.tool_name) in snapshot.known_tools:
            violation = Violation("no_policy", f"no policy for role {ctx.agent_role!r} and tool {ctx.tool_name!r}")
        else:
            violation = Violation("unknown_tool", f"tool {ctx.tool_name!r} is not covered by any policy")
        return decide([violation], cfg)
    return check_policy(ctx, policy, cfg)


def context_from_event(event: TraceEvent, prior_tools: Sequence[str]) -> InvocationContext:
    return InvocationContext(
        agent_role=event.agent_role,
        tool_name=event.tool_name,
        tool_input=event.tool_input,
        thoughts=event.thoughts,
        input_tokens=event.input_tokens,
        output_tokens=event.output_tokens,
        timestamp=event.timestamp,
        idle_ms=event.idle_ms,
        processing_ms=event.processing_ms,
        prior_tools=tuple(prior_tools),
    )


def replay_sequence(sequence: ExecutionSequence, snapshot: PolicySnapshot, cfg: Optional[EnforceConfig] = None) -> List[Verdict]:
    """Check every step of a recorded trace, each against the tools before it."""
    names = sequence.tool_names
    return [check_invocation(context_from_event(e, names[:i]), snapshot, cfg) for i, e in enumerate(sequence.events)]


# --- violation callback ---------------------------------------------------------


@dataclass(frozen=True)
class Acknowledgment:
    delivered: bool
    decision: str
    kill: bool
    error: Optional[str] = None


class ViolationDispatcher:
    """Delivers non-allow verdicts to a sink and keeps the per-trace kill flags."""

    def __init__(self, sink: Callable[[Verdict], Any]) -> None:
        self.sink = sink
        self._killed: Set[str] = set()
        self._lock = threading.Lock()

    def on_violation(self, verdict: Verdict, trace_id: Optional[str] = None) -> Acknowledgment:
        if verdict.allowed:
            return Acknowledgment(delivered=False, decision=verdict.decision, kill=False)
        kill = verdict.decision == "terminate"
        if kill and trace_id is not None:
            with self._lock:
                self._killed.add(trace_id)
        try:
            self.sink(verdict)
        except Exception as exc:
            logger.warning("Violation sink failed (decision %s unchanged): %s", verdict.decision, exc)
            return Acknowledgment(delivered=False, decision=verdict.decision, kill=kill, error=str(exc))
        return Acknowledgment(delivered=True, decision=verdict.decision, kill=kill)

    def is_killed(self, trace_id: str) -> bool:
        with self._lock:
            return trace_id in self._killed

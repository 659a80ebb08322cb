import numpy as np
import pytest

from conftest import BASE_MS, make_sequence
from core.cfg_learn import ToolFlowSpec, flow_specs
from core.embed import EmbedConfig
from core.enforcer import (
    EnforceConfig,
    InvocationContext,
    Verdict,
    Violation,
    ViolationDispatcher,
    check_invocation,
    check_policy,
    decide,
    replay_sequence,
)
from core.errors import ConfigError
from core.policy_store import PolicyRepository, build_policy
from core.rule_induct import AttributePredicate, ClusterRule, Interval, TextualPredicate
from test_policy_store import random_policy


ROLE = "Senior Data Researcher"
TEN_AM = BASE_MS + 10 * 3_600_000


def _rule(index=0, patterns=(r"\./(?:AI|Cars)/[a-z\-]{3,20}\.txt",), **ranges):
    bounds = dict(
        max_input_tokens=Interval(100, 1000),
        max_output_tokens=Interval(50, 200),
        min_hour=Interval(9.0, 12.0),
        max_hour=Interval(11.0, 17.5),
        max_idle_time=Interval(1000, 5000),
        max_processing_time=Interval(1000, 20000),
    )
    bounds.update(ranges)
    return ClusterRule(index, TextualPredicate(tuple(patterns)), AttributePredicate(**bounds), support=5)


def _policy(rules=None, tool="read_file", contexts=(("list_files",), ("list_files", "read_file"))):
    flow = ToolFlowSpec(
        tool_name=tool,
        repeat=True,
        required_leading_contexts=frozenset(contexts),
        allowed_predecessors=frozenset(p[-1] for p in contexts if p),
        may_start=() in contexts,
    )
    return build_policy(ROLE, tool, rules or [_rule()], flow, EmbedConfig(), 60, BASE_MS)


def _snapshot(*policies):
    repo = PolicyRepository()
    for p in policies:
        repo.put(p, write=False)
    return repo.snapshot()


def _ctx(**kw):
    values = dict(
        agent_role=ROLE,
        tool_name="read_file",
        tool_input="./AI/ai-intro.txt",
        input_tokens=500,
        output_tokens=100,
        timestamp=TEN_AM,
        idle_ms=2000,
        processing_ms=4000,
        prior_tools=("list_files",),
    )
    values.update(kw)
    return InvocationContext(**values)


def test_benign_invocation_allowed():
    verdict = check_invocation(_ctx(), _snapshot(_policy()))
    assert verdict == Verdict("allow", ())
    assert verdict.to_dict() == {"decision": "allow", "violations": []}


@pytest.mark.parametrize(
    "tokens, decision",
    [(1900, "allow"), (2000, "allow"), (2100, "alert"), (50, "allow"), (49, "alert")],
)
def test_twofold_tolerance_on_attributes(tokens, decision):
    verdict = check_invocation(_ctx(input_tokens=tokens), _snapshot(_policy()))
    assert verdict.decision == decision
    if decision != "allow":
        assert [v.kind for v in verdict.violations] == ["attribute"]
        assert "max_input_tokens" in verdict.violations[0].detail


@pytest.mark.parametrize(
    "timestamp, allowed",
    [
        (BASE_MS + 9 * 3_600_000, True),
        (BASE_MS + 8 * 3_600_000 + 59 * 60_000, False),
        (BASE_MS + 17 * 3_600_000 + 30 * 60_000 + 59_000, True),
        (BASE_MS + 17 * 3_600_000 + 31 * 60_000, False),
        (BASE_MS + 3 * 3_600_000, False),
    ],
)
def test_hour_window_has_no_slack(timestamp, allowed):
    verdict = check_invocation(_ctx(timestamp=timestamp), _snapshot(_policy()))
    assert verdict.allowed is allowed


def test_hour_window_slack_when_not_exempt():
    cfg = EnforceConfig(time_constraints_exempt_from_slack=False)
    verdict = check_invocation(_ctx(timestamp=BASE_MS + 20 * 3_600_000), _snapshot(_policy()), cfg)
    assert verdict.allowed


def test_input_pattern_violation_terminates():
    verdict = check_invocation(_ctx(tool_input="../../etc/passwd"), _snapshot(_policy()))
    assert verdict.decision == "terminate"
    assert [v.kind for v in verdict.violations] == ["input_pattern"]
    assert verdict.violations[0].rule_index == 0


def test_flow_violation_is_reported_with_rule_result():
    verdict = check_invocation(_ctx(prior_tools=("serper_search",), input_tokens=5000), _snapshot(_policy()))
    assert verdict.decision == "terminate"
    assert [v.kind for v in verdict.violations] == ["flow", "attribute"]
    assert "serper_search" in verdict.violations[0].detail


def test_some_single_rule_must_accept():
    narrow = _rule(0, patterns=(r"\./AI/.*",), max_input_tokens=Interval(100, 200))
    wide = _rule(1, patterns=(r"\./Cars/.*",))
    policy = _policy([narrow, wide])
    # input fits rule 0, tokens fit rule 1: neither rule accepts on its own
    verdict = check_policy(_ctx(tool_input="./AI/x.txt", input_tokens=900), policy, EnforceConfig())
    assert not verdict.allowed
    assert all(v.rule_index == 0 for v in verdict.violations)
    assert check_policy(_ctx(tool_input="./Cars/x.txt", input_tokens=900), policy, EnforceConfig()).allowed


def test_unknown_tool_and_missing_role_policy():
    snap = _snapshot(_policy())
    unknown = check_invocation(_ctx(tool_name="delete_file"), snap)
    assert unknown.decision == "terminate"
    assert unknown.violations[0].kind == "unknown_tool"

    other_role = check_invocation(_ctx(agent_role="Intern"), snap)
    assert other_role.violations[0].kind == "no_policy"

    lenient = EnforceConfig(unknown_tool="alert")
    assert check_invocation(_ctx(tool_name="delete_file"), snap, lenient).decision == "alert"


def test_advisory_severity_allows_with_violations():
    cfg = EnforceConfig(severity={"flow": "terminate", "input_pattern": "terminate", "attribute": "advisory"})
    verdict = check_invocation(_ctx(input_tokens=9000), _snapshot(_policy()), cfg)
    assert verdict.decision == "allow"
    assert verdict.violations


def test_edge_mode_only_checks_direct_predecessor():
    snap = _snapshot(_policy())
    ctx = _ctx(prior_tools=("serper_search", "list_files"))
    assert not check_invocation(ctx, snap).allowed
    assert check_invocation(ctx, snap, EnforceConfig(flow_mode="edge")).allowed
    assert not check_invocation(_ctx(prior_tools=()), snap, EnforceConfig(flow_mode="edge")).allowed


def test_enforce_config_validation():
    with pytest.raises(ConfigError):
        EnforceConfig(attribute_slack_factor=0.5)
    with pytest.raises(ConfigError):
        EnforceConfig(severity={"flow": "panic"})
    with pytest.raises(ConfigError):
        EnforceConfig(flow_mode="graph")
    cfg = EnforceConfig.from_settings({"enforce": {"severity": {"attribute": "terminate"}}})
    assert cfg.severity_of("attribute") == "terminate"
    assert cfg.severity_of("flow") == "terminate"


def test_decide_takes_most_severe():
    cfg = EnforceConfig()
    assert decide([], cfg).decision == "allow"
    assert decide([Violation("attribute", "x")], cfg).decision == "alert"
    assert decide([Violation("attribute", "x"), Violation("flow", "y")], cfg).decision == "terminate"


def test_replay_sequence_checks_each_step_against_its_prefix():
    seqs = [make_sequence("a", ["list_files", "read_file", "send_email"])]
    specs = flow_specs(seqs)
    policies = []
    for tool, spec in specs.items():
        rule = _rule(patterns=(r".*",), min_hour=Interval(0, 23), max_hour=Interval(0, 23.9),
                     max_idle_time=Interval(0, 5000), max_processing_time=Interval(0, 20000))
        policies.append(build_policy(ROLE, tool, [rule], spec, EmbedConfig(), 1, BASE_MS))
    snap = _snapshot(*policies)
    assert [v.decision for v in replay_sequence(seqs[0], snap)] == ["allow"] * 3
    swapped = make_sequence("b", ["list_files", "send_email", "read_file"])
    assert [v.decision for v in replay_sequence(swapped, snap)] == ["allow", "terminate", "terminate"]


def test_dispatcher_delivers_and_records_kills():
    seen = []
    dispatcher = ViolationDispatcher(seen.append)
    allow = Verdict("allow")
    term = Verdict("terminate", (Violation("flow", "x"),))
    assert not dispatcher.on_violation(allow, "t1").delivered
    ack = dispatcher.on_violation(term, "t1")
    assert ack.delivered and ack.kill
    assert seen == [term]
    assert dispatcher.is_killed("t1") and not dispatcher.is_killed("t2")


def test_dispatcher_sink_failure_keeps_decision():
    def broken(verdict):
        raise RuntimeError("sink offline")

    ack = ViolationDispatcher(broken).on_violation(Verdict("alert", (Violation("attribute", "x"),)), "t9")
    assert not ack.delivered
    assert ack.decision == "alert" and not ack.kill
    assert "offline" in ack.error


def _oracle_accepts(ctx, policy, factor=2.0):
    """Literal reading of a policy: flow context allowed and one rule fully satisfied."""
    collapsed = []
    for tool in ctx.prior_tools:
        if not collapsed or collapsed[-1] != tool:
            collapsed.append(tool)
    if tuple(collapsed) not in policy.flow.required_leading_contexts:
        return False
    hour = round(((ctx.timestamp // 60_000) % 1440) / 60, 6)
    observed = {
        "max_input_tokens": ctx.input_tokens,
        "max_output_tokens": ctx.output_tokens,
        "max_idle_time": ctx.idle_ms,
        "max_processing_time": ctx.processing_ms,
    }
    for rule in policy.rules:
        if not rule.textual.matches(ctx.tool_input):
            continue
        attr = rule.attribute
        if not (attr.min_hour.lo <= hour <= attr.max_hour.hi):
            continue
        if all(getattr(attr, k).lo / factor <= v <= getattr(attr, k).hi * factor for k, v in observed.items()):
            return True
    return False


def test_check_invocation_matches_literal_policy_oracle():
    rng = np.random.default_rng(99)
    inputs = ["./AI", "./Cars", "", "alice.chen@northwind.io", "df -h", "free -m", "x" * 30, "C:\\Program Files"]
    tools = ["list_files", "read_file", "serper_search", "file_writer", "send_email"]
    policies = [random_policy(rng) for _ in range(20)]
    snapshots = [_snapshot(p) for p in policies]
    cfg = EnforceConfig()
    for _ in range(10_000):
        k = int(rng.integers(len(policies)))
        policy = policies[k]
        ctx = InvocationContext(
            agent_role=ROLE,
            tool_name="read_file",
            tool_input=inputs[int(rng.integers(len(inputs)))],
            input_tokens=int(rng.integers(0, 12000)),
            output_tokens=int(rng.integers(0, 12000)),
            timestamp=BASE_MS + int(rng.integers(0, 86_400_000)),
            idle_ms=int(rng.integers(0, 12000)),
            processing_ms=int(rng.integers(0, 12000)),
            prior_tools=tuple(tools[j] for j in rng.integers(0, 5, size=rng.integers(0, 4))),
        )
        verdict = check_invocation(ctx, snapshots[k], cfg)
        assert verdict.allowed == _oracle_accepts(ctx, policy)


def test_learned_read_file_policy_hour_boundary():
    from conftest import ROOT
    from core.policy_store import deserialize

    policy = deserialize((ROOT / "docs" / "fixtures" / "read_file_policy.json").read_bytes())
    snap = _snapshot(policy)
    base = dict(tool_input="./Cars/specs.txt", input_tokens=800, processing_ms=5000)
    at = BASE_MS + 20 * 3_600_000 + 25 * 60_000
    assert check_invocation(_ctx(timestamp=at + 59_000, **base), snap).allowed
    late = check_invocation(_ctx(timestamp=at + 60_000, **base), snap)
    assert late.decision == "alert"
    assert [(v.kind, v.rule_index) for v in late.violations] == [("attribute", 0)]
    assert "max_hour" in late.violations[0].detail

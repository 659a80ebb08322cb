import json

import numpy as np
import pytest

from conftest import ROOT
from core.cfg_learn import ToolFlowSpec
from core.embed import NUMERIC_ATTRIBUTES, EmbedConfig
from core.errors import PolicySchemaError, RepositoryError
from core.policy_store import (
    PolicyRepository,
    build_policy,
    canonical_tool,
    deserialize,
    format_hour,
    make_rule_id,
    policy_path,
    render_policy,
    role_key,
    serialize,
)
from core.rule_induct import AttributePredicate, ClusterRule, Interval, TextualPredicate


FIXTURE = ROOT / "docs" / "fixtures" / "read_file_policy.json"
PATTERNS = [r"\./(?:AI|Cars)", "", r"[a-z]{2,5}\.[a-z]{3,6}@northwind\.io", r".{1,40}", r"(?:df|free) \-[hm]"]
TOOLS = ["list_files", "read_file", "serper_search", "file_writer", "send_email"]


def _attribute(rng):
    values = {}
    for name in NUMERIC_ATTRIBUTES:
        if name.endswith("_hour"):
            lo = round(float(rng.uniform(0, 12)), 6)
            hi = round(float(rng.uniform(lo, 23.983333)), 6)
        else:
            lo = float(rng.integers(0, 5000))
            hi = lo + float(rng.integers(0, 5000))
        values[name] = Interval(lo, hi)
    return AttributePredicate(**values)


def random_policy(rng, tool="read_file", role="Senior Data Researcher"):
    rules = [
        ClusterRule(
            rule_index=k,
            textual=TextualPredicate(tuple(rng.choice(PATTERNS, size=rng.integers(1, 3), replace=False).tolist())),
            attribute=_attribute(rng),
            support=int(rng.integers(1, 50)),
        )
        for k in range(int(rng.integers(1, 4)))
    ]
    contexts = {tuple(TOOLS[: int(n)]) for n in rng.integers(0, 4, size=rng.integers(1, 4))}
    flow = ToolFlowSpec(
        tool_name=tool,
        repeat=bool(rng.integers(0, 2)),
        required_leading_contexts=frozenset(contexts),
        allowed_predecessors=frozenset(p[-1] for p in contexts if p),
        may_start=() in contexts,
    )
    return build_policy(role, tool, rules, flow, EmbedConfig(), int(rng.integers(1, 100)), int(rng.integers(0, 2**41)))


def test_identifiers():
    assert canonical_tool("  Read_File ") == "read_file"
    assert role_key("Senior Data Researcher") == "senior_data_researcher"
    assert make_rule_id("Senior Data Researcher", "read_file") == "senior_data_researcher/a216654b81c80068"
    assert make_rule_id("IT Support Specialist", "READ_FILE") == "it_support_specialist/a216654b81c80068"


def test_fixture_policy_loads_and_round_trips_byte_for_byte():
    data = FIXTURE.read_bytes()
    policy = deserialize(data, source=str(FIXTURE))
    assert policy.tool_name == "read_file"
    assert len(policy.rules) == 2
    assert policy.envelope.min_hour.lo == pytest.approx(7.55)
    assert serialize(policy) == data


def test_render_policy_shows_hours_and_flow():
    text = render_policy(deserialize(FIXTURE.read_bytes()))
    assert "working_hours: 07:33-20:25" in text
    assert "      -- list_files" in text
    assert r"\./AI/ai-[a-z]{5,6}-(?:2024|2025)\.txt" in text


def test_format_hour():
    assert format_hour(7.55) == "07:33"
    assert format_hour(20.416667) == "20:25"
    assert format_hour(0) == "00:00"


def test_random_policies_round_trip():
    rng = np.random.default_rng(2024)
    for _ in range(100):
        policy = random_policy(rng)
        data = serialize(policy)
        again = deserialize(data)
        assert again == policy
        assert serialize(again) == data


def _doc(**changes):
    doc = json.loads(FIXTURE.read_text(encoding="utf-8"))
    for dotted, value in changes.items():
        target = doc
        *path, last = dotted.split("__")
        for part in path:
            target = target[int(part)] if part.isdigit() else target[part]
        key = int(last) if last.isdigit() else last
        if value is KeyError:
            del target[key]
        else:
            target[key] = value
    return json.dumps(doc)


@pytest.mark.parametrize(
    "changes, field",
    [
        ({"rule_id": "senior_data_researcher/0000000000000000"}, "rule_id"),
        ({"flow__required_leading_contexts": []}, "flow.required_leading_contexts"),
        ({"input_patterns__1__patterns__0": "(?=x)y"}, "input_patterns.1.patterns.0"),
        ({"attribute_constraints__0__min_hour__max": 3.0}, "attribute_constraints.0.min_hour"),
        ({"attribute_constraints__1__max_hour__max": 24.5}, "attribute_constraints.1.max_hour"),
        ({"attribute_constraints__1__rule_index": 5}, "attribute_constraints.1.rule_index"),
        ({"metadata__created_at": KeyError}, "metadata.created_at"),
        ({"embed_config__timezone_offset_minutes": 5000}, "embed_config.timezone_offset_minutes"),
        ({"embed_config__token_cap": 0}, "embed_config.token_cap"),
        ({"unexpected": 1}, "unexpected"),
    ],
)
def test_schema_errors_name_the_field(changes, field):
    with pytest.raises(PolicySchemaError) as info:
        deserialize(_doc(**changes), source="inline.json")
    assert info.value.field == field
    assert "inline.json" in str(info.value)


def test_build_policy_validation():
    rng = np.random.default_rng(0)
    policy = random_policy(rng)
    with pytest.raises(PolicySchemaError):
        build_policy("r", "read_file", [], policy.flow, EmbedConfig(), 1, 0)
    with pytest.raises(PolicySchemaError):
        build_policy("r", "send_email", policy.rules, policy.flow, EmbedConfig(), 1, 0)


def test_build_policy_requires_creation_time():
    rng = np.random.default_rng(1)
    policy = random_policy(rng)
    with pytest.raises(TypeError):
        build_policy("r", policy.tool_name, policy.rules, policy.flow, EmbedConfig(), 1)
    stamped = build_policy("r", policy.tool_name, policy.rules, policy.flow, EmbedConfig(), 1, 1741105800000)
    assert stamped.created_at == 1741105800000
    assert json.loads(serialize(stamped))["metadata"]["created_at"] == 1741105800000


def test_repository_put_writes_and_reload_reads(tmp_path):
    rng = np.random.default_rng(5)
    repo = PolicyRepository(tmp_path)
    policies = [random_policy(rng, tool=t) for t in ("read_file", "send_email")]
    for p in policies:
        repo.put(p)
    assert policy_path(tmp_path, policies[0]).exists()

    fresh = PolicyRepository(tmp_path)
    snap = fresh.reload()
    assert len(snap) == 2
    assert snap.lookup("Senior Data Researcher", "SEND_EMAIL") == policies[1]
    assert snap.lookup("Other Role", "send_email") is None
    assert snap.known_tools == {"read_file", "send_email"}
    assert {p.tool_name for p in fresh.list()} == {"read_file", "send_email"}


def test_reload_failure_keeps_previous_snapshot(tmp_path):
    rng = np.random.default_rng(6)
    repo = PolicyRepository(tmp_path)
    repo.put(random_policy(rng))
    repo.reload()
    (tmp_path / "broken.json").write_text("{not json", encoding="utf-8")
    with pytest.raises(RepositoryError):
        repo.reload()
    assert len(repo.snapshot()) == 1


def test_reload_missing_directory(tmp_path):
    with pytest.raises(RepositoryError):
        PolicyRepository(tmp_path / "absent").reload()


def test_duplicate_policy_files_rejected(tmp_path):
    rng = np.random.default_rng(8)
    policy = random_policy(rng)
    (tmp_path / "a.json").write_bytes(serialize(policy))
    (tmp_path / "b.json").write_bytes(serialize(policy))
    with pytest.raises(RepositoryError):
        PolicyRepository(tmp_path).reload()

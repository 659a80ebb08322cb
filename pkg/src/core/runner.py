"""
Learning pipeline orchestrator: load settings, read trace logs, discover the
aggregator plugins, learn one policy per (agent role, tool) and write them to
the policy directory.
"""
import logging
import pathlib
from collections import defaultdict
from dataclasses import dataclass, field
from importlib import import_module
from typing import Any, Dict, List, Mapping, Optional, Sequence

from core import config
from core.aggregator_base import Aggregator
from core.cfg_learn import flow_specs
from core.cluster import ClusterParams, cluster_embeddings, merge_semantic
from core.embed import EmbedConfig, embed_events
from core.errors import ConfigError, LearnError
from core.policy_store import AccessControlPolicy, PolicyRepository, build_policy
from core.rule_induct import InductionParams, induce_rule
from core.trace_model import (
    ExecutionSequence,
    ToolCatalog,
    TraceEvent,
    assemble_sequences,
    filter_rare,
    parse_trace_log,
)


logger = logging.getLogger(__name__)


@dataclass
class ToolSummary:
    agent_role: str
    tool_name: str
    invocations: int
    clusters: int
    flagged_clusters: int
    patterns: int


@dataclass
class LearnResult:
    policies: List[AccessControlPolicy]
    summary: List[ToolSummary]
    flagged_sequences: List[ExecutionSequence] = field(default_factory=list)
    warnings: List[str] = field(default_factory=list)


def main() -> None:
    settings = config.load_settings()
    sequences = assemble_sequences(load_traces(settings["paths"]["traces"]))
    result = learn_policies(sequences, settings, select_aggregator(settings))
    write_policies(result.policies, settings["paths"]["policy_dir"])


def load_traces(path: str | pathlib.Path) -> List[TraceEvent]:
    path = pathlib.Path(path)
    files = sorted(path.glob("*.jsonl")) if path.is_dir() else [path]
    if not files:
        raise LearnError(f"No trace logs (*.jsonl) under {path}")
    events: List[TraceEvent] = []
    for file in files:
        with file.open("rb") as fh:
            events.extend(parse_trace_log(fh))
        logger.info("Read %s", file)
    return events


def learn_policies(
    sequences: Sequence[ExecutionSequence],
    settings: Optional[Mapping[str, Any]] = None,
    aggregator: Optional[Aggregator] = None,
) -> LearnResult:
    settings = settings or config.DEFAULTS
    kept, flagged = filter_rare(sequences, int(settings["learn"]["min_freq"]))
    if not kept:
        raise LearnError("Every sequence was flagged as rare; nothing left to learn from.")
    catalog = ToolCatalog.from_sequences(kept)

    embed_cfg = EmbedConfig.from_settings(settings)
    cluster_params = ClusterParams.from_settings(settings)
    induction = InductionParams.from_settings(settings)
    created_at = max(e.timestamp for seq in kept for e in seq.events)

    by_role: Dict[str, List[ExecutionSequence]] = defaultdict(list)
    for seq in kept:
        by_role[seq.agent_role].append(seq)

    result = LearnResult(policies=[], summary=[], flagged_sequences=list(flagged))
    for role in sorted(by_role):
        role_seqs = by_role[role]
        specs = flow_specs(role_seqs)
        events_by_tool: Dict[str, List[TraceEvent]] = defaultdict(list)
        for seq in role_seqs:
            for e in seq.events:
                events_by_tool[e.tool_name].append(e)

        for tool in sorted(events_by_tool):
            events = events_by_tool[tool]
            clusters = cluster_embeddings(embed_events(events, embed_cfg), cluster_params, tool)
            if aggregator is not None:
                clusters = merge_semantic(clusters, [e.tool_input for e in events], aggregator)
                result.warnings.extend(clusters.warnings)
            rules = [
                induce_rule(k, [events[i] for i in members], aggregator, induction)
                for k, members in enumerate(clusters.clusters)
            ]
            policy = build_policy(role, tool, rules, specs[tool], embed_cfg, len(role_seqs), created_at)
            result.policies.append(policy)
            result.summary.append(
                ToolSummary(
                    agent_role=role,
                    tool_name=tool,
                    invocations=len(events),
                    clusters=len(clusters),
                    flagged_clusters=len(clusters.flagged),
                    patterns=sum(len(r.textual.patterns) for r in rules),
                )
            )
    logger.info(
        "Learned %d policies over %d tools from %d sequences (%d flagged as rare)",
        len(result.policies),
        len(catalog),
        len(kept),
        len(flagged),
    )
    return result


def write_policies(policies: Sequence[AccessControlPolicy], out_dir: str | pathlib.Path) -> PolicyRepository:
    out = pathlib.Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    repo = PolicyRepository(out)
    for policy in policies:
        repo.put(policy)
    logger.info("Wrote %d policy files under %s", len(policies), out)
    return repo


def select_aggregator(settings: Mapping[str, Any], name: Optional[str] = None) -> Aggregator:
    wanted = name or settings.get("aggregator", {}).get("name", "none")
    discovered = _load_aggregators(settings)
    if wanted not in discovered:
        raise ConfigError("aggregator.name", f"unknown aggregator {wanted!r}; have {sorted(discovered)}")
    return discovered[wanted]


def _load_aggregators(settings: Mapping[str, Any]) -> Dict[str, Aggregator]:
    discovered: Dict[str, Aggregator] = {}
    aggregators_dir = pathlib.Path(__file__).resolve().parent.parent / "aggregators"
    for path in sorted(aggregators_dir.glob("*.py")):
        if path.name.startswith("__"):
            continue
        module = import_module(f"aggregators.{path.stem}")
        agg = getattr(module, "aggregator", None)
        if agg:
            agg.configure(settings)
            discovered[agg.name] = agg
    return discovered


if __name__ == "__main__":
    main()

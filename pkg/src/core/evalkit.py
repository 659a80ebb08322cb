"""
Evaluation kit: generate seeded benign / violation trace corpora from scenario
scripts (configs/scenarios/<app>.yaml), run learn-then-enforce experiments and
compute FAR, FRR and BEFR.
"""
import logging
import pathlib
import re
from dataclasses import dataclass, field
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import yaml

from core import config, runner
from core.aggregator_base import Aggregator
from core.enforcer import EnforceConfig, Verdict, replay_sequence
from core.errors import ConfigError
from core.policy_store import AccessControlPolicy, PolicyRepository
from core.rule_induct import TextualPredicate, aggregate, draft_regexes, full_match
from core.trace_model import ExecutionSequence, TraceEvent, assemble_sequences, parse_trace_log, serialize_trace_log


logger = logging.getLogger(__name__)

APPS = ("knowledge_assistant", "it_support")
LABELS = ("benign", "violation")
COUNT_KEYS = ("benign_total", "violation_total", "false_accepts", "false_rejects", "benign_failures")
SCENARIOS_DIR = pathlib.Path(__file__).resolve().parents[2] / "configs" / "scenarios"

BASE_TIMESTAMP_MS = 1740960000000  # 2025-03-03 00:00 UTC
HOUR_MS = 3_600_000
DAY_MS = 24 * HOUR_MS

_FIELD = re.compile(r"\{(\w+)\}")


@dataclass(frozen=True)
class LabeledSample:
    trace: ExecutionSequence
    label: str
    failure_note: Optional[str] = None
    mutation: Optional[str] = None
    stress: bool = False

    def __post_init__(self) -> None:
        if self.label not in LABELS:
            raise ValueError(f"label must be one of {LABELS}, got {self.label!r}")
        if self.failure_note is not None and self.label != "benign":
            raise ValueError("failure_note is only meaningful on benign samples")


VerdictsLike = Union[Verdict, Sequence[Verdict]]


@dataclass
class EvalReport:
    agent: str
    counts: Dict[str, int]
    far: Optional[float]
    frr: Optional[float]
    befr: Optional[float]
    ledger: List[Tuple[LabeledSample, List[Verdict]]] = field(default_factory=list)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "agent": self.agent,
            "counts": dict(self.counts),
            "far": self.far,
            "frr": self.frr,
            "befr": self.befr,
            "samples": [
                {
                    "trace_id": sample.trace.trace_id,
                    "label": sample.label,
                    "failure_note": sample.failure_note,
                    "mutation": sample.mutation,
                    "stress": sample.stress,
                    "accepted": _accepted(verdicts),
                    "decisions": [v.decision for v in verdicts],
                }
                for sample, verdicts in self.ledger
            ],
        }

    def to_row(self) -> Dict[str, Any]:
        return {
            "Agent": self.agent,
            "FAR": self.far,
            "FRR": self.frr,
            "BEFR": self.befr,
            "#Hallucinations": self.counts.get("benign_failures", 0),
        }

    def to_table(self) -> str:
        return render_table([self])


@dataclass
class ExperimentResult:
    report: EvalReport
    policies: List[AccessControlPolicy]
    learned: runner.LearnResult


def _accepted(verdicts: Sequence[Verdict]) -> bool:
    return all(v.allowed for v in verdicts)


def _rate(num: int, den: int) -> Optional[float]:
    return num / den if den else None


def _as_list(verdicts: VerdictsLike) -> List[Verdict]:
    return [verdicts] if isinstance(verdicts, Verdict) else list(verdicts)


def compute_metrics(ledger: Sequence[Tuple[LabeledSample, VerdictsLike]], agent: str = "") -> EvalReport:
    """A violation is a false accept when every step was allowed; a benign sample is
    a false reject when any step was not, unless it is marked as a hallucination."""
    entries = [(sample, _as_list(verdicts)) for sample, verdicts in ledger]
    counts = dict.fromkeys(COUNT_KEYS, 0)
    for sample, verdicts in entries:
        if sample.label == "violation":
            counts["violation_total"] += 1
            counts["false_accepts"] += int(_accepted(verdicts))
            continue
        counts["benign_total"] += 1
        if sample.failure_note == "hallucination":
            counts["benign_failures"] += 1
        elif not _accepted(verdicts):
            counts["false_rejects"] += 1
    return _report(agent, counts, entries)


def _report(agent: str, counts: Dict[str, int], ledger: List[Tuple[LabeledSample, List[Verdict]]]) -> EvalReport:
    return EvalReport(
        agent=agent,
        counts=counts,
        far=_rate(counts["false_accepts"], counts["violation_total"]),
        frr=_rate(counts["false_rejects"], counts["benign_total"]),
        befr=_rate(counts["benign_failures"], counts["benign_total"]),
        ledger=ledger,
    )


def pool_reports(reports: Sequence[EvalReport], agent: str = "Total") -> EvalReport:
    counts = {k: sum(r.counts.get(k, 0) for r in reports) for k in COUNT_KEYS}
    ledger = [entry for r in reports for entry in r.ledger]
    return _report(agent, counts, ledger)


def render_table(reports: Sequence[EvalReport]) -> str:
    frame = pd.DataFrame([r.to_row() for r in reports], columns=["Agent", "FAR", "FRR", "BEFR", "#Hallucinations"])
    rates = ["FAR", "FRR", "BEFR"]
    # undefined rates arrive as None; NaN lets na_rep render them
    frame[rates] = frame[rates].astype(float)
    fmt = lambda v: "n/a" if pd.isna(v) else f"{v:.3f}"  # noqa: E731
    return frame.to_string(index=False, na_rep="n/a", formatters=dict.fromkeys(rates, fmt))


# --- scenario scripts -----------------------------------------------------------


def load_scenario(app: str, scenarios_dir: Optional[str | pathlib.Path] = None) -> Dict[str, Any]:
    directory = pathlib.Path(scenarios_dir) if scenarios_dir else SCENARIOS_DIR
    if not directory.is_absolute() and not directory.is_dir():
        directory = SCENARIOS_DIR.parents[1] / directory
    path = directory / f"{app}.yaml"
    if not path.exists():
        raise ConfigError("eval.app", f"no scenario script {path}")
    with path.open("r", encoding="utf-8") as fh:
        script = yaml.safe_load(fh) or {}
    for key in ("agent_role", "trace_prefix", "steps", "violations"):
        if key not in script:
            raise ConfigError(f"scenario.{app}.{key}", "missing")
    return script


def _render(template: str, values: Mapping[str, str]) -> str:
    # literal braces never appear in scenario inputs; unknown names are left alone
    return _FIELD.sub(lambda m: str(values.get(m.group(1), m.group(0))), template)


def _draw(spec: Mapping[str, Any], pools: Mapping[str, Any], values: Mapping[str, str], rng: np.random.Generator) -> str:
    if "pool" in spec:
        pool = pools[spec["pool"]]
        if "by" in spec:
            pool = pool[values[spec["by"]]]
        return str(pool[int(rng.integers(len(pool)))])
    if "copy" in spec:
        blank = rng.random() < float(spec.get("blank_rate", 0.0))
        return "" if blank else values[spec["copy"]]
    if "template" in spec:
        templates = pools[spec["template"]]
        return _render(templates[int(rng.integers(len(templates)))], values)
    if "int" in spec:
        lo, hi = spec["int"]
        return str(int(rng.integers(lo, hi + 1)))
    raise ConfigError("scenario.vars", f"unknown variable kind {sorted(spec)}")


def _draw_vars(specs: Optional[Mapping[str, Any]], pools, values: Dict[str, str], rng) -> Dict[str, str]:
    local = dict(values)
    for name, spec in (specs or {}).items():
        local[name] = _draw(spec, pools, local, rng)
    return local


@dataclass
class _Call:
    tool_name: str
    tool_input: str
    thoughts: str
    task_result: str
    input_tokens: int
    output_tokens: int


def _plan_benign(script: Mapping[str, Any], rng: np.random.Generator) -> Tuple[Dict[str, str], List[_Call]]:
    pools = script.get("pools", {})
    values = _draw_vars(script.get("trace_vars"), pools, {}, rng)
    calls: List[_Call] = []
    for step in script["steps"]:
        lo, hi = step.get("repeat", [1, 1])
        for _ in range(int(rng.integers(lo, hi + 1))):
            local = _draw_vars(step.get("vars"), pools, values, rng)
            calls.append(
                _Call(
                    tool_name=step["tool"],
                    tool_input=_render(step["input"], local),
                    thoughts=step.get("thoughts", ""),
                    task_result=step.get("result", ""),
                    input_tokens=int(rng.integers(step["input_tokens"][0], step["input_tokens"][1] + 1)),
                    output_tokens=int(rng.integers(step["output_tokens"][0], step["output_tokens"][1] + 1)),
                )
            )
    return values, calls


def _positions(calls: Sequence[_Call], tool: str) -> List[int]:
    found = [i for i, c in enumerate(calls) if c.tool_name == tool]
    if not found:
        raise ConfigError("scenario.violations", f"mutation targets {tool!r}, which the benign flow never calls")
    return found


def _mutate(
    calls: List[_Call], mutation: Mapping[str, Any], script: Mapping[str, Any], values: Dict[str, str], rng: np.random.Generator
) -> List[_Call]:
    kind = mutation["kind"]
    tool = mutation["tool"]
    pools = script.get("pools", {})
    calls = [_Call(**vars(c)) for c in calls]

    if kind == "input":
        at = _positions(calls, tool)
        idx = at[int(rng.integers(len(at)))]
        local = _draw_vars(mutation.get("vars"), pools, values, rng)
        if "inputs" in mutation:
            options = mutation["inputs"]
            text = _render(options[int(rng.integers(len(options)))], local)
        else:
            text = _render(mutation["template"], local)
        calls[idx].tool_input = text
    elif kind == "move_before":
        idx = _positions(calls, tool)[0]
        moved = calls.pop(idx)
        calls.insert(_positions(calls, mutation["before"])[0], moved)
    elif kind == "inject":
        anchor = _positions(calls, mutation["after"])[0]
        local = _draw_vars(mutation.get("vars"), pools, values, rng)
        template = calls[anchor]
        calls.insert(
            anchor + 1,
            _Call(
                tool_name=tool,
                tool_input=_render(mutation.get("input", ""), local),
                thoughts=mutation.get("thoughts", f"Calling {tool}."),
                task_result=mutation.get("result", "Done."),
                input_tokens=template.input_tokens,
                output_tokens=template.output_tokens,
            ),
        )
    elif kind == "repeat":
        idx = _positions(calls, tool)[-1]
        calls.insert(idx + 1, _Call(**vars(calls[idx])))
    else:
        raise ConfigError("scenario.violations", f"unknown mutation kind {kind!r}")
    return calls


def _to_events(
    trace_id: str, role: str, calls: Sequence[_Call], start_ms: int, idle_range: Sequence[int], rng: np.random.Generator
) -> List[TraceEvent]:
    events = []
    ts = start_ms
    for i, call in enumerate(calls):
        if i:
            ts += int(rng.integers(idle_range[0], idle_range[1] + 1))
        events.append(
            TraceEvent(
                trace_id=trace_id,
                seq_index=i,
                timestamp=ts,
                agent_role=role,
                thoughts=call.thoughts,
                tool_name=call.tool_name,
                tool_input=call.tool_input,
                task_result=call.task_result,
                input_tokens=call.input_tokens,
                output_tokens=call.output_tokens,
            )
        )
    return events


def generate_scenarios(
    app: str,
    n_benign: int,
    n_violation: int,
    seed: int,
    hallucination_rate: float = 0.0,
    scenarios_dir: Optional[str | pathlib.Path] = None,
) -> List[LabeledSample]:
    """Benign traces first, then violations (mutation kinds applied round-robin)."""
    if n_benign < 0 or n_violation < 0:
        raise ValueError("sample counts must be >= 0")
    if not 0.0 <= hallucination_rate <= 1.0:
        raise ValueError("hallucination_rate must be within [0, 1]")
    script = load_scenario(app, scenarios_dir)
    rng = np.random.default_rng(seed)
    prefix = script["trace_prefix"]
    role = script["agent_role"]
    start_lo, start_hi = script.get("start_hours", [9, 17])
    idle_range = script.get("idle_ms", [1000, 5000])
    hallucinations = script.get("hallucinations") or []

    n_halluc = int(round(hallucination_rate * n_benign)) if hallucinations else 0
    halluc_at = set(rng.choice(n_benign, size=n_halluc, replace=False).tolist()) if n_halluc else set()

    planned: List[Tuple[str, List[_Call], Dict[str, Any]]] = []
    for k in range(n_benign):
        values, calls = _plan_benign(script, rng)
        meta: Dict[str, Any] = {"label": "benign"}
        if k in halluc_at:
            mutation = hallucinations[k % len(hallucinations)]
            calls = _mutate(calls, mutation, script, values, rng)
            meta.update(failure_note="hallucination", mutation=mutation["name"])
        planned.append((f"{prefix}-{seed}-{k + 1:04d}", calls, meta))
    for j in range(n_violation):
        values, calls = _plan_benign(script, rng)
        mutation = script["violations"][j % len(script["violations"])]
        calls = _mutate(calls, mutation, script, values, rng)
        meta = {"label": "violation", "mutation": mutation["name"], "stress": bool(mutation.get("stress", False))}
        planned.append((f"{prefix}-{seed}-v{j + 1:03d}", calls, meta))

    events: List[TraceEvent] = []
    for k, (trace_id, calls, _) in enumerate(planned):
        hour = int(rng.integers(start_lo, start_hi + 1))
        start_ms = BASE_TIMESTAMP_MS + k * DAY_MS + hour * HOUR_MS
        events.extend(_to_events(trace_id, role, calls, start_ms, idle_range, rng))

    # round-trip through the trace-log format so samples look exactly like parsed logs
    parsed = parse_trace_log(serialize_trace_log(events).splitlines())
    by_id = {seq.trace_id: seq for seq in assemble_sequences(parsed)}
    samples = [LabeledSample(trace=by_id[trace_id], **meta) for trace_id, _, meta in planned]
    logger.info(
        "Generated %s corpus (seed %d): %d benign (%d hallucinated), %d violations",
        app,
        seed,
        n_benign,
        n_halluc,
        n_violation,
    )
    return samples


def split_benign(n_benign: int, staging_fraction: float = 0.6) -> Tuple[int, int]:
    if not 0.0 < staging_fraction <= 1.0:
        raise ValueError("staging_fraction must be within (0, 1]")
    n_staging = int(round(n_benign * staging_fraction))
    return n_staging, n_benign - n_staging


def experiment_corpora(
    app: str,
    n_benign: int,
    n_violation: int,
    seed: int,
    staging_fraction: float = 0.6,
    hallucination_rate: float = 0.0,
    scenarios_dir: Optional[str | pathlib.Path] = None,
) -> Tuple[List[LabeledSample], List[LabeledSample]]:
    """Staging (clean benign) and test (held-out benign plus violations) corpora."""
    n_staging, n_test = split_benign(n_benign, staging_fraction)
    staging = generate_scenarios(app, n_staging, 0, seed, 0.0, scenarios_dir)
    test = generate_scenarios(app, n_test, n_violation, seed + 1, hallucination_rate, scenarios_dir)
    return staging, test


def run_experiment(
    staging: Sequence[LabeledSample],
    test: Sequence[LabeledSample],
    settings: Optional[Mapping[str, Any]] = None,
    aggregator: Optional[Aggregator] = None,
    agent: str = "",
) -> ExperimentResult:
    if any(s.label != "benign" or s.failure_note for s in staging):
        raise ValueError("staging samples must all be clean benign traces")
    settings = settings or config.DEFAULTS
    aggregator = aggregator or runner.select_aggregator(settings)
    learned = runner.learn_policies([s.trace for s in staging], settings, aggregator)

    repo = PolicyRepository()
    for policy in learned.policies:
        repo.put(policy, write=False)
    snapshot = repo.snapshot()
    cfg = EnforceConfig.from_settings(settings)

    ledger = [(sample, replay_sequence(sample.trace, snapshot, cfg)) for sample in test]
    report = compute_metrics(ledger, agent)
    logger.info("%s: FAR %s FRR %s BEFR %s", agent or "experiment", report.far, report.frr, report.befr)
    return ExperimentResult(report=report, policies=list(learned.policies), learned=learned)


# --- sample-size study ------------------------------------------------------------


def random_probes(n: int, length: int = 20, seed: int = 0) -> List[str]:
    rng = np.random.default_rng(seed)
    codes = rng.integers(32, 127, size=(n, length))
    return ["".join(map(chr, row)) for row in codes]


def acceptance_rate(predicate: TextualPredicate | Sequence[str], probes: Sequence[str]) -> float:
    patterns = predicate.patterns if isinstance(predicate, TextualPredicate) else tuple(predicate)
    if not probes:
        return 0.0
    hits = sum(1 for p in probes if any(full_match(pat, p) for pat in patterns))
    return hits / len(probes)


def tool_inputs(samples: Sequence[LabeledSample], tool: str) -> List[str]:
    return [e.tool_input for s in samples for e in s.trace.events if e.tool_name == tool]


def induce_textual(samples: Sequence[str], aggregator: Optional[Aggregator] = None, draft_threshold: float = 0.4) -> TextualPredicate:
    return aggregate(draft_regexes(samples, draft_threshold), samples, aggregator)


def acceptance_by_sample_size(
    samples: Sequence[str],
    sizes: Sequence[int],
    probes: Sequence[str],
    aggregator: Optional[Aggregator] = None,
) -> Dict[int, float]:
    """Acceptance rate of the predicate learned from the first n samples, per n."""
    rates = {}
    for n in sizes:
        rates[n] = acceptance_rate(induce_textual(samples[:n], aggregator), probes)
        logger.info("%d samples: acceptance %.4f", n, rates[n])
    return rates

"""
Cluster-to-rule induction. A rule pairs a textual predicate (a small set of
full-match regular expressions generalized from the cluster's tool inputs) with
an attribute predicate (closed intervals over six numeric attributes).

Drafting groups inputs by normalized edit distance and abstracts each group as
common prefix + character-class middle + common suffix. An aggregator may then
compact the drafts; its output is only accepted when it covers every sample.
"""
import concurrent.futures
import functools
import logging
import os
import re
from dataclasses import dataclass
from typing import Any, Dict, FrozenSet, Iterable, List, Mapping, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from core.aggregator_base import Aggregator
from core.cluster import agglomerate
from core.embed import NUMERIC_ATTRIBUTES, minute_hour
from core.errors import AggregatorError, ConfigError, LearnError
from core.trace_model import TraceEvent


logger = logging.getLogger(__name__)

REGEX_SPECIALS = set(".^$*+?{}[]\\|()")
MAX_PROBES = 2000
PROBE_EXTRA_CHARS = "aZ0 ._-/@:"

_UNPORTABLE = (
    (re.compile(r"\(\?<?[=!]"), "lookaround"),
    (re.compile(r"\(\?P"), "named group"),
    (re.compile(r"\(\?<[A-Za-z_]"), "named group"),
    (re.compile(r"(?<!\\)\\[1-9]"), "backreference"),
    (re.compile(r"\(\?[aiLmsux-]+[:)]"), "inline flag"),
)


class Interval(NamedTuple):
    lo: float
    hi: float

    def contains(self, value: float) -> bool:
        return self.lo <= value <= self.hi

    def union(self, other: "Interval") -> "Interval":
        return Interval(min(self.lo, other.lo), max(self.hi, other.hi))


@dataclass(frozen=True)
class TextualPredicate:
    patterns: Tuple[str, ...]

    def __post_init__(self) -> None:
        if not self.patterns:
            raise LearnError("Textual predicate needs at least one pattern.")

    def matches(self, text: str) -> bool:
        return any(full_match(p, text) for p in self.patterns)


@dataclass(frozen=True)
class AttributePredicate:
    max_input_tokens: Interval
    max_output_tokens: Interval
    min_hour: Interval
    max_hour: Interval
    max_idle_time: Interval
    max_processing_time: Interval

    def __post_init__(self) -> None:
        for name, iv in self.items():
            if iv.lo > iv.hi:
                raise LearnError(f"Attribute {name}: lower bound {iv.lo} exceeds upper bound {iv.hi}.")
            if name.endswith("_hour") and not (0 <= iv.lo and iv.hi < 24):
                raise LearnError(f"Attribute {name}: hour bounds must lie in [0, 24).")

    def items(self) -> List[Tuple[str, Interval]]:
        return [(name, getattr(self, name)) for name in NUMERIC_ATTRIBUTES]

    def union(self, other: "AttributePredicate") -> "AttributePredicate":
        return AttributePredicate(**{name: iv.union(getattr(other, name)) for name, iv in self.items()})


@dataclass(frozen=True)
class ClusterRule:
    rule_index: int
    textual: TextualPredicate
    attribute: AttributePredicate
    support: int

    def __post_init__(self) -> None:
        if self.support < 1:
            raise LearnError("Cluster rule support must be >= 1.")


@dataclass(frozen=True)
class InductionParams:
    draft_threshold: float = 0.4
    aggregator_timeout_s: float = 30.0
    timezone_offset_minutes: int = 0

    @classmethod
    def from_settings(cls, settings: Mapping[str, Any]) -> "InductionParams":
        threshold = float(settings.get("rules", {}).get("draft_threshold", 0.4))
        if not 0 <= threshold <= 1:
            raise ConfigError("rules.draft_threshold", "must be within [0, 1]")
        return cls(
            draft_threshold=threshold,
            aggregator_timeout_s=int(settings.get("aggregator", {}).get("timeout_ms", 30000)) / 1000,
            timezone_offset_minutes=int(settings.get("embed", {}).get("timezone_offset_minutes", 0)),
        )


# --- regex helpers -----------------------------------------------------------


@functools.lru_cache(maxsize=4096)
def compile_pattern(pattern: str) -> re.Pattern:
    return re.compile(pattern, re.DOTALL)


def full_match(pattern: str, text: str) -> bool:
    return compile_pattern(pattern).fullmatch(text) is not None


def check_portable(pattern: str) -> None:
    """Raise ValueError unless the pattern stays inside the portable dialect and compiles."""
    for rx, what in _UNPORTABLE:
        if rx.search(pattern):
            raise ValueError(f"{what} not allowed in pattern {pattern!r}")
    try:
        compile_pattern(pattern)
    except re.error as exc:
        raise ValueError(f"pattern {pattern!r} does not compile: {exc}") from exc


def escape_literal(text: str) -> str:
    return "".join("\\" + c if c in REGEX_SPECIALS else c for c in text)


def char_class(chars: Iterable[str]) -> str:
    """Bracket expression over observed characters, widened to whole A-Z / a-z / 0-9 ranges."""
    chars = set(chars)
    parts = []
    for lo, hi in (("A", "Z"), ("a", "z"), ("0", "9")):
        if any(lo <= c <= hi for c in chars):
            parts.append(f"{lo}-{hi}")
            chars = {c for c in chars if not lo <= c <= hi}
    others = "".join("\\" + c if c in "]\\-^[" else c for c in sorted(chars))
    return "[" + "".join(parts) + others + "]"


def repeat(atom: str, lo: int, hi: int) -> str:
    return f"{atom}{{{lo},{hi}}}"


# --- drafting ----------------------------------------------------------------


def edit_distance(a: str, b: str) -> int:
    if a == b:
        return 0
    if not a or not b:
        return max(len(a), len(b))
    codes = np.fromiter((ord(c) for c in b), dtype=np.int64, count=len(b))
    offsets = np.arange(len(b) + 1)
    prev = offsets.copy()
    for i, ch in enumerate(a, start=1):
        cur = np.empty_like(prev)
        cur[0] = i
        cur[1:] = np.minimum(prev[:-1] + (codes != ord(ch)), prev[1:] + 1)
        # insertions: cur[j] = min_k<=j cur[k] + (j - k)
        prev = np.minimum.accumulate(cur - offsets) + offsets
    return int(prev[-1])


def normalized_edit_distance(a: str, b: str) -> float:
    longest = max(len(a), len(b))
    return edit_distance(a, b) / longest if longest else 0.0


def draft_regexes(strings: Sequence[str], threshold: float = 0.4) -> List[str]:
    if not strings:
        raise LearnError("Cannot draft patterns from an empty input set.")
    unique = sorted(set(strings))
    n = len(unique)
    dist = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            dist[i, j] = dist[j, i] = normalized_edit_distance(unique[i], unique[j])

    drafts = {_draft_for_group([unique[k] for k in group]) for group in agglomerate(dist, threshold)}
    return sorted(drafts)


def _draft_for_group(group: Sequence[str]) -> str:
    if len(group) == 1:
        return escape_literal(group[0])
    prefix = os.path.commonprefix(list(group))
    room = min(len(s) for s in group) - len(prefix)
    suffix = os.path.commonprefix([s[::-1] for s in group])[::-1] if room > 0 else ""
    suffix = suffix[len(suffix) - room :] if len(suffix) > room else suffix
    middles = [s[len(prefix) : len(s) - len(suffix)] for s in group]
    body = "".join(middles)
    if body and body.isascii() and body.isdigit():
        atom = r"\d"
    elif body and all(c.isascii() and c.isalpha() for c in body):
        atom = "[A-Za-z]"
    else:
        atom = "."
    lengths = [len(m) for m in middles]
    return escape_literal(prefix) + repeat(atom, min(lengths), max(lengths)) + escape_literal(suffix)


# --- aggregation and minimization ---------------------------------------------


def probe_strings(samples: Sequence[str], patterns: Sequence[str] = (), seed: int = 0) -> List[str]:
    """Samples plus seeded single-character substitutions over the draft alphabet."""
    alphabet = sorted(set("".join(samples)) | set(PROBE_EXTRA_CHARS) | {c for p in patterns for c in p if c.isalnum()})
    rng = np.random.default_rng(seed)
    probes = list(dict.fromkeys(samples))
    per_sample = max(1, (MAX_PROBES - len(probes)) // max(1, len(probes)))
    for s in sorted(set(samples)):
        if not s:
            continue
        for _ in range(per_sample):
            if len(probes) >= MAX_PROBES:
                return probes
            pos = int(rng.integers(len(s)))
            ch = alphabet[int(rng.integers(len(alphabet)))]
            probes.append(s[:pos] + ch + s[pos + 1 :])
    return probes


def acceptance_sets(patterns: Iterable[str], probes: Sequence[str]) -> Dict[str, FrozenSet[int]]:
    return {p: frozenset(i for i, s in enumerate(probes) if full_match(p, s)) for p in set(patterns)}


def subsumes(outer: str, inner: str, probes: Sequence[str]) -> bool:
    """True if every probe accepted by `inner` is also accepted by `outer`."""
    accepted = acceptance_sets((outer, inner), probes)
    return accepted[inner] <= accepted[outer]


def minimize(patterns: Sequence[str], samples: Sequence[str]) -> List[str]:
    accepted = acceptance_sets(patterns, probe_strings(samples, patterns))
    kept = sorted(accepted)
    for p in sorted(accepted, key=lambda x: (len(x), x)):
        if any(accepted[p] <= accepted[q] for q in kept if q != p):
            kept.remove(p)
    return kept


def covers(patterns: Sequence[str], samples: Sequence[str]) -> bool:
    return all(any(full_match(p, s) for p in patterns) for s in samples)


def aggregate(
    drafts: Sequence[str],
    samples: Sequence[str],
    agg: Optional[Aggregator] = None,
    timeout_s: float = 30.0,
) -> TextualPredicate:
    if not covers(drafts, samples):
        raise LearnError("Draft patterns do not cover their samples.")
    chosen = list(drafts)
    if agg is not None:
        try:
            proposal = _call_with_timeout(agg, drafts, samples, timeout_s)
            _check_proposal(proposal, samples)
            chosen = proposal
        except AggregatorError as exc:
            logger.warning("Aggregator %s failed, keeping drafts: %s", getattr(agg, "name", "?"), exc)
        except ValueError as exc:
            logger.warning("Aggregator %s proposal rejected, keeping drafts: %s", getattr(agg, "name", "?"), exc)
    return TextualPredicate(patterns=tuple(minimize(chosen, samples)))


def _call_with_timeout(agg: Aggregator, drafts: Sequence[str], samples: Sequence[str], timeout_s: float) -> List[str]:
    pool = concurrent.futures.ThreadPoolExecutor(max_workers=1)
    try:
        future = pool.submit(agg.aggregate, list(drafts), list(samples))
        return future.result(timeout=timeout_s)
    except concurrent.futures.TimeoutError as exc:
        raise AggregatorError(f"no answer within {timeout_s:g}s") from exc
    except AggregatorError:
        raise
    except Exception as exc:
        raise AggregatorError(str(exc)) from exc
    finally:
        pool.shutdown(wait=False)


def _check_proposal(proposal: Any, samples: Sequence[str]) -> None:
    if not isinstance(proposal, list) or not proposal or not all(isinstance(p, str) for p in proposal):
        raise ValueError("proposal must be a non-empty list of strings")
    for p in proposal:
        check_portable(p)
    missed = [s for s in samples if not any(full_match(p, s) for p in proposal)]
    if missed:
        raise ValueError(f"proposal misses {len(missed)} sample(s), e.g. {missed[0]!r}")


# --- attributes and rules -------------------------------------------------------


def attribute_values(
    input_tokens: int,
    output_tokens: int,
    timestamp: int,
    idle_ms: int,
    processing_ms: int,
    offset_minutes: int = 0,
) -> Dict[str, float]:
    hour = minute_hour(timestamp, offset_minutes)
    return {
        "max_input_tokens": input_tokens,
        "max_output_tokens": output_tokens,
        "min_hour": hour,
        "max_hour": hour,
        "max_idle_time": idle_ms,
        "max_processing_time": processing_ms,
    }


def event_attributes(event: TraceEvent, offset_minutes: int = 0) -> Dict[str, float]:
    return attribute_values(
        event.input_tokens,
        event.output_tokens,
        event.timestamp,
        event.idle_ms,
        event.processing_ms,
        offset_minutes,
    )


def induce_attribute(events: Sequence[TraceEvent], offset_minutes: int = 0) -> AttributePredicate:
    if not events:
        raise LearnError("Cannot induce attribute ranges from an empty cluster.")
    rows = [event_attributes(e, offset_minutes) for e in events]
    return AttributePredicate(
        **{
            name: Interval(min(r[name] for r in rows), max(r[name] for r in rows))
            for name in NUMERIC_ATTRIBUTES
        }
    )


def induce_rule(
    rule_index: int,
    events: Sequence[TraceEvent],
    agg: Optional[Aggregator] = None,
    params: Optional[InductionParams] = None,
) -> ClusterRule:
    params = params or InductionParams()
    if not events:
        raise LearnError(f"Rule {rule_index}: empty cluster.")
    raw_inputs = [e.tool_input for e in events]
    drafts = draft_regexes(raw_inputs, params.draft_threshold)
    textual = aggregate(drafts, raw_inputs, agg, params.aggregator_timeout_s)
    attribute = induce_attribute(events, params.timezone_offset_minutes)
    return ClusterRule(rule_index=rule_index, textual=textual, attribute=attribute, support=len(events))

"""
Structural aggregator (name "none", the default): no external service.

Samples are split into separator skeletons (runs of ASCII letters/digits vs.
everything else). When a cluster yields at most `max_patterns` skeletons, each
skeleton becomes one pattern: separators stay literal; a slot with few distinct
values becomes an alternation of those values, otherwise the observed character
classes with observed length bounds. More skeletons than that means free text:
a single length-bounded pattern over the observed alphabet, or over any
character while fewer than `min_class_evidence` samples back it.

Merge proposals: two clusters merge when one's drafts subsume the other's on
the probe set built from the subsumed cluster's inputs.
"""
import re
from collections import defaultdict
from typing import Any, Dict, List, Mapping, Sequence, Tuple

from core.aggregator_base import Aggregator
from core.rule_induct import (
    acceptance_sets,
    char_class,
    draft_regexes,
    escape_literal,
    probe_strings,
    repeat,
)


_TOKEN = re.compile(r"[A-Za-z0-9]+|[^A-Za-z0-9]+")
_SLOT = re.compile(r"[A-Za-z0-9]+")

Skeleton = Tuple[str | None, ...]


def tokenize(text: str) -> List[str]:
    return _TOKEN.findall(text)


def skeleton(text: str) -> Skeleton:
    return tuple(None if _SLOT.fullmatch(tok) else tok for tok in tokenize(text))


class StructuralAggregator(Aggregator):
    name = "none"
    max_patterns = 6
    max_alternatives = 4
    min_class_evidence = 20
    draft_threshold = 0.4

    def configure(self, settings: Mapping[str, Any]) -> None:
        rules = settings.get("rules", {})
        self.max_patterns = int(rules.get("max_patterns", self.max_patterns))
        self.max_alternatives = int(rules.get("max_alternatives", self.max_alternatives))
        self.min_class_evidence = int(rules.get("min_class_evidence", self.min_class_evidence))
        self.draft_threshold = float(rules.get("draft_threshold", self.draft_threshold))

    def aggregate(self, drafts: Sequence[str], samples: Sequence[str]) -> List[str]:
        if not samples:
            return list(drafts)
        groups: Dict[Skeleton, List[str]] = defaultdict(list)
        for s in samples:
            groups[skeleton(s)].append(s)
        if len(groups) > self.max_patterns:
            return [self._free_text(samples)]
        return sorted({self._skeleton_pattern(key, members) for key, members in groups.items()})

    def propose_merges(self, groups: Sequence[Sequence[str]]) -> List[Tuple[int, int]]:
        drafts = [draft_regexes(g, self.draft_threshold) if g else [] for g in groups]
        proposals = []
        for a in range(len(groups)):
            for b in range(a + 1, len(groups)):
                if self._drafts_subsume(drafts[a], drafts[b], groups[b]) or self._drafts_subsume(
                    drafts[b], drafts[a], groups[a]
                ):
                    proposals.append((a, b))
        return proposals

    def _drafts_subsume(self, outer: Sequence[str], inner: Sequence[str], inner_samples: Sequence[str]) -> bool:
        if not outer or not inner:
            return False
        probes = probe_strings(list(inner_samples), inner)
        accepted = acceptance_sets(list(outer) + list(inner), probes)
        outer_hits = frozenset().union(*(accepted[p] for p in outer))
        inner_hits = frozenset().union(*(accepted[p] for p in inner))
        return inner_hits <= outer_hits

    def _skeleton_pattern(self, key: Skeleton, members: Sequence[str]) -> str:
        token_rows = [tokenize(m) for m in members]
        parts = []
        for pos, sep in enumerate(key):
            if sep is not None:
                parts.append(escape_literal(sep))
                continue
            values = sorted({row[pos] for row in token_rows})
            if len(values) == 1:
                parts.append(escape_literal(values[0]))
            elif len(values) <= self.max_alternatives:
                parts.append("(?:" + "|".join(escape_literal(v) for v in values) + ")")
            else:
                lengths = [len(v) for v in values]
                parts.append(repeat(char_class("".join(values)), min(lengths), max(lengths)))
        return "".join(parts)

    def _free_text(self, samples: Sequence[str]) -> str:
        longest = max(len(s) for s in samples)
        if len(samples) < self.min_class_evidence:
            return repeat(".", 1 if all(samples) else 0, 2 * longest)
        return repeat(char_class("".join(samples)), 1 if all(samples) else 0, 2 * longest)


aggregator = StructuralAggregator()

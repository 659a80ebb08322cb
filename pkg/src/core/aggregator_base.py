"""
Aggregator interface. Each aggregator module under src/aggregators should expose
an `aggregator` object implementing Aggregator.aggregate.
"""
from abc import ABC, abstractmethod
from typing import Any, List, Mapping, Sequence, Tuple


class Aggregator(ABC):
    name: str

    def configure(self, settings: Mapping[str, Any]) -> None:
        """Pick up tuning knobs from the merged settings; no-op by default."""

    @abstractmethod
    def aggregate(self, drafts: Sequence[str], samples: Sequence[str]) -> List[str]:
        """
        Return a compact pattern list covering every sample. Output that misses a
        sample is rejected by the caller and the drafts are used instead.
        """

    def propose_merges(self, groups: Sequence[Sequence[str]]) -> List[Tuple[int, int]]:
        """Pairs of cluster indices whose raw inputs share a category."""
        return []

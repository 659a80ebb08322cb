"""
Average-linkage agglomerative clustering over cosine distance, cut at a merge
threshold, plus the aggregator-driven semantic merge pass.

The same `agglomerate` routine groups draft strings by edit distance in
rule_induct.
"""
import logging
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from core.embed import FeatureVector, apply_block_weights
from core.errors import ConfigError, LearnError

if TYPE_CHECKING:
    from core.aggregator_base import Aggregator


logger = logging.getLogger(__name__)

EPS = 1e-9


@dataclass(frozen=True)
class ClusterParams:
    merge_threshold: float = 0.35
    min_cluster_size_for_rule: int = 1
    distance: str = "cosine"
    linkage: str = "average"
    block_weights: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.merge_threshold < 0:
            raise ConfigError("cluster.merge_threshold", "must be >= 0")
        if self.min_cluster_size_for_rule < 1:
            raise ConfigError("cluster.min_cluster_size_for_rule", "must be >= 1")
        if (self.distance, self.linkage) != ("cosine", "average"):
            raise ConfigError("cluster.linkage", "only average linkage over cosine distance is supported")

    @classmethod
    def from_settings(cls, settings: Mapping[str, Any]) -> "ClusterParams":
        section = settings.get("cluster", {})
        return cls(
            merge_threshold=float(section.get("merge_threshold", 0.35)),
            min_cluster_size_for_rule=int(section.get("min_cluster_size_for_rule", 1)),
            block_weights=dict(section.get("block_weights") or {}),
        )


@dataclass(frozen=True)
class ClusterSet:
    tool_name: str
    clusters: Tuple[Tuple[int, ...], ...]
    params: ClusterParams
    warnings: Tuple[str, ...] = ()

    def __post_init__(self) -> None:
        _check_partition(self.clusters)

    @property
    def flagged(self) -> List[int]:
        """Cluster indices held for staging review: singletons and undersized clusters."""
        floor = max(2, self.params.min_cluster_size_for_rule)
        return [k for k, members in enumerate(self.clusters) if len(members) < floor]

    def __len__(self) -> int:
        return len(self.clusters)


def cosine_distance_matrix(matrix: np.ndarray) -> np.ndarray:
    matrix = np.asarray(matrix, dtype=np.float64)
    norms = np.linalg.norm(matrix, axis=1)
    zero = norms == 0
    unit = np.divide(matrix, norms[:, None], out=np.zeros_like(matrix), where=~zero[:, None])
    dist = 1.0 - unit @ unit.T
    dist = (dist + dist.T) / 2

    # zero vectors: distance 0 to each other, 1 to everything else
    dist[zero, :] = 1.0
    dist[:, zero] = 1.0
    dist[np.ix_(zero, zero)] = 0.0

    dist = np.clip(dist, 0.0, 2.0)
    dist[np.abs(dist) < 1e-12] = 0.0
    np.fill_diagonal(dist, 0.0)
    return dist


def agglomerate(distances: np.ndarray, threshold: float) -> List[Tuple[int, ...]]:
    """
    Average-linkage agglomeration with Lance-Williams updates. Each active slot is
    keyed by its smallest member; among pairs within EPS of the minimum distance
    the lexicographically smallest (slot, slot) pair merges first.
    """
    n = len(distances)
    if n == 0:
        return []
    dist = np.array(distances, dtype=np.float64, copy=True)
    np.fill_diagonal(dist, np.inf)
    sizes = np.ones(n, dtype=np.int64)
    members: Dict[int, List[int]] = {i: [i] for i in range(n)}
    active = np.ones(n, dtype=bool)

    while active.sum() > 1:
        dmin = dist.min()
        if dmin > threshold + EPS:
            break
        candidates = np.argwhere(np.triu(dist <= dmin + EPS, k=1))
        i, j = (int(x) for x in candidates[0])

        ni, nj = sizes[i], sizes[j]
        merged_row = (ni * dist[i] + nj * dist[j]) / (ni + nj)
        dist[i, :] = merged_row
        dist[:, i] = merged_row
        dist[i, i] = np.inf
        dist[j, :] = np.inf
        dist[:, j] = np.inf
        sizes[i] = ni + nj
        active[j] = False
        members[i].extend(members.pop(j))

    return sorted(tuple(sorted(m)) for m in members.values())


def cluster_embeddings(
    vectors: Sequence[FeatureVector] | np.ndarray,
    params: Optional[ClusterParams] = None,
    tool_name: str = "",
) -> ClusterSet:
    params = params or ClusterParams()
    if len(vectors) == 0:
        raise LearnError(f"No invocations to cluster for tool {tool_name!r}.")
    if isinstance(vectors, np.ndarray):
        matrix = vectors
    else:
        matrix = np.vstack([v.values if isinstance(v, FeatureVector) else np.asarray(v) for v in vectors])
    matrix = apply_block_weights(matrix, params.block_weights)

    clusters = agglomerate(cosine_distance_matrix(matrix), params.merge_threshold)
    result = ClusterSet(tool_name=tool_name, clusters=tuple(clusters), params=params)
    if result.flagged:
        logger.info(
            "Tool %s: %d of %d clusters flagged for review (size < %d)",
            tool_name or "<unnamed>",
            len(result.flagged),
            len(result),
            max(2, params.min_cluster_size_for_rule),
        )
    return result


def merge_semantic(cluster_set: ClusterSet, raw_inputs: Sequence[str], aggregator: "Aggregator") -> ClusterSet:
    groups = [[raw_inputs[i] for i in members] for members in cluster_set.clusters]
    try:
        proposals = list(aggregator.propose_merges(groups))
        for a, b in proposals:
            if not (0 <= a < len(groups) and 0 <= b < len(groups)):
                raise ValueError(f"merge proposal ({a}, {b}) references an unknown cluster")
    except Exception as exc:
        message = f"semantic merge skipped for {cluster_set.tool_name or '<unnamed>'}: {exc}"
        logger.warning(message)
        return ClusterSet(
            tool_name=cluster_set.tool_name,
            clusters=cluster_set.clusters,
            params=cluster_set.params,
            warnings=cluster_set.warnings + (message,),
        )

    if not proposals:
        return cluster_set

    parent = list(range(len(groups)))

    def find(k: int) -> int:
        while parent[k] != k:
            parent[k] = parent[parent[k]]
            k = parent[k]
        return k

    for a, b in proposals:
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[max(ra, rb)] = min(ra, rb)

    merged: Dict[int, List[int]] = {}
    for k, members in enumerate(cluster_set.clusters):
        merged.setdefault(find(k), []).extend(members)
    clusters = sorted(tuple(sorted(m)) for m in merged.values())
    logger.info(
        "Tool %s: semantic merge %d -> %d clusters",
        cluster_set.tool_name or "<unnamed>",
        len(cluster_set),
        len(clusters),
    )
    return ClusterSet(
        tool_name=cluster_set.tool_name,
        clusters=tuple(clusters),
        params=cluster_set.params,
        warnings=cluster_set.warnings,
    )


def _check_partition(clusters: Sequence[Sequence[int]]) -> None:
    seen = set()
    for members in clusters:
        if not members:
            raise LearnError("Cluster partition contains an empty cluster.")
        for m in members:
            if m in seen:
                raise LearnError(f"Member {m} appears in more than one cluster.")
            seen.add(m)
    if seen and seen != set(range(len(seen))):
        raise LearnError("Cluster partition does not cover a contiguous member range.")

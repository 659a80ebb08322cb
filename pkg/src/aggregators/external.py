"""
External aggregator (name "external"): posts drafts and samples to a
pattern-compaction service, typically a language model behind an HTTP shim.

Request body:  {"task": "aggregate", "drafts": [...], "samples": [...]}
Response body: {"patterns": [...]}
Merge requests send {"task": "merge", "groups": [[...], ...]} and expect
{"merges": [[a, b], ...]}.
"""
from typing import Any, Dict, List, Mapping, Sequence, Tuple

import requests

from core.aggregator_base import Aggregator
from core.errors import AggregatorError


class ExternalAggregator(Aggregator):
    name = "external"
    endpoint = ""
    timeout_s = 30.0
    user_agent = "policy-learner/1.0"

    def configure(self, settings: Mapping[str, Any]) -> None:
        section = settings.get("aggregator", {})
        self.endpoint = str(section.get("endpoint") or "")
        self.timeout_s = int(section.get("timeout_ms", 30000)) / 1000

    def aggregate(self, drafts: Sequence[str], samples: Sequence[str]) -> List[str]:
        body = self._post({"task": "aggregate", "drafts": list(drafts), "samples": list(samples)})
        patterns = body.get("patterns")
        if not isinstance(patterns, list):
            raise AggregatorError("response carries no 'patterns' list")
        return patterns

    def propose_merges(self, groups: Sequence[Sequence[str]]) -> List[Tuple[int, int]]:
        body = self._post({"task": "merge", "groups": [list(g) for g in groups]})
        merges = body.get("merges", [])
        try:
            return [(int(a), int(b)) for a, b in merges]
        except (TypeError, ValueError) as exc:
            raise AggregatorError(f"malformed 'merges' list: {exc}") from exc

    def _post(self, payload: Dict[str, Any]) -> Dict[str, Any]:
        if not self.endpoint:
            raise AggregatorError("aggregator.endpoint is not set")
        session = requests.Session()
        session.headers.update({"User-Agent": self.user_agent})
        try:
            resp = session.post(self.endpoint, json=payload, timeout=self.timeout_s)
            resp.raise_for_status()
            body = resp.json()
        except (requests.RequestException, ValueError) as exc:
            raise AggregatorError(f"{self.endpoint}: {exc}") from exc
        if not isinstance(body, dict):
            raise AggregatorError("response is not a JSON object")
        return body


aggregator = ExternalAggregator()

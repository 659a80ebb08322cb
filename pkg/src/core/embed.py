"""
Feature embedding of one tool invocation: six scaled numeric attributes followed
by four feature-hashed text blocks, 150 values in a fixed layout.
"""
import datetime as dt
import re
from dataclasses import asdict, dataclass
from typing import Any, Dict, List, Mapping, Optional, Sequence

import numpy as np
import pytz

from core.errors import ConfigError
from core.hashing import fnv1a_64
from core.trace_model import TraceEvent


NUMERIC_ATTRIBUTES = (
    "max_input_tokens",
    "max_output_tokens",
    "min_hour",
    "max_hour",
    "max_idle_time",
    "max_processing_time",
)

# (block name, dims) in vector order
LAYOUT = tuple((name, 1) for name in NUMERIC_ATTRIBUTES) + (
    ("thoughts", 32),
    ("tool_type", 16),
    ("tool_input", 64),
    ("task_result", 32),
)
FEATURE_DIMS = sum(dims for _, dims in LAYOUT)

TEXT_PREFIXES = {
    "thoughts": "INTENT",
    "tool_type": "ACTION",
    "tool_input": "PARAMETERS",
    "task_result": "OUTCOME",
}

_WORD = re.compile(r"\w+")
_SIGN_BIT = 1 << 63


def _block_slices() -> Dict[str, slice]:
    slices: Dict[str, slice] = {}
    start = 0
    for name, dims in LAYOUT:
        slices[name] = slice(start, start + dims)
        start += dims
    return slices


BLOCK_SLICES = _block_slices()


@dataclass(frozen=True)
class EmbedConfig:
    token_cap: int = 32768
    idle_cap_ms: int = 600000
    processing_cap_ms: int = 3600000
    timezone_offset_minutes: int = 0

    def __post_init__(self) -> None:
        for key in ("token_cap", "idle_cap_ms", "processing_cap_ms"):
            if getattr(self, key) <= 0:
                raise ConfigError(f"embed.{key}", "must be > 0")
        if not -24 * 60 < self.timezone_offset_minutes < 24 * 60:
            raise ConfigError("embed.timezone_offset_minutes", "must be within one day of UTC")

    @classmethod
    def from_settings(cls, settings: Mapping[str, Any]) -> "EmbedConfig":
        section = settings.get("embed", {})
        return cls(**{k: int(section[k]) for k in asdict(cls()) if k in section})

    def to_dict(self) -> Dict[str, int]:
        return asdict(self)


@dataclass(frozen=True)
class FeatureVector:
    values: np.ndarray

    def block(self, name: str) -> np.ndarray:
        return self.values[BLOCK_SLICES[name]]

    def __len__(self) -> int:
        return len(self.values)


def local_time(timestamp_ms: int, offset_minutes: int = 0) -> dt.datetime:
    tz = pytz.FixedOffset(offset_minutes)
    return dt.datetime.fromtimestamp(timestamp_ms // 1000, tz=tz)


def event_hour(timestamp_ms: int, offset_minutes: int = 0) -> int:
    return local_time(timestamp_ms, offset_minutes).hour


def minute_hour(timestamp_ms: int, offset_minutes: int = 0) -> float:
    """Local time of day in fractional hours, truncated to the minute."""
    t = local_time(timestamp_ms, offset_minutes)
    return round(t.hour + t.minute / 60, 6)


def scale_numeric(value: float, cap: float) -> float:
    if cap <= 0:
        raise ValueError("cap must be > 0")
    return min(max(value / cap, 0.0), 1.0)


def text_features(prefix: str, text: str) -> List[str]:
    content = f"{prefix}: {text}".lower()
    words = _WORD.findall(content)
    trigrams = [content[i : i + 3] for i in range(len(content) - 2)]
    return words + trigrams


def hash_text_block(prefix: str, text: str, dims: int) -> np.ndarray:
    if dims < 1:
        raise ValueError("dims must be >= 1")
    block = np.zeros(dims, dtype=np.float64)
    if not text:
        return block
    for feature in text_features(prefix, text):
        h = fnv1a_64(feature)
        block[h % dims] += -1.0 if h & _SIGN_BIT else 1.0
    norm = np.linalg.norm(block)
    if norm > 0:
        block /= norm
    return block


def embed_event(event: TraceEvent, config: Optional[EmbedConfig] = None) -> FeatureVector:
    config = config or EmbedConfig()
    hour = event_hour(event.timestamp, config.timezone_offset_minutes) / 24
    values = np.zeros(FEATURE_DIMS, dtype=np.float64)
    values[0] = scale_numeric(event.input_tokens, config.token_cap)
    values[1] = scale_numeric(event.output_tokens, config.token_cap)
    values[2] = hour
    values[3] = hour
    values[4] = scale_numeric(event.idle_ms, config.idle_cap_ms)
    values[5] = scale_numeric(event.processing_ms, config.processing_cap_ms)

    texts = {
        "thoughts": event.thoughts,
        "tool_type": event.tool_name,
        "tool_input": event.tool_input,
        "task_result": event.task_result,
    }
    for name, text in texts.items():
        sl = BLOCK_SLICES[name]
        values[sl] = hash_text_block(TEXT_PREFIXES[name], text, sl.stop - sl.start)
    return FeatureVector(values=values)


def embed_events(events: Sequence[TraceEvent], config: Optional[EmbedConfig] = None) -> np.ndarray:
    if not events:
        return np.zeros((0, FEATURE_DIMS))
    return np.vstack([embed_event(e, config).values for e in events])


def apply_block_weights(matrix: np.ndarray, weights: Optional[Mapping[str, float]]) -> np.ndarray:
    """Scale each block of an embedding matrix; "numeric" covers all six attribute slots."""
    if not weights:
        return matrix
    weighted = np.array(matrix, dtype=np.float64, copy=True)
    for name, weight in weights.items():
        if name == "numeric":
            weighted[:, : len(NUMERIC_ATTRIBUTES)] *= float(weight)
        elif name in BLOCK_SLICES:
            weighted[:, BLOCK_SLICES[name]] *= float(weight)
        else:
            raise ConfigError(f"cluster.block_weights.{name}", "unknown block")
    return weighted

"""Per-stream early-stop gate over a sliding window of token confidences.

The gate mirrors a minimal serving-side patch: each token's confidence is
pushed into a bounded FIFO, and once the FIFO is full the stream stops the
first time the window mean falls below ``threshold``. A stopped stream is
annotated with a ``<gconf<THRESHOLD>`` stop reason.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass
from typing import Any, Mapping

from .errors import ConfigError, GateStateError
from .metrics import _scalar_confidence
from .trace import TokenRecord, Trace

__all__ = [
    "GateConfig",
    "GateDecision",
    "StreamGate",
    "first_stop_index",
    "gate_feed",
    "gate_new",
    "is_gate_stop",
    "stop_reason",
]

CONTINUE = "continue"
STOP = "stop"
_STOP_PREFIX = "<gconf<"
# exact resummation cadence for the running window sum
_RESUM_EVERY = 1 << 16


def stop_reason(threshold) -> str:
    # same rendering as an f-string, so floats print shortest round-trip
    return f"{_STOP_PREFIX}{threshold}>"


def is_gate_stop(reason: str | None) -> bool:
    return bool(reason) and reason.startswith(_STOP_PREFIX) and reason.endswith(">")


@dataclass(frozen=True)
class GateConfig:
    enabled: bool = True
    window_size: int = 2048
    threshold: float = 17.0
    top_k: int | None = None
    exclude_sampled: bool = True

    def __post_init__(self):
        if not isinstance(self.window_size, int) or isinstance(self.window_size, bool) or self.window_size < 1:
            raise ConfigError(f"window_size must be a positive integer, got {self.window_size!r}")
        if self.top_k is not None and (not isinstance(self.top_k, int) or self.top_k < 1):
            raise ConfigError(f"top_k must be a positive integer, got {self.top_k!r}")
        if self.exclude_sampled and self.top_k is not None and self.top_k < 2:
            raise ConfigError("exclude_sampled needs top_k >= 2")
        if not isinstance(self.threshold, (int, float)) or math.isnan(self.threshold):
            raise ConfigError(f"threshold must be a real number, got {self.threshold!r}")

    @classmethod
    def from_xargs(cls, xargs: Mapping[str, Any], **overrides) -> "GateConfig":
        """Build from the flat request map (``enable_conf``, ``window_size``, ``threshold``)."""
        kw = dict(
            enabled=bool(xargs.get("enable_conf", False)),
            window_size=xargs.get("window_size", 2048),
            threshold=xargs.get("threshold", 17),
        )
        kw.update(overrides)
        return cls(**kw)

    def to_xargs(self) -> dict[str, Any]:
        return {"enable_conf": self.enabled, "window_size": self.window_size, "threshold": self.threshold}

    def token_confidence(self, logprobs) -> float:
        return _scalar_confidence(list(logprobs), self.top_k, self.exclude_sampled)


@dataclass(frozen=True)
class GateDecision:
    action: str
    window_mean: float | None
    token_index: int

    @property
    def stop(self) -> bool:
        return self.action == STOP


class StreamGate:
    """Mutable gate state for one in-flight stream. Single owner."""

    def __init__(self, cfg: GateConfig):
        if not isinstance(cfg, GateConfig):
            raise ConfigError("expected a GateConfig")
        self.cfg = cfg
        self.window: deque[float] = deque(maxlen=cfg.window_size)
        self.running_sum = 0.0
        self.tokens_seen = 0
        self.stopped = False
        self.stop_reason: str | None = None

    @property
    def partial_mean(self) -> float | None:
        """Mean of the current (possibly partial) window; diagnostics only."""
        if not self.window:
            return None
        return self.running_sum / len(self.window)

    def feed(self, record: TokenRecord | list[float]) -> GateDecision:
        lps = record.candidate_logprobs if isinstance(record, TokenRecord) else record
        return self.feed_confidence(self.cfg.token_confidence(lps))

    def feed_confidence(self, conf: float) -> GateDecision:
        if self.stopped:
            raise GateStateError("gate already stopped")
        index = self.tokens_seen
        self.tokens_seen += 1
        if not self.cfg.enabled:
            return GateDecision(CONTINUE, None, index)
        self.running_sum = _push(self.window, self.running_sum, conf, self.cfg.window_size, self.tokens_seen)
        if len(self.window) < self.cfg.window_size:
            return GateDecision(CONTINUE, None, index)
        mean = self.running_sum / self.cfg.window_size
        if mean < self.cfg.threshold:
            self.stopped = True
            self.stop_reason = stop_reason(self.cfg.threshold)
            return GateDecision(STOP, mean, index)
        return GateDecision(CONTINUE, mean, index)


def _push(window: deque, running: float, conf: float, size: int, seen: int) -> float:
    if len(window) == size:
        running -= window[0]
    window.append(conf)
    running += conf
    if seen % _RESUM_EVERY == 0:
        running = math.fsum(window)
    return running


def gate_new(cfg: GateConfig) -> StreamGate:
    return StreamGate(cfg)


def gate_feed(state: StreamGate, record: TokenRecord | list[float]) -> GateDecision:
    return state.feed(record)


def first_stop_index(trace: Trace, cfg: GateConfig) -> int | None:
    """Index of the token at which the gate would stop, or None.

    Replays the exact arithmetic of :meth:`StreamGate.feed` without the
    per-call object overhead.
    """
    if not cfg.enabled or trace.token_count < cfg.window_size:
        return None
    size = cfg.window_size
    threshold = cfg.threshold
    conf = cfg.token_confidence
    window: deque[float] = deque(maxlen=size)
    running = 0.0
    for i, lps in enumerate(trace.token_lists()):
        running = _push(window, running, conf(lps), size, i + 1)
        if i + 1 >= size and running / size < threshold:
            return i
    return None

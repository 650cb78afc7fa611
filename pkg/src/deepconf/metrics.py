"""Token- and trace-level confidence measures.

All functions are pure. Per-token work is vectorized over a trace's
log-probability matrix; the scalar helpers used by the streaming gate use
exactly rounded sums so a replay is bit-reproducible.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from decimal import ROUND_CEILING, Decimal

import numpy as np

from .errors import ConfigError, DomainError
from .trace import TokenRecord, Trace

__all__ = [
    "Measure",
    "MetricConfig",
    "TraceConfidence",
    "bottom_count",
    "group_confidences",
    "measure_value",
    "token_confidence",
    "token_confidences",
    "token_entropy",
    "trace_confidence",
    "window_means",
]

# rolling sums restart from an exact summation every this many windows
RECOMPUTE_EVERY = 1 << 16


class Measure(str, enum.Enum):
    MEAN = "mean"
    BOTTOM_Q = "bottom_q"
    LOWEST_GROUP = "lowest_group"
    TAIL = "tail"
    HEAD = "head"


def _fraction(name, value, optional=True):
    if value is None and optional:
        return
    if not (isinstance(value, (int, float)) and 0 < value <= 1):
        raise ConfigError(f"{name} must be in (0, 1], got {value!r}")


@dataclass(frozen=True)
class MetricConfig:
    """Knobs shared by every trace-level measure.

    ``top_k=None`` averages over every candidate stored for a token. With
    ``exclude_sampled`` the sampled token (index 0) is left out of the
    token confidence, reproducing the published serving patch.
    ``tail_fraction`` switches the tail measure from a fixed token count to
    a fraction of the trace.
    """

    top_k: int | None = None
    window_size: int = 2048
    bottom_fraction: float = 0.1
    tail_tokens: int = 2048
    tail_fraction: float | None = None
    head_fraction: float | None = None
    exclude_sampled: bool = False

    def __post_init__(self):
        if self.top_k is not None and (not isinstance(self.top_k, int) or self.top_k < 1):
            raise ConfigError(f"top_k must be a positive integer, got {self.top_k!r}")
        if self.exclude_sampled and self.top_k is not None and self.top_k < 2:
            raise ConfigError("exclude_sampled needs top_k >= 2")
        if not isinstance(self.window_size, int) or self.window_size < 1:
            raise ConfigError(f"window_size must be a positive integer, got {self.window_size!r}")
        if not isinstance(self.tail_tokens, int) or self.tail_tokens < 1:
            raise ConfigError(f"tail_tokens must be a positive integer, got {self.tail_tokens!r}")
        _fraction("bottom_fraction", self.bottom_fraction, optional=False)
        _fraction("tail_fraction", self.tail_fraction)
        _fraction("head_fraction", self.head_fraction)


@dataclass(frozen=True)
class TraceConfidence:
    mean: float
    bottom_q: float
    lowest_group: float
    tail: float
    head: float | None = None
    group_series: tuple[float, ...] | None = None

    def get(self, measure: Measure | str) -> float:
        value = getattr(self, Measure(measure).value)
        if value is None:
            raise ConfigError(f"measure {measure!r} was not configured")
        return value


# ---------------------------------------------------------------------------
# token level
# ---------------------------------------------------------------------------


def token_entropy(record: TokenRecord) -> float:
    """Entropy (nats) of the candidate distribution renormalized over top-k."""
    lp = np.asarray(record.candidate_logprobs, dtype=np.float64)
    shifted = lp - lp.max()
    log_z = math.log(float(np.exp(shifted).sum()))
    log_p = shifted - log_z
    h = -float(np.dot(np.exp(log_p), log_p))
    return min(max(h, 0.0), math.log(len(lp)))


def _scalar_confidence(lps, top_k: int | None, exclude_sampled: bool) -> float:
    count = len(lps)
    k = count if top_k is None else top_k
    if k > count:
        raise ConfigError(f"top_k={k} exceeds the {count} stored candidates")
    chosen = lps[1:k] if exclude_sampled else lps[:k]
    if not chosen:
        return 0.0
    return -math.fsum(chosen) / len(chosen)


def token_confidence(record: TokenRecord, top_k: int | None = None, *, exclude_sampled: bool = False) -> float:
    """Negative mean log-probability of the first ``top_k`` candidates."""
    if top_k is not None and top_k < 1:
        raise ConfigError(f"top_k must be positive, got {top_k}")
    return _scalar_confidence(record.candidate_logprobs, top_k, exclude_sampled)


def token_confidences(trace: Trace, top_k: int | None = None, exclude_sampled: bool = False) -> np.ndarray:
    """Per-token confidences of a whole trace as a float array."""
    rows, counts = trace.logprobs, trace.counts
    n = trace.token_count
    if n == 0:
        return np.zeros(0)
    start = 1 if exclude_sampled else 0
    if top_k is not None:
        if int(counts.min()) < top_k:
            raise ConfigError(f"top_k={top_k} exceeds the {int(counts.min())} stored candidates")
        width = top_k - start
        if width <= 0:
            return np.zeros(n)
        return -rows[:, start:top_k].sum(axis=1) / width
    if trace.uniform_width:
        width = rows.shape[1] - start
        if width <= 0:
            return np.zeros(n)
        return -rows[:, start:].sum(axis=1) / width
    cols = np.arange(rows.shape[1])[None, :]
    mask = (cols >= start) & (cols < counts[:, None])
    sums = np.where(mask, rows, 0.0).sum(axis=1)
    widths = counts - start
    out = np.zeros(n)
    ok = widths > 0
    out[ok] = -sums[ok] / widths[ok]
    return out


# ---------------------------------------------------------------------------
# groups
# ---------------------------------------------------------------------------


def window_means(values: np.ndarray, n: int) -> np.ndarray:
    """Means of every full length-``n`` window, stride 1, in O(len) time.

    Prefix sums are taken relative to a per-block shift and restarted every
    ``RECOMPUTE_EVERY`` windows so accumulated rounding stays far below 1e-9.
    """
    values = np.asarray(values, dtype=np.float64)
    total = values.shape[0] - n + 1
    if total <= 0:
        return np.zeros(0)
    out = np.empty(total)
    for lo in range(0, total, RECOMPUTE_EVERY):
        hi = min(lo + RECOMPUTE_EVERY, total)
        seg = values[lo : hi + n - 1]
        shift = float(seg.mean())
        c = np.empty(seg.shape[0] + 1)
        c[0] = 0.0
        np.cumsum(seg - shift, out=c[1:])
        out[lo:hi] = (c[n:] - c[:-n]) / n + shift
    return np.clip(out, values.min(), values.max(), out=out)


def _mean(x: np.ndarray) -> float:
    # a rounded mean can land an ulp outside the range of its inputs
    return min(max(float(x.mean()), float(x.min())), float(x.max()))


def _groups_from_confidences(conf: np.ndarray, n: int) -> np.ndarray:
    if conf.shape[0] < n:
        return np.array([_mean(conf)])
    return window_means(conf, n)


def _confidences(trace: Trace, cfg: MetricConfig) -> np.ndarray:
    if trace.token_count == 0:
        raise DomainError(f"trace {trace.trace_id!r} has no tokens")
    return token_confidences(trace, cfg.top_k, cfg.exclude_sampled)


def group_confidences(trace: Trace, cfg: MetricConfig) -> np.ndarray:
    """Sliding-window group confidences.

    One value per full window ending at positions ``n-1 .. N-1``; a trace
    shorter than the window yields a single whole-trace mean.
    """
    return _groups_from_confidences(_confidences(trace, cfg), cfg.window_size)


def bottom_count(fraction: float, n_groups: int) -> int:
    """``ceil(fraction * n_groups)``, at least 1, computed in decimal."""
    m = int((Decimal(repr(fraction)) * n_groups).to_integral_value(rounding=ROUND_CEILING))
    return max(1, min(m, n_groups))


def _bottom_mean(groups: np.ndarray, fraction: float) -> float:
    m = bottom_count(fraction, groups.shape[0])
    if m == groups.shape[0]:
        return _mean(groups)
    return _mean(np.partition(groups, m - 1)[:m])


def _tail(conf: np.ndarray, cfg: MetricConfig) -> float:
    n = conf.shape[0]
    if cfg.tail_fraction is not None:
        m = bottom_count(cfg.tail_fraction, n)
    else:
        m = min(cfg.tail_tokens, n)
    return _mean(conf[n - m :])


def _head(conf: np.ndarray, cfg: MetricConfig) -> float | None:
    if cfg.head_fraction is None:
        return None
    m = bottom_count(cfg.head_fraction, conf.shape[0])
    return _mean(conf[:m])


def trace_confidence(trace: Trace, cfg: MetricConfig, *, keep_series: bool = False) -> TraceConfidence:
    conf = _confidences(trace, cfg)
    groups = _groups_from_confidences(conf, cfg.window_size)
    return TraceConfidence(
        mean=_mean(conf),
        bottom_q=_bottom_mean(groups, cfg.bottom_fraction),
        lowest_group=float(groups.min()),
        tail=_tail(conf, cfg),
        head=_head(conf, cfg),
        group_series=tuple(groups.tolist()) if keep_series else None,
    )


def measure_value(trace: Trace, cfg: MetricConfig, measure: Measure | str) -> float:
    """Compute a single trace-level measure without building the others."""
    measure = Measure(measure)
    conf = _confidences(trace, cfg)
    if measure is Measure.MEAN:
        return _mean(conf)
    if measure is Measure.TAIL:
        return _tail(conf, cfg)
    if measure is Measure.HEAD:
        if cfg.head_fraction is None:
            raise ConfigError("the head measure needs head_fraction")
        return _head(conf, cfg)
    groups = _groups_from_confidences(conf, cfg.window_size)
    if measure is Measure.LOWEST_GROUP:
        return float(groups.min())
    return _bottom_mean(groups, cfg.bottom_fraction)

"""Answer aggregation: majority and confidence-weighted voting, top-eta filtering."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from typing import Iterable, Mapping, Sequence

from .errors import ConfigError, EmptyVoteError, ValidationError
from .metrics import Measure, MetricConfig, measure_value
from .trace import Trace

__all__ = [
    "Ballot",
    "VoteResult",
    "ballots_from_traces",
    "filter_top_eta",
    "keep_count",
    "majority_vote",
    "offline_deepconf",
    "weighted_vote",
]


@dataclass(frozen=True)
class Ballot:
    answer: str | None
    weight: float = 1.0
    trace_id: str = ""
    confidence: float = 0.0


@dataclass(frozen=True)
class VoteResult:
    winner: str
    tally: dict[str, float]
    consensus_ratio: float
    kept_trace_ids: frozenset[str] = field(default_factory=frozenset)


def keep_count(eta_percent: float, n: int) -> int:
    """Number of items kept by a top-eta% filter: round-half-up, at least 1."""
    if not (isinstance(eta_percent, (int, float)) and 0 < eta_percent <= 100):
        raise ConfigError(f"eta_percent must be in (0, 100], got {eta_percent!r}")
    m = (Decimal(repr(eta_percent)) * n / 100).to_integral_value(rounding=ROUND_HALF_UP)
    return max(1, min(int(m), n))


def _answerable(ballots: Iterable[Ballot]) -> list[Ballot]:
    return [b for b in ballots if b.answer is not None]


def _tally(ballots: Sequence[Ballot], unit: bool) -> VoteResult:
    ballots = _answerable(ballots)
    if not ballots:
        raise EmptyVoteError("no ballot carries an answer")
    groups: dict[str, list[float]] = {}
    for b in ballots:
        if not unit:
            if not math.isfinite(b.weight):
                raise ValidationError("weight not finite", b.trace_id)
            if b.weight < 0:
                raise ValidationError("negative weight", b.trace_id)
        groups.setdefault(b.answer, []).append(1.0 if unit else float(b.weight))
    # fsum is exactly rounded, so ballot order cannot change a tally
    tally = {a: math.fsum(ws) for a, ws in sorted(groups.items())}
    total = math.fsum(tally.values())
    if total <= 0:
        # every weight is zero: fall back to counting heads
        tally = {a: float(len(ws)) for a, ws in sorted(groups.items())}
        total = float(len(ballots))
    best = max(tally.values())
    winner = min(a for a, v in tally.items() if v == best)
    return VoteResult(
        winner=winner,
        tally=tally,
        consensus_ratio=min(1.0, tally[winner] / total),
        kept_trace_ids=frozenset(b.trace_id for b in ballots),
    )


def majority_vote(ballots: Sequence[Ballot]) -> VoteResult:
    """One vote per answered ballot; exact ties go to the smallest answer string."""
    return _tally(ballots, unit=True)


def weighted_vote(ballots: Sequence[Ballot]) -> VoteResult:
    """Sum ballot weights per answer; ties broken as in :func:`majority_vote`."""
    return _tally(ballots, unit=False)


def filter_top_eta(ballots: Sequence[Ballot], eta_percent: float) -> list[Ballot]:
    """Keep the ``keep_count(eta, N)`` most confident ballots.

    Equal confidences are ranked by trace_id. Kept ballots come back in
    their original order.
    """
    if not ballots:
        raise EmptyVoteError("nothing to filter")
    m = keep_count(eta_percent, len(ballots))
    ranked = sorted(range(len(ballots)), key=lambda i: (-ballots[i].confidence, ballots[i].trace_id))
    kept = sorted(ranked[:m])
    return [ballots[i] for i in kept]


def ballots_from_traces(
    traces: Iterable[Trace],
    cfg: MetricConfig,
    measure: Measure | str,
    scores: Mapping[str, float] | None = None,
) -> list[Ballot]:
    """Score answered traces; each ballot's weight equals its confidence."""
    out = []
    for t in traces:
        if t.answer is None:
            continue
        c = scores[t.trace_id] if scores is not None else measure_value(t, cfg, measure)
        out.append(Ballot(t.answer, c, t.trace_id, c))
    return out


def offline_deepconf(
    traces: Iterable[Trace],
    cfg: MetricConfig,
    measure: Measure | str,
    eta_percent: float = 100.0,
    *,
    unit_weights: bool = False,
    scores: Mapping[str, float] | None = None,
) -> VoteResult:
    """Score, keep the top eta% and vote.

    ``scores`` may supply precomputed trace confidences keyed by trace_id.
    With ``unit_weights`` the survivors vote one each (filter-then-majority).
    """
    ballots = ballots_from_traces(traces, cfg, measure, scores)
    if not ballots:
        raise EmptyVoteError("no trace carries an answer")
    kept = filter_top_eta(ballots, eta_percent)
    return majority_vote(kept) if unit_weights else weighted_vote(kept)

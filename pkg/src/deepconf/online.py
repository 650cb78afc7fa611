"""Warmup calibration, gated sequential generation and consensus stopping.

The same state machine drives two front ends: :func:`run_online` replays
pre-generated traces from a pool (the gate is simulated over each stored
trace), and :func:`run_online_live` pulls traces from a live source that
applies the gate server-side.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Mapping, Protocol

from .errors import BoundsError, ConfigError, DomainError, EmptyVoteError, OnlineRunError, RetriableError
from .gate import GateConfig, first_stop_index, is_gate_stop
from .metrics import Measure, MetricConfig, measure_value
from .trace import Trace, TracePool, sample_order
from .voting import Ballot, VoteResult, filter_top_eta, keep_count, weighted_vote

log = logging.getLogger(__name__)

__all__ = [
    "OnlineConfig",
    "OnlineOutcome",
    "TraceAccount",
    "TraceSource",
    "run_online",
    "run_online_live",
    "warmup_threshold",
]

WARMUP = "warmup"
ONLINE = "online"
COMPLETED = "completed"
GATED = "gated"


@dataclass(frozen=True)
class OnlineConfig:
    """Settings for one online run.

    ``gate_cfg`` only contributes its window and token-confidence knobs;
    its threshold is replaced by the calibrated one. When omitted, the gate
    uses the same window and token confidence as ``metric_cfg`` so a
    completed trace and an un-gated trace are the same thing.
    """

    n_init: int = 16
    eta_percent: float = 10.0
    tau: float = 0.95
    budget: int = 512
    metric_cfg: MetricConfig = field(default_factory=MetricConfig)
    gate_cfg: GateConfig | None = None
    adaptive: bool = True
    strict: bool = False

    def __post_init__(self):
        if not isinstance(self.n_init, int) or self.n_init < 1:
            raise ConfigError(f"n_init must be a positive integer, got {self.n_init!r}")
        if not isinstance(self.budget, int) or self.budget < 1:
            raise ConfigError(f"budget must be a positive integer, got {self.budget!r}")
        if self.n_init > self.budget:
            raise ConfigError(f"n_init ({self.n_init}) exceeds budget ({self.budget})")
        if not (0 < self.tau <= 1):
            raise ConfigError(f"tau must be in (0, 1], got {self.tau!r}")
        keep_count(self.eta_percent, 1)

    @classmethod
    def low(cls, **kw) -> "OnlineConfig":
        return cls(eta_percent=10.0, **kw)

    @classmethod
    def high(cls, **kw) -> "OnlineConfig":
        return cls(eta_percent=90.0, **kw)

    def gate(self, threshold: float) -> GateConfig:
        if self.gate_cfg is None:
            m = self.metric_cfg
            return GateConfig(True, m.window_size, threshold, m.top_k, m.exclude_sampled)
        g = self.gate_cfg
        return GateConfig(True, g.window_size, threshold, g.top_k, g.exclude_sampled)


@dataclass(frozen=True)
class TraceAccount:
    trace_id: str
    phase: str
    status: str
    tokens: int
    confidence: float | None
    voted: bool


@dataclass(frozen=True)
class OnlineOutcome:
    final_answer: str
    total_tokens: int
    traces_started: int
    traces_completed: int
    traces_gated: int
    stopped_by_consensus: bool
    threshold_s: float
    kept_trace_ids: frozenset[str]
    consensus_ratio: float
    fallback_used: bool = False
    ledger: tuple[TraceAccount, ...] = ()

    def to_record(self) -> dict:
        rec = asdict(self)
        rec["kept_trace_ids"] = sorted(self.kept_trace_ids)
        rec["ledger"] = [asdict(a) for a in self.ledger]
        return rec


def warmup_threshold(warmup_confidences, eta_percent: float) -> float:
    """Lowest confidence among the top eta% warmup traces."""
    confs = sorted((float(c) for c in warmup_confidences), reverse=True)
    if not confs:
        raise DomainError("warmup_threshold needs at least one confidence")
    return confs[keep_count(eta_percent, len(confs)) - 1]


class TraceSource(Protocol):
    def next_trace(self, gate: GateConfig | None) -> tuple[Trace, str | None] | None:
        """Produce one trace, gated server-side when ``gate`` is given.

        Returns ``(trace, finish_reason)``, or None when exhausted.
        """


class _Run:
    def __init__(self, cfg: OnlineConfig, scores: Mapping[str, float] | None):
        self.cfg = cfg
        self.scores = scores
        self.ledger: list[TraceAccount] = []
        self.ballots: list[Ballot] = []
        self.warmup: list[Ballot] = []
        # every answered completed trace, filtered or not
        self.answered: list[Ballot] = []
        self.s: float | None = None
        self.stopped_by_consensus = False

    @property
    def total_tokens(self) -> int:
        return sum(a.tokens for a in self.ledger)

    @property
    def started(self) -> int:
        return len(self.ledger)

    def confidence(self, trace: Trace) -> float | None:
        if trace.token_count == 0:
            return None
        if self.scores is not None and trace.trace_id in self.scores:
            return self.scores[trace.trace_id]
        return measure_value(trace, self.cfg.metric_cfg, Measure.LOWEST_GROUP)

    def add_warmup(self, trace: Trace) -> None:
        c = self.confidence(trace)
        self.ledger.append(TraceAccount(trace.trace_id, WARMUP, COMPLETED, trace.token_count, c, False))
        if c is not None:
            b = Ballot(trace.answer, c, trace.trace_id, c)
            self.warmup.append(b)
            if b.answer is not None:
                self.answered.append(b)

    def calibrate(self) -> None:
        answered = [b for b in self.warmup if b.answer is not None]
        if answered:
            kept = filter_top_eta(answered, self.cfg.eta_percent)
            self.s = min(b.confidence for b in kept)
            self.ballots = kept
        elif self.warmup:
            self.s = warmup_threshold([b.confidence for b in self.warmup], self.cfg.eta_percent)
        else:
            raise EmptyVoteError("warmup produced no scorable trace")
        kept_ids = {b.trace_id for b in self.ballots}
        self.ledger = [
            TraceAccount(a.trace_id, a.phase, a.status, a.tokens, a.confidence, a.trace_id in kept_ids)
            for a in self.ledger
        ]

    def consensus_reached(self) -> bool:
        if not self.cfg.adaptive or not self.ballots:
            return False
        if weighted_vote(self.ballots).consensus_ratio >= self.cfg.tau:
            self.stopped_by_consensus = True
            return True
        return False

    def add_online(self, trace: Trace, gated: bool) -> None:
        if gated:
            self.ledger.append(TraceAccount(trace.trace_id, ONLINE, GATED, trace.token_count, None, False))
            return
        c = self.confidence(trace)
        votes = trace.answer is not None and c is not None and c >= self.s
        self.ledger.append(TraceAccount(trace.trace_id, ONLINE, COMPLETED, trace.token_count, c, votes))
        if trace.answer is not None and c is not None:
            b = Ballot(trace.answer, c, trace.trace_id, c)
            self.answered.append(b)
            if votes:
                self.ballots.append(b)

    def outcome(self) -> OnlineOutcome:
        fallback = False
        if self.ballots:
            result: VoteResult = weighted_vote(self.ballots)
        else:
            if self.cfg.strict or not self.answered:
                raise EmptyVoteError("no answered trace survived filtering")
            log.warning("no trace passed the filter; voting over every answered trace")
            result = weighted_vote(self.answered)
            fallback = True
        gated = sum(a.status == GATED for a in self.ledger)
        return OnlineOutcome(
            final_answer=result.winner,
            total_tokens=self.total_tokens,
            traces_started=self.started,
            traces_completed=self.started - gated,
            traces_gated=gated,
            stopped_by_consensus=self.stopped_by_consensus,
            threshold_s=float(self.s),
            kept_trace_ids=result.kept_trace_ids,
            consensus_ratio=result.consensus_ratio,
            fallback_used=fallback,
            ledger=tuple(self.ledger),
        )


def simulation_order(pool: TracePool, budget: int, seed: int) -> list[Trace]:
    """The traces a simulated run will draw, in draw order."""
    if len(pool) < budget:
        raise BoundsError(f"pool has {len(pool)} traces, budget needs {budget}")
    return [pool.traces[i] for i in sample_order(len(pool), seed)[:budget]]


def run_online(
    pool: TracePool,
    cfg: OnlineConfig,
    seed: int,
    *,
    scores: Mapping[str, float] | None = None,
) -> OnlineOutcome:
    """Simulate an online run over pre-generated traces.

    Traces are drawn in a seeded order without replacement, standing in
    for i.i.d. samples from the model. ``scores`` may supply precomputed
    lowest-group confidences keyed by trace_id.
    """
    order = simulation_order(pool, cfg.budget, seed)
    run = _Run(cfg, scores)
    for t in order[: cfg.n_init]:
        run.add_warmup(t)
    run.calibrate()
    gate = cfg.gate(run.s)
    for t in order[cfg.n_init :]:
        if run.consensus_reached():
            break
        idx = first_stop_index(t, gate)
        if idx is None:
            run.add_online(t, gated=False)
        else:
            run.add_online(t.truncated(idx + 1), gated=True)
    return run.outcome()


def run_online_live(source: TraceSource, cfg: OnlineConfig) -> OnlineOutcome:
    """Drive an online run against a live trace source.

    Transport failures surface as :class:`OnlineRunError` carrying the
    tokens already spent and the per-trace ledger.
    """
    run = _Run(cfg, None)

    def pull(gate):
        try:
            return source.next_trace(gate)
        except RetriableError as e:
            raise OnlineRunError(str(e), run.total_tokens, list(run.ledger)) from e

    for _ in range(cfg.n_init):
        got = pull(None)
        if got is None:
            break
        run.add_warmup(got[0])
    if not run.warmup:
        raise EmptyVoteError("the source produced no traces")
    run.calibrate()
    gate = cfg.gate(run.s)
    while run.started < cfg.budget:
        if run.consensus_reached():
            break
        got = pull(gate)
        if got is None:
            break
        trace, reason = got
        run.add_online(trace, gated=is_gate_stop(reason))
    return run.outcome()

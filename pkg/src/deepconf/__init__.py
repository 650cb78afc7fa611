"""Confidence-filtered voting and confidence-gated early stopping for reasoning traces."""

from .errors import (
    BoundsError,
    ConfigError,
    DeepConfError,
    DomainError,
    EmptyVoteError,
    GateStateError,
    OnlineRunError,
    ParseError,
    ProtocolError,
    ScoringError,
    TransportError,
    ValidationError,
)
from .gate import GateConfig, GateDecision, StreamGate, first_stop_index, gate_feed, gate_new, stop_reason
from .metrics import (
    Measure,
    MetricConfig,
    TraceConfidence,
    group_confidences,
    measure_value,
    token_confidence,
    token_confidences,
    token_entropy,
    trace_confidence,
)
from .online import OnlineConfig, OnlineOutcome, run_online, run_online_live, warmup_threshold
from .trace import (
    AnswerNormalizer,
    ProblemSet,
    TokenRecord,
    Trace,
    TracePool,
    load_pool,
    load_problem_set,
    normalize_answer,
    save_pool,
    subsample,
)
from .voting import Ballot, VoteResult, filter_top_eta, majority_vote, offline_deepconf, weighted_vote

__version__ = "0.1.0"

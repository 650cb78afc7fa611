"""Exception hierarchy.

Every error carries an ``exit_code`` so the CLI can map failures onto its
documented process exit status without a lookup table.
"""

from __future__ import annotations


class DeepConfError(Exception):
    exit_code = 1


class ConfigError(DeepConfError, ValueError):
    """A configuration value is out of range or inconsistent."""

    exit_code = 2


class ValidationError(DeepConfError, ValueError):
    """Data violates a documented invariant.

    ``rule`` names the violated invariant; ``trace_id`` is set when the
    offending object is a single trace.
    """

    exit_code = 3

    def __init__(self, rule: str, trace_id: str | None = None, detail: str = ""):
        self.rule = rule
        self.trace_id = trace_id
        msg = rule
        if trace_id is not None:
            msg = f"trace {trace_id!r}: {msg}"
        if detail:
            msg = f"{msg} ({detail})"
        super().__init__(msg)


class ParseError(ValidationError):
    def __init__(self, path: str, line: int, detail: str):
        self.path = path
        self.line = line
        super().__init__(f"malformed line {line} in {path}", detail=detail)


class DomainError(DeepConfError, ValueError):
    """Input outside the domain of a metric (e.g. an empty trace)."""

    exit_code = 3


class BoundsError(DeepConfError, ValueError):
    """A requested size exceeds what is available."""

    exit_code = 2


class EmptyVoteError(DeepConfError):
    """No ballot carried an answer."""

    exit_code = 4


class GateStateError(DeepConfError, RuntimeError):
    pass


class ScoringError(DeepConfError):
    exit_code = 4


class RetriableError(DeepConfError):
    """Transient failure; the operation may succeed if repeated."""


class TransportError(RetriableError):
    pass


class ProtocolError(DeepConfError):
    """The server answered, but not in the shape we require."""


class OnlineRunError(RetriableError):
    """A live run failed mid-way; carries what was spent before the failure."""

    def __init__(self, message: str, total_tokens: int, ledger: list):
        self.total_tokens = total_tokens
        self.ledger = ledger
        super().__init__(f"{message} (tokens spent before failure: {total_tokens})")

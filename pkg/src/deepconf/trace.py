"""Token, trace and pool types plus JSONL persistence.

A trace stores, for every generated token, the log-probabilities (nats) of
the candidates the server reported at that position. Index 0 of each row is
the sampled token; the remaining candidates follow in descending order.
Token text is never stored.
"""

from __future__ import annotations

import json
import math
import os
import re
import tempfile
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import BoundsError, ParseError, ValidationError

SCHEMA_VERSION = 1
_U64 = (1 << 64) - 1

__all__ = [
    "AnswerNormalizer",
    "ProblemSet",
    "TokenRecord",
    "Trace",
    "TracePool",
    "derive_seed",
    "extract_boxed",
    "from_log_base",
    "load_pool",
    "load_problem_set",
    "normalize_answer",
    "save_pool",
    "subsample",
]


# ---------------------------------------------------------------------------
# answers
# ---------------------------------------------------------------------------

_BOXED = re.compile(r"\\boxed\s*\{")


def extract_boxed(text: str | None) -> str | None:
    """Return the contents of the last ``\\boxed{...}`` in ``text``.

    Braces are matched so nested groups such as ``\\boxed{\\frac{1}{2}}``
    come back whole. Returns None when there is no complete boxed group.
    """
    if not text:
        return None
    found = None
    for m in _BOXED.finditer(text):
        depth = 1
        i = m.end()
        while i < len(text) and depth:
            if text[i] == "{":
                depth += 1
            elif text[i] == "}":
                depth -= 1
            i += 1
        if depth == 0:
            found = text[m.end() : i - 1]
    return found


def _strip_outer_boxed(s: str) -> str:
    m = _BOXED.match(s)
    if m is None or not s.endswith("}"):
        return s
    inner = extract_boxed(s)
    # only unwrap when the boxed group spans the whole string
    if inner is not None and s == s[: m.end()] + inner + "}":
        return inner
    return s


@dataclass(frozen=True)
class AnswerNormalizer:
    """Ingestion-time answer canonicalization.

    Trims whitespace and unwraps a surrounding ``\\boxed{...}``. Comparison
    is case-sensitive unless ``case_sensitive`` is False, in which case
    answers are case-folded.
    """

    case_sensitive: bool = True
    strip_boxed: bool = True

    def __call__(self, text: str | None) -> str | None:
        if text is None:
            return None
        s = text.strip()
        if self.strip_boxed:
            prev = None
            while prev != s:
                prev = s
                s = _strip_outer_boxed(s).strip()
        if not self.case_sensitive:
            s = s.casefold()
        return s if s else None


normalize_answer = AnswerNormalizer()


def from_log_base(values, base: float):
    """Convert log-probabilities in ``base`` to nats."""
    if base == math.e:
        return np.asarray(values, dtype=np.float64)
    return np.asarray(values, dtype=np.float64) * math.log(base)


# ---------------------------------------------------------------------------
# tokens and traces
# ---------------------------------------------------------------------------


def _check_rows(rows: np.ndarray, counts: np.ndarray, trace_id: str | None) -> None:
    if rows.size == 0:
        return
    if np.any(counts < 1):
        raise ValidationError("empty token record", trace_id)
    mask = np.arange(rows.shape[1])[None, :] < counts[:, None]
    vals = rows[mask]
    if not np.all(np.isfinite(vals)):
        raise ValidationError("logprob not finite", trace_id)
    if np.any(vals > 0):
        raise ValidationError("logprob > 0", trace_id)
    if rows.shape[1] > 2:
        # candidates after the sampled token must be non-increasing
        tail = rows[:, 1:]
        d = tail[:, 1:] - tail[:, :-1]
        pair_mask = mask[:, 2:]
        if np.any(d[pair_mask] > 0):
            raise ValidationError("candidates not sorted", trace_id)


@dataclass(frozen=True)
class TokenRecord:
    """Candidate log-probabilities for one generated token."""

    candidate_logprobs: tuple[float, ...]

    def __post_init__(self):
        lps = tuple(float(x) for x in self.candidate_logprobs)
        object.__setattr__(self, "candidate_logprobs", lps)
        arr = np.asarray(lps, dtype=np.float64).reshape(1, -1)
        _check_rows(arr, np.array([len(lps)]), None)
        if not lps:
            raise ValidationError("empty token record")

    @property
    def candidate_count(self) -> int:
        return len(self.candidate_logprobs)


def _pack(token_lists: Sequence[Sequence[float]]) -> tuple[np.ndarray, np.ndarray]:
    n = len(token_lists)
    if n == 0:
        return np.zeros((0, 1)), np.zeros(0, dtype=np.int64)
    counts = np.fromiter((len(t) for t in token_lists), dtype=np.int64, count=n)
    width = int(counts.max()) if n else 1
    if np.all(counts == width) and width > 0:
        rows = np.asarray(token_lists, dtype=np.float64).reshape(n, width)
    else:
        rows = np.full((n, max(width, 1)), np.nan)
        for i, t in enumerate(token_lists):
            rows[i, : len(t)] = t
    return rows, counts


def _rebuild_trace(trace_id, rows, answer, correct, counts):
    return Trace(trace_id, rows, answer, correct, counts=counts)


class Trace:
    """One reasoning trace.

    Log-probabilities are held as a read-only ``(N, k_max)`` float array
    (``logprobs``) padded with NaN where a token reported fewer than
    ``k_max`` candidates; ``counts`` gives each row's real width.
    """

    __slots__ = ("trace_id", "answer", "correct", "logprobs", "counts")

    def __init__(
        self,
        trace_id: str,
        tokens: Iterable[Sequence[float]] | np.ndarray = (),
        answer: str | None = None,
        correct: bool | None = None,
        *,
        counts: np.ndarray | None = None,
    ):
        trace_id = str(trace_id)
        if isinstance(tokens, np.ndarray) and tokens.ndim == 2:
            rows = np.array(tokens, dtype=np.float64)
            if counts is None:
                counts = np.full(rows.shape[0], rows.shape[1], dtype=np.int64)
            counts = np.asarray(counts, dtype=np.int64).copy()
        else:
            token_lists = [
                t.candidate_logprobs if isinstance(t, TokenRecord) else t for t in tokens
            ]
            rows, counts = _pack(token_lists)
        _check_rows(rows, counts, trace_id)
        rows.setflags(write=False)
        counts.setflags(write=False)
        object.__setattr__(self, "trace_id", trace_id)
        object.__setattr__(self, "answer", answer)
        object.__setattr__(self, "correct", None if correct is None else bool(correct))
        object.__setattr__(self, "logprobs", rows)
        object.__setattr__(self, "counts", counts)

    def __setattr__(self, name, value):
        raise AttributeError("Trace is immutable")

    def __reduce__(self):
        return (_rebuild_trace, (self.trace_id, self.logprobs, self.answer, self.correct, self.counts))

    @property
    def token_count(self) -> int:
        return int(self.counts.shape[0])

    def __len__(self) -> int:
        return self.token_count

    @property
    def uniform_width(self) -> bool:
        return self.token_count == 0 or bool(np.all(self.counts == self.logprobs.shape[1]))

    def row(self, i: int) -> list[float]:
        return self.logprobs[i, : self.counts[i]].tolist()

    def token_lists(self) -> list[list[float]]:
        if self.uniform_width:
            return self.logprobs.tolist() if self.token_count else []
        return [self.row(i) for i in range(self.token_count)]

    @property
    def tokens(self) -> tuple[TokenRecord, ...]:
        return tuple(TokenRecord(tuple(r)) for r in self.token_lists())

    def truncated(self, n_tokens: int) -> "Trace":
        """First ``n_tokens`` tokens; the answer is dropped for a strict prefix."""
        if n_tokens >= self.token_count:
            return self
        return Trace(
            self.trace_id,
            self.logprobs[:n_tokens],
            answer=None,
            correct=None if self.correct is None else False,
            counts=self.counts[:n_tokens],
        )

    def __eq__(self, other):
        if not isinstance(other, Trace):
            return NotImplemented
        return (
            self.trace_id == other.trace_id
            and self.answer == other.answer
            and self.correct == other.correct
            and np.array_equal(self.counts, other.counts)
            and self.token_lists() == other.token_lists()
        )

    __hash__ = None

    def __repr__(self):
        return (
            f"Trace(trace_id={self.trace_id!r}, answer={self.answer!r}, "
            f"correct={self.correct!r}, token_count={self.token_count})"
        )


@dataclass(frozen=True)
class TracePool:
    problem_id: str
    ground_truth: str | None = None
    traces: tuple[Trace, ...] = ()
    normalizer: AnswerNormalizer = field(default=normalize_answer, compare=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "traces", tuple(self.traces))
        seen = set()
        for t in self.traces:
            if t.trace_id in seen:
                raise ValidationError("duplicate trace_id", t.trace_id)
            seen.add(t.trace_id)
        if self.ground_truth is not None:
            gt = self.normalizer(self.ground_truth)
            for t in self.traces:
                if t.correct is None:
                    continue
                expected = t.answer is not None and self.normalizer(t.answer) == gt
                if t.correct != expected:
                    raise ValidationError(
                        "correct label disagrees with ground truth", t.trace_id
                    )

    def __len__(self) -> int:
        return len(self.traces)

    def with_traces(self, traces: Iterable[Trace]) -> "TracePool":
        return TracePool(self.problem_id, self.ground_truth, tuple(traces), self.normalizer)

    def is_correct(self, answer: str | None) -> bool | None:
        """Score an aggregated answer; None when the pool carries no labels."""
        if answer is None:
            return False
        if self.ground_truth is not None:
            return self.normalizer(answer) == self.normalizer(self.ground_truth)
        labels = {t.correct for t in self.traces if t.answer == answer and t.correct is not None}
        if labels:
            return True in labels
        if any(t.correct is True for t in self.traces):
            # some answer is labelled correct and it is not this one
            return False
        return None


@dataclass(frozen=True)
class ProblemSet:
    name: str
    pools: tuple[TracePool, ...]
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "pools", tuple(self.pools))
        ids = [p.problem_id for p in self.pools]
        if len(set(ids)) != len(ids):
            raise ValidationError("duplicate problem_id")


# ---------------------------------------------------------------------------
# JSONL persistence
# ---------------------------------------------------------------------------


def _trace_line(t: Trace) -> str:
    obj = {
        "trace_id": t.trace_id,
        "answer": t.answer,
        "correct": t.correct,
        "tokens": t.token_lists(),
    }
    return json.dumps(obj, allow_nan=False)


def save_pool(pool: TracePool, path: str | os.PathLike) -> None:
    path = Path(path)
    header = {
        "problem_id": pool.problem_id,
        "ground_truth": pool.ground_truth,
        "schema_version": SCHEMA_VERSION,
    }
    lines = [json.dumps(header)] + [_trace_line(t) for t in pool.traces]
    data = "\n".join(lines) + "\n"
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except OSError as e:
        raise type(e)(f"cannot write pool to {path}: {e}") from e


def _parse(line: str, lineno: int, path: str) -> dict:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as e:
        raise ParseError(path, lineno, str(e)) from None
    if not isinstance(obj, dict):
        raise ParseError(path, lineno, "expected a JSON object")
    return obj


def load_pool(path: str | os.PathLike, normalizer: AnswerNormalizer = normalize_answer) -> TracePool:
    path = str(path)
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ParseError(path, 1, "missing metadata line")
    header = _parse(lines[0], 1, path)
    if header.get("schema_version") != SCHEMA_VERSION:
        raise ParseError(path, 1, f"unsupported schema_version {header.get('schema_version')!r}")
    if not isinstance(header.get("problem_id"), str):
        raise ParseError(path, 1, "problem_id must be a string")
    traces = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        obj = _parse(line, lineno, path)
        try:
            tid = obj["trace_id"]
            toks = obj["tokens"]
        except KeyError as e:
            raise ParseError(path, lineno, f"missing field {e.args[0]!r}") from None
        if not isinstance(toks, list) or not all(isinstance(r, list) for r in toks):
            raise ParseError(path, lineno, "tokens must be a list of lists")
        try:
            traces.append(Trace(tid, toks, answer=obj.get("answer"), correct=obj.get("correct")))
        except (TypeError, ValueError) as e:
            if isinstance(e, ValidationError):
                raise
            raise ParseError(path, lineno, str(e)) from None
    return TracePool(header["problem_id"], header.get("ground_truth"), tuple(traces), normalizer)


def load_problem_set(path: str | os.PathLike, name: str | None = None) -> ProblemSet:
    """Load every ``*.jsonl`` pool under a directory (or a single pool file).

    An optional ``problemset.yaml`` in the directory supplies ``name`` and
    ``metadata``.
    """
    path = Path(path)
    metadata: dict = {}
    if path.is_dir():
        files = sorted(path.glob("*.jsonl"))
        manifest = path / "problemset.yaml"
        if manifest.exists():
            import yaml

            doc = yaml.safe_load(manifest.read_text()) or {}
            name = name or doc.get("name")
            metadata = {str(k): str(v) for k, v in (doc.get("metadata") or {}).items()}
    else:
        files = [path]
    pools = tuple(load_pool(f) for f in files)
    return ProblemSet(name or path.stem, pools, metadata)


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------


def derive_seed(base_seed: int, problem_id: str, repeat: int) -> int:
    """Split ``base_seed`` into an independent 64-bit seed per (problem, repeat)."""
    ss = np.random.SeedSequence(
        [int(base_seed) & _U64, zlib.crc32(problem_id.encode("utf-8")), int(repeat)]
    )
    hi, lo = ss.generate_state(2, dtype=np.uint32)
    return (int(hi) << 32) | int(lo)


def sample_order(n: int, seed: int) -> np.ndarray:
    """Seeded permutation of ``range(n)``; prefixes give nested samples."""
    rng = np.random.default_rng(int(seed) & _U64)
    return rng.permutation(n)


def subsample(pool: TracePool, size: int, seed: int) -> TracePool:
    """Uniform sample of ``size`` traces without replacement."""
    if size < 1:
        raise BoundsError(f"sample size must be positive, got {size}")
    if size > len(pool):
        raise BoundsError(f"cannot draw {size} traces from a pool of {len(pool)}")
    idx = sample_order(len(pool), seed)[:size]
    return pool.with_traces(pool.traces[i] for i in idx)

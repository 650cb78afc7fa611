"""Synthetic trace pools for desk-scale experiments.

Recipe: every trace draws a per-trace confidence level around
``base_confidence`` plus i.i.d. per-token noise. Incorrect traces (and a
small share of correct ones, with a shallower dip) receive one contiguous
span of depressed confidence, so the lowest-group measure separates the two
populations while the mean measure separates them only weakly. Candidate
log-probabilities are laid out so that the mean over all ``k`` candidates
equals the drawn token confidence.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .trace import ProblemSet, Trace, TracePool


@dataclass(frozen=True)
class SynthRecipe:
    n_traces: int = 1024
    candidates: int = 5
    min_tokens: int = 150
    max_tokens: int = 400
    base_confidence: float = 3.0
    trace_sd: float = 0.15
    token_sd: float = 0.6
    correct_rate: float = 0.5
    # answers for incorrect traces and their relative weights
    wrong_answers: tuple[str, ...] = ("W1", "W2", "W3")
    wrong_weights: tuple[float, ...] = (0.6, 0.25, 0.15)
    missing_answer_rate: float = 0.02
    dip_tokens: int = 64
    dip_depth: float = 1.2
    correct_dip_rate: float = 0.05
    correct_dip_depth: float = 0.4
    min_confidence: float = 0.01


def _layout(k: int) -> np.ndarray:
    # increasing multipliers with mean 1 -> descending logprobs
    j = np.arange(1, k + 1, dtype=np.float64)
    return 2.0 * j / (k + 1)


def synth_trace(
    rng: np.random.Generator,
    recipe: SynthRecipe,
    trace_id: str,
    answer: str | None,
    correct: bool,
) -> Trace:
    n = int(rng.integers(recipe.min_tokens, recipe.max_tokens + 1))
    level = recipe.base_confidence + rng.normal(0.0, recipe.trace_sd)
    conf = level + rng.normal(0.0, recipe.token_sd, size=n)
    depth = 0.0
    if not correct:
        depth = recipe.dip_depth
    elif rng.random() < recipe.correct_dip_rate:
        depth = recipe.correct_dip_depth
    if depth > 0:
        span = min(recipe.dip_tokens, n)
        start = int(rng.integers(0, n - span + 1))
        conf[start : start + span] -= depth
    np.maximum(conf, recipe.min_confidence, out=conf)
    lps = -conf[:, None] * _layout(recipe.candidates)[None, :]
    return Trace(trace_id, lps, answer=answer, correct=correct if answer is not None else False)


def synth_pool(problem_id: str, ground_truth: str, recipe: SynthRecipe, seed: int) -> TracePool:
    rng = np.random.default_rng(seed)
    w = np.asarray(recipe.wrong_weights, dtype=np.float64)
    w = w / w.sum()
    traces = []
    for i in range(recipe.n_traces):
        correct = bool(rng.random() < recipe.correct_rate)
        answer = ground_truth if correct else recipe.wrong_answers[int(rng.choice(len(w), p=w))]
        if rng.random() < recipe.missing_answer_rate:
            answer = None
        traces.append(synth_trace(rng, recipe, f"{problem_id}-{i:05d}", answer, correct and answer is not None))
    return TracePool(problem_id, ground_truth, tuple(traces))


@dataclass(frozen=True)
class SynthSuite:
    """A family of problems whose correct-answer share spans a range."""

    n_problems: int = 8
    correct_rates: tuple[float, float] = (0.3, 0.7)
    recipe: SynthRecipe = field(default_factory=SynthRecipe)


def synth_problem_set(suite: SynthSuite, seed: int, name: str = "synthetic") -> ProblemSet:
    rates = np.linspace(suite.correct_rates[0], suite.correct_rates[1], suite.n_problems)
    pools = []
    for i, rate in enumerate(rates):
        recipe = replace(suite.recipe, correct_rate=float(rate))
        pools.append(synth_pool(f"p{i:03d}", str(100 + i), recipe, seed * 1000 + i))
    return ProblemSet(
        name,
        tuple(pools),
        {"generator": "synthetic", "seed": str(seed), "n_problems": str(suite.n_problems)},
    )


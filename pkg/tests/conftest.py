import sys

import numpy as np
import pytest

from deepconf.trace import Trace, TracePool


def make_trace(trace_id, confidences, answer=None, k=1, correct=None):
    """Trace whose every token has ``k`` identical candidates at ``-c``.

    With identical candidates, the token confidence is exactly ``c`` for any
    top_k, which makes hand-computed expectations easy.
    """
    conf = np.asarray(confidences, dtype=np.float64)
    rows = np.repeat(-conf[:, None], k, axis=1)
    return Trace(trace_id, rows, answer=answer, correct=correct)


def random_rows(rng, n, k):
    """Random valid candidate rows: sampled token first, rest descending."""
    lp = -rng.exponential(1.5, size=(n, k))
    rest = -np.sort(-lp[:, 1:], axis=1)
    return np.concatenate([lp[:, :1], rest], axis=1)


def random_trace(rng, trace_id, n=None, k=None, answers=("A", "B", "C"), p_missing=0.1):
    n = int(rng.integers(1, 201)) if n is None else n
    k = int(rng.integers(1, 6)) if k is None else k
    answer = None if rng.random() < p_missing else str(rng.choice(answers))
    return Trace(trace_id, random_rows(rng, n, k), answer=answer)


def random_pool(rng, size=None, problem_id="p", k=None, max_tokens=200, **kw):
    size = int(rng.integers(1, 65)) if size is None else size
    k = int(rng.integers(1, 6)) if k is None else k
    traces = [
        random_trace(rng, f"t{i:03d}", n=int(rng.integers(1, max_tokens + 1)), k=k, **kw)
        for i in range(size)
    ]
    return TracePool(problem_id, None, tuple(traces))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance")
        for line in lines:
            terminalreporter.write_line(line)

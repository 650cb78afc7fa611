"""Chat-completions client that collects per-token candidate log-probabilities.

Talks to any OpenAI-compatible ``/chat/completions`` endpoint. The base URL
and key come from ``DEEPCONF_API_BASE`` / ``DEEPCONF_API_KEY`` unless passed
explicitly. Tests inject an ``httpx.MockTransport``; nothing here needs a
live model.
"""

from __future__ import annotations

import json
import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from importlib import resources
from pathlib import Path
from typing import Callable

import httpx
import yaml

from .errors import ConfigError, ProtocolError, TransportError
from .gate import GateConfig, is_gate_stop
from .trace import AnswerNormalizer, Trace, TracePool, extract_boxed, load_pool, normalize_answer, save_pool

log = logging.getLogger(__name__)

__all__ = [
    "BOXED_INSTRUCTION",
    "ChatClient",
    "GenRequest",
    "GenResult",
    "LiveSession",
    "Problem",
    "build_messages",
    "build_pool",
    "load_presets",
]

BOXED_INSTRUCTION = "Please reason step by step, and put your final answer within \\boxed{}."
ENV_BASE = "DEEPCONF_API_BASE"
ENV_KEY = "DEEPCONF_API_KEY"


def load_presets(path: str | os.PathLike | None = None) -> dict[str, dict]:
    """Per-model decoding presets; defaults to the bundled ``models.yaml``."""
    if path is None:
        text = resources.files("deepconf.presets").joinpath("models.yaml").read_text()
    else:
        text = Path(path).read_text()
    return yaml.safe_load(text) or {}


def build_messages(
    problem: str, system_prompt: str | None = None, append_instruction: bool = True
) -> tuple[tuple[str, str], ...]:
    user = f"{problem}\n{BOXED_INSTRUCTION}" if append_instruction else problem
    msgs = []
    if system_prompt:
        msgs.append(("system", system_prompt))
    msgs.append(("user", user))
    return tuple(msgs)


@dataclass(frozen=True)
class GenRequest:
    model: str
    prompt_messages: tuple[tuple[str, str], ...]
    temperature: float = 0.6
    top_p: float = 0.95
    top_k: int | None = None
    max_tokens: int = 32000
    n: int = 1
    logprob_candidates: int = 20
    gate_params: GateConfig | None = None
    extension_key: str = "vllm_xargs"

    def __post_init__(self):
        object.__setattr__(self, "prompt_messages", tuple(tuple(m) for m in self.prompt_messages))
        if self.max_tokens < 1 or self.n < 1:
            raise ConfigError("max_tokens and n must be positive")
        if self.logprob_candidates < 1:
            raise ConfigError("logprob_candidates must be positive")
        if self.gate_params is not None and self.gate_params.enabled and self.logprob_candidates < 2:
            raise ConfigError("gating needs logprob_candidates >= 2")

    @classmethod
    def from_preset(cls, preset: str, model: str, messages, presets: dict | None = None, **kw) -> "GenRequest":
        table = presets if presets is not None else load_presets()
        if preset not in table:
            raise ConfigError(f"unknown preset {preset!r}")
        known = {"temperature", "top_p", "top_k", "max_tokens"}
        params = {k: v for k, v in table[preset].items() if k in known}
        params.update(kw)
        return cls(model=model, prompt_messages=messages, **params)

    def payload(self) -> dict:
        body = {
            "model": self.model,
            "messages": [{"role": r, "content": c} for r, c in self.prompt_messages],
            "temperature": self.temperature,
            "top_p": self.top_p,
            "max_tokens": self.max_tokens,
            "n": self.n,
            "logprobs": True,
            "top_logprobs": self.logprob_candidates,
        }
        if self.top_k is not None:
            body["top_k"] = self.top_k
        if self.gate_params is not None and self.gate_params.enabled:
            body[self.extension_key] = self.gate_params.to_xargs()
        return body


@dataclass(frozen=True)
class GenResult:
    traces: tuple[Trace, ...]
    finish_reasons: tuple[str, ...]
    usage_tokens: int

    def gate_stopped(self) -> list[bool]:
        return [is_gate_stop(r) for r in self.finish_reasons]


def _token_row(entry: dict) -> list[float]:
    sampled_tok = entry.get("token")
    sampled = float(entry["logprob"])
    others = []
    skipped = False
    for cand in entry.get("top_logprobs") or []:
        if not skipped and cand.get("token") == sampled_tok:
            skipped = True
            continue
        lp = float(cand["logprob"])
        if math.isfinite(lp):
            others.append(lp)
    others.sort(reverse=True)
    # servers occasionally report a rounding-level positive value
    return [min(x, 0.0) for x in [sampled, *others]]


def parse_response(body: dict, normalizer: AnswerNormalizer = normalize_answer) -> GenResult:
    """Map a chat-completions response onto traces (sampled token first per row)."""
    traces, reasons = [], []
    rid = body.get("id", "resp")
    for choice in sorted(body.get("choices") or [], key=lambda c: c.get("index", 0)):
        lp = choice.get("logprobs")
        content = lp.get("content") if isinstance(lp, dict) else None
        if content is None:
            raise ProtocolError("logprobs not enabled")
        rows = [_token_row(e) for e in content]
        stop = choice.get("stop_reason")
        reason = stop if isinstance(stop, str) and is_gate_stop(stop) else (choice.get("finish_reason") or "")
        text = (choice.get("message") or {}).get("content")
        answer = None if is_gate_stop(reason) else normalizer(extract_boxed(text))
        traces.append(Trace(f"{rid}-{choice.get('index', len(traces))}", rows, answer=answer))
        reasons.append(reason)
    if not traces:
        raise ProtocolError("response carries no choices")
    usage = (body.get("usage") or {}).get("completion_tokens")
    if usage is None:
        usage = sum(t.token_count for t in traces)
    return GenResult(tuple(traces), tuple(reasons), int(usage))


class ChatClient:
    """Minimal chat-completions client with bounded exponential-backoff retries."""

    def __init__(
        self,
        base_url: str | None = None,
        api_key: str | None = None,
        *,
        transport: httpx.BaseTransport | None = None,
        timeout: float = 600.0,
        max_retries: int = 4,
        backoff: float = 0.5,
        sleep: Callable[[float], None] = time.sleep,
        normalizer: AnswerNormalizer = normalize_answer,
    ):
        base_url = base_url or os.environ.get(ENV_BASE)
        if not base_url:
            raise ConfigError(f"no endpoint: pass base_url or set {ENV_BASE}")
        api_key = api_key if api_key is not None else os.environ.get(ENV_KEY, "")
        headers = {"Authorization": f"Bearer {api_key}"} if api_key else {}
        self._http = httpx.Client(
            base_url=base_url.rstrip("/"), headers=headers, timeout=timeout, transport=transport
        )
        self.max_retries = max_retries
        self.backoff = backoff
        self.sleep = sleep
        self.normalizer = normalizer

    def close(self) -> None:
        self._http.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def _post(self, payload: dict) -> dict:
        last = None
        for attempt in range(self.max_retries + 1):
            if attempt:
                self.sleep(self.backoff * 2 ** (attempt - 1))
            try:
                resp = self._http.post("/chat/completions", json=payload)
            except httpx.TransportError as e:
                last = f"{type(e).__name__}: {e}"
                continue
            if resp.status_code == 429 or resp.status_code >= 500:
                last = f"HTTP {resp.status_code}"
                continue
            if resp.status_code >= 400:
                raise ProtocolError(f"HTTP {resp.status_code}: {resp.text[:200]}")
            try:
                return resp.json()
            except json.JSONDecodeError as e:
                raise ProtocolError(f"response is not JSON: {e}") from None
        raise TransportError(f"giving up after {self.max_retries + 1} attempts: {last}")

    def generate(self, request: GenRequest) -> GenResult:
        return parse_response(self._post(request.payload()), self.normalizer)


@dataclass(frozen=True)
class Problem:
    problem_id: str
    prompt: str
    ground_truth: str | None = None
    system_prompt: str | None = None


def _progress_path(out: Path) -> Path:
    return out.with_name(out.name + ".progress")


def build_pool(
    problem: Problem,
    count: int,
    request_template: GenRequest,
    out: str | os.PathLike,
    client: ChatClient,
    *,
    parallelism: int = 1,
) -> TracePool:
    """Generate until ``out`` holds ``count`` traces; resumes from an existing file.

    Each request asks for ``min(request_template.n, remaining)`` samples. The
    pool is rewritten after every response, and a ``.progress`` sidecar
    marks an unfinished file.
    """
    out = Path(out)
    norm = client.normalizer
    if out.exists():
        existing = load_pool(out, norm)
        traces = list(existing.traces)
    else:
        traces = []
    seen = {t.trace_id for t in traces}
    gt = norm(problem.ground_truth) if problem.ground_truth is not None else None

    def label(t: Trace) -> Trace:
        correct = None if gt is None else (t.answer is not None and norm(t.answer) == gt)
        return Trace(t.trace_id, t.logprobs, answer=t.answer, correct=correct, counts=t.counts)

    def persist():
        pool = TracePool(problem.problem_id, problem.ground_truth, tuple(traces), norm)
        save_pool(pool, out)
        marker = _progress_path(out)
        if len(traces) < count:
            marker.write_text(json.dumps({"target": count, "stored": len(traces)}) + "\n")
        elif marker.exists():
            marker.unlink()
        return pool

    def sizes(remaining):
        per = request_template.n
        batch = []
        while remaining > 0 and len(batch) < max(1, parallelism):
            batch.append(min(per, remaining))
            remaining -= batch[-1]
        return batch

    stalled = 0
    with ThreadPoolExecutor(max_workers=max(1, parallelism)) as ex:
        while len(traces) < count:
            batch = sizes(count - len(traces))
            futures = [ex.submit(client.generate, replace(request_template, n=k)) for k in batch]
            before = len(traces)
            try:
                for fut in futures:
                    for t in fut.result().traces:
                        if len(traces) >= count:
                            break
                        if t.trace_id in seen:
                            log.warning("dropping duplicate trace_id %s", t.trace_id)
                            continue
                        seen.add(t.trace_id)
                        traces.append(label(t))
            finally:
                persist()
            stalled = stalled + 1 if len(traces) == before else 0
            if stalled >= 3:
                raise ProtocolError(f"server keeps returning known trace ids for {problem.problem_id}")
    return persist()


class LiveSession:
    """Adapts a client to the one-trace-at-a-time source used by live runs."""

    def __init__(self, client: ChatClient, request: GenRequest):
        self.client = client
        self.request = replace(request, n=1, gate_params=None)

    def next_trace(self, gate: GateConfig | None):
        res = self.client.generate(replace(self.request, gate_params=gate))
        return res.traces[0], res.finish_reasons[0]

"""Repeated-resampling evaluation, ablation sweeps and report emission.

For each problem and repeat a seeded permutation of the pool is drawn once;
every method takes its working set as a prefix of that permutation, so all
methods with the same ``K`` see the identical traces and larger ``K`` nest
smaller ones.
"""

from __future__ import annotations

import csv
import hashlib
import io
import itertools
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from enum import Enum
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np
import yaml

from .errors import BoundsError, ConfigError, ScoringError
from .metrics import Measure, MetricConfig, measure_value
from .online import OnlineConfig, run_online
from .trace import SCHEMA_VERSION, ProblemSet, Trace, TracePool, derive_seed, load_problem_set, sample_order
from .voting import Ballot, majority_vote, offline_deepconf

__all__ = [
    "ExperimentConfig",
    "MethodKind",
    "MethodSpec",
    "RunReport",
    "emit_report",
    "load_config",
    "load_report",
    "run_ablation",
    "run_experiment",
]

REPORT_VERSION = 1
SWEEP_KEYS = ("tau", "n_init", "eta", "window_size", "measure", "K")


class MethodKind(str, Enum):
    PASS1 = "pass1"
    CONS = "cons"
    MEASURE = "measure"
    MEASURE_TOP_ETA = "measure_top_eta"
    ONLINE_LOW = "online_low"
    ONLINE_HIGH = "online_high"
    ONLINE_BUDGET_ONLY = "online_budget_only"

    @property
    def online(self) -> bool:
        return self.value.startswith("online")


_DEFAULT_ETA = {MethodKind.ONLINE_LOW: 10.0, MethodKind.ONLINE_HIGH: 90.0, MethodKind.ONLINE_BUDGET_ONLY: 10.0}


@dataclass(frozen=True)
class MethodSpec:
    name: str
    kind: MethodKind
    K: int = 512
    measure: Measure = Measure.LOWEST_GROUP
    # None picks the kind's default: 10 or 90 for online kinds, else 100
    eta: float | None = None
    metric: MetricConfig = field(default_factory=MetricConfig)
    n_init: int = 16
    tau: float = 0.95
    unit_weights: bool = False
    strict: bool = False

    def __post_init__(self):
        object.__setattr__(self, "kind", MethodKind(self.kind))
        object.__setattr__(self, "measure", Measure(self.measure))
        if self.eta is None:
            object.__setattr__(self, "eta", _DEFAULT_ETA.get(self.kind, 100.0))
        if not isinstance(self.K, int) or self.K < 1:
            raise ConfigError(f"{self.name}: K must be a positive integer")
        if self.kind.online:
            self.online_config()

    def online_config(self) -> OnlineConfig:
        return OnlineConfig(
            n_init=self.n_init,
            eta_percent=self.eta,
            tau=self.tau,
            budget=self.K,
            metric_cfg=self.metric,
            adaptive=self.kind is not MethodKind.ONLINE_BUDGET_ONLY,
            strict=self.strict,
        )

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["kind"] = self.kind.value
        d["measure"] = self.measure.value
        d["metric"] = asdict(self.metric)
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any], metric: MetricConfig) -> "MethodSpec":
        d = dict(d)
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown method keys: {sorted(unknown)}")
        try:
            kind = MethodKind(d.get("kind"))
        except ValueError:
            raise ConfigError(f"unknown method kind {d.get('kind')!r}") from None
        if "metric" in d:
            d["metric"] = _metric(d["metric"], base=metric)
        else:
            d["metric"] = metric
        d.setdefault("name", kind.value)
        try:
            return cls(**d)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"method {d.get('name')!r}: {e}") from None


def _metric(d: Mapping[str, Any] | None, base: MetricConfig | None = None) -> MetricConfig:
    d = dict(d or {})
    unknown = set(d) - {f.name for f in fields(MetricConfig)}
    if unknown:
        raise ConfigError(f"unknown metric keys: {sorted(unknown)}")
    return replace(base, **d) if base is not None else MetricConfig(**d)


@dataclass(frozen=True)
class ExperimentConfig:
    problem_set: str
    methods: tuple[MethodSpec, ...] = ()
    repeats: int = 64
    seed: int = 0
    output: str | None = None
    sweep: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "methods", tuple(self.methods))
        if not isinstance(self.repeats, int) or self.repeats < 1:
            raise ConfigError(f"repeats must be >= 1, got {self.repeats!r}")
        names = [m.name for m in self.methods]
        if len(set(names)) != len(names):
            raise ConfigError("method names must be unique")
        for key in self.sweep:
            if key not in SWEEP_KEYS:
                raise ConfigError(f"cannot sweep {key!r}; choose from {SWEEP_KEYS}")

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "ExperimentConfig":
        d = dict(d)
        allowed = {"problem_set", "methods", "repeats", "seed", "output", "metric", "sweep"}
        unknown = set(d) - allowed
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "problem_set" not in d:
            raise ConfigError("config needs problem_set")
        try:
            metric = _metric(d.pop("metric", None))
        except (TypeError, ValueError) as e:
            raise ConfigError(str(e)) from None
        methods = tuple(MethodSpec.from_dict(m, metric) for m in d.pop("methods", []) or [])
        return cls(methods=methods, **d)

    def to_dict(self) -> dict:
        return {
            "problem_set": str(self.problem_set),
            "methods": [m.to_dict() for m in self.methods],
            "repeats": self.repeats,
            "seed": self.seed,
            "sweep": {k: list(v) for k, v in self.sweep.items()},
        }

    def config_hash(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"), default=str)
        return hashlib.sha256(canon.encode()).hexdigest()[:16]


def load_config(path: str | os.PathLike) -> ExperimentConfig:
    try:
        doc = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as e:
        raise ConfigError(f"{path}: {e}") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: expected a mapping")
    base = Path(path).parent
    ps = doc.get("problem_set")
    if isinstance(ps, str) and not Path(ps).is_absolute():
        doc["problem_set"] = str(base / ps)
    return ExperimentConfig.from_dict(doc)


# ---------------------------------------------------------------------------
# report types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Cell:
    problem_id: str
    method: str
    kind: str
    K: int
    repeats: int
    accuracy: float
    stderr: float
    mean_tokens: float
    total_tokens: int
    grid: tuple[tuple[str, Any], ...] = ()


@dataclass(frozen=True)
class MethodSummary:
    method: str
    kind: str
    K: int
    problems: int
    accuracy: float
    mean_tokens: float
    total_tokens: int
    grid: tuple[tuple[str, Any], ...] = ()


@dataclass
class RunReport:
    cells: list[Cell]
    methods: list[MethodSummary]
    runs: list[dict]
    provenance: dict
    grid_keys: tuple[str, ...] = ()

    def cell(self, problem_id: str, method: str, **grid) -> Cell:
        want = tuple(sorted(grid.items()))
        for c in self.cells:
            if c.problem_id == problem_id and c.method == method and tuple(sorted(c.grid)) == want:
                return c
        raise KeyError((problem_id, method, grid))

    def summary(self, method: str, **grid) -> MethodSummary:
        want = tuple(sorted(grid.items()))
        for m in self.methods:
            if m.method == method and tuple(sorted(m.grid)) == want:
                return m
        raise KeyError((method, grid))

    def to_dict(self) -> dict:
        return {
            "provenance": self.provenance,
            "grid_keys": list(self.grid_keys),
            "cells": [_row(c) for c in self.cells],
            "methods": [_row(m) for m in self.methods],
            "runs": self.runs,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "RunReport":
        def unrow(klass, r):
            names = {f.name for f in fields(klass)}
            grid = tuple((k, r[k]) for k in d.get("grid_keys", []))
            return klass(grid=grid, **{k: v for k, v in r.items() if k in names})

        return cls(
            cells=[unrow(Cell, r) for r in d["cells"]],
            methods=[unrow(MethodSummary, r) for r in d["methods"]],
            runs=list(d.get("runs", [])),
            provenance=dict(d["provenance"]),
            grid_keys=tuple(d.get("grid_keys", [])),
        )


def _row(obj) -> dict:
    d = asdict(obj)
    grid = d.pop("grid")
    return {**{k: v for k, v in grid}, **d}


def load_report(path: str | os.PathLike) -> RunReport:
    return RunReport.from_dict(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def _trace_correct(pool: TracePool, t: Trace) -> bool:
    if pool.ground_truth is not None:
        return pool.is_correct(t.answer)
    if t.correct is None:
        if t.answer is None:
            return False
        raise ScoringError(f"problem {pool.problem_id!r}: trace {t.trace_id!r} has no correctness label")
    return t.correct


def _answer_correct(pool: TracePool, answer: str) -> bool:
    ok = pool.is_correct(answer)
    if ok is None:
        raise ScoringError(f"problem {pool.problem_id!r}: no ground truth or labels to score against")
    return ok


def _ws_hash(ids: Iterable[str]) -> str:
    return hashlib.sha1("\n".join(sorted(ids)).encode()).hexdigest()[:12]


class _Scores:
    """Per-pool cache of trace-level scores, keyed by (metric, measure)."""

    def __init__(self, pool: TracePool):
        self.pool = pool
        self._cache: dict = {}

    def get(self, metric: MetricConfig, measure: Measure) -> dict[str, float]:
        key = (metric, measure)
        if key not in self._cache:
            self._cache[key] = {
                t.trace_id: measure_value(t, metric, measure) for t in self.pool.traces if t.token_count
            }
        return self._cache[key]


def _evaluate_problem(pool: TracePool, methods: Sequence[MethodSpec], repeats: int, seed: int) -> list[dict]:
    for m in methods:
        if m.K > len(pool):
            raise BoundsError(f"method {m.name}: K={m.K} exceeds pool {pool.problem_id!r} of {len(pool)}")
    scores = _Scores(pool)
    pass1 = None
    if any(m.kind is MethodKind.PASS1 for m in methods):
        if not pool.traces:
            raise ScoringError(f"problem {pool.problem_id!r} has no traces")
        pass1 = (
            sum(_trace_correct(pool, t) for t in pool.traces) / len(pool),
            sum(t.token_count for t in pool.traces),
        )
    runs = []
    for r in range(repeats):
        rseed = derive_seed(seed, pool.problem_id, r)
        order = sample_order(len(pool), rseed)
        for m in methods:
            ws = [pool.traces[i] for i in order[: m.K]]
            row = {
                "problem_id": pool.problem_id,
                "repeat": r,
                "method": m.name,
                "kind": m.kind.value,
                "K": m.K,
                "working_set": _ws_hash(t.trace_id for t in ws),
            }
            if m.kind is MethodKind.PASS1:
                row.update(correct=pass1[0], tokens=pass1[1], traces=len(pool))
            elif m.kind is MethodKind.CONS:
                res = majority_vote([Ballot(t.answer, 1.0, t.trace_id) for t in ws])
                row.update(answer=res.winner, correct=float(_answer_correct(pool, res.winner)),
                           tokens=sum(t.token_count for t in ws), traces=len(ws))
            elif m.kind in (MethodKind.MEASURE, MethodKind.MEASURE_TOP_ETA):
                eta = 100.0 if m.kind is MethodKind.MEASURE else m.eta
                res = offline_deepconf(ws, m.metric, m.measure, eta, unit_weights=m.unit_weights,
                                       scores=scores.get(m.metric, m.measure))
                row.update(answer=res.winner, correct=float(_answer_correct(pool, res.winner)),
                           tokens=sum(t.token_count for t in ws), traces=len(ws),
                           kept=len(res.kept_trace_ids))
            else:
                out = run_online(pool.with_traces(ws), m.online_config(), rseed,
                                 scores=scores.get(m.metric, Measure.LOWEST_GROUP))
                rec = out.to_record()
                rec.pop("ledger")
                row.update(answer=out.final_answer, correct=float(_answer_correct(pool, out.final_answer)),
                           tokens=out.total_tokens, traces=out.traces_started, outcome=rec)
            runs.append(row)
    return runs


def _stderr(x: np.ndarray) -> float:
    if x.shape[0] < 2:
        return 0.0
    return float(x.std(ddof=1) / math.sqrt(x.shape[0]))


def _aggregate(runs: list[dict], methods: Sequence[MethodSpec], problem_ids: Sequence[str],
               repeats: int, grid: tuple = ()) -> tuple[list[Cell], list[MethodSummary]]:
    by_key: dict[tuple[str, str], list[dict]] = {}
    for row in runs:
        by_key.setdefault((row["problem_id"], row["method"]), []).append(row)
    cells, summaries = [], []
    for pid in problem_ids:
        for m in methods:
            rows = by_key[(pid, m.name)]
            acc = np.array([row["correct"] for row in rows], dtype=np.float64)
            total = sum(int(row["tokens"]) for row in rows)
            if m.kind is MethodKind.PASS1:
                mean_tokens = rows[0]["tokens"] / rows[0]["traces"]
            else:
                mean_tokens = total / len(rows)
            cells.append(Cell(pid, m.name, m.kind.value, m.K, repeats, float(acc.mean()),
                              _stderr(acc), mean_tokens, total, grid))
    for m in methods:
        mine = [c for c in cells if c.method == m.name]
        summaries.append(MethodSummary(
            m.name, m.kind.value, m.K, len(mine),
            float(np.mean([c.accuracy for c in mine])) if mine else 0.0,
            float(np.mean([c.mean_tokens for c in mine])) if mine else 0.0,
            sum(c.total_tokens for c in mine), grid,
        ))
    return cells, summaries


def _problem_set(cfg: ExperimentConfig, problem_set: ProblemSet | None) -> ProblemSet:
    return problem_set if problem_set is not None else load_problem_set(cfg.problem_set)


def _run_all(ps: ProblemSet, methods, repeats, seed, parallelism) -> list[dict]:
    if parallelism > 1 and len(ps.pools) > 1:
        with ProcessPoolExecutor(max_workers=parallelism) as ex:
            futs = [ex.submit(_evaluate_problem, p, methods, repeats, seed) for p in ps.pools]
            parts = [f.result() for f in futs]
    else:
        parts = [_evaluate_problem(p, methods, repeats, seed) for p in ps.pools]
    return [row for part in parts for row in part]


def _provenance(cfg: ExperimentConfig, ps: ProblemSet) -> dict:
    return {
        "config_hash": cfg.config_hash(),
        "seed": cfg.seed,
        "repeats": cfg.repeats,
        "problem_set": ps.name,
        "problems": len(ps.pools),
        "schema_version": SCHEMA_VERSION,
        "report_version": REPORT_VERSION,
    }


def run_experiment(
    cfg: ExperimentConfig, problem_set: ProblemSet | None = None, *, parallelism: int = 1
) -> RunReport:
    """Evaluate every configured method on every problem, ``cfg.repeats`` times."""
    ps = _problem_set(cfg, problem_set)
    runs = _run_all(ps, cfg.methods, cfg.repeats, cfg.seed, parallelism)
    pids = [p.problem_id for p in ps.pools]
    cells, summaries = _aggregate(runs, cfg.methods, pids, cfg.repeats)
    return RunReport(cells, summaries, runs, _provenance(cfg, ps))


def _apply_point(method: MethodSpec, point: Mapping[str, Any]) -> MethodSpec:
    kw: dict[str, Any] = {}
    for key, value in point.items():
        if key == "K":
            kw["K"] = int(value)
        elif key == "window_size":
            kw["metric"] = replace(kw.get("metric", method.metric), window_size=int(value))
        elif key == "measure" and method.kind in (MethodKind.MEASURE, MethodKind.MEASURE_TOP_ETA):
            kw["measure"] = Measure(value)
        elif key == "eta" and (method.kind is MethodKind.MEASURE_TOP_ETA or method.kind.online):
            kw["eta"] = float(value)
        elif key in ("tau", "n_init") and method.kind.online:
            kw[key] = value
    return replace(method, **kw)


def run_ablation(
    cfg: ExperimentConfig,
    sweep: Mapping[str, Sequence[Any]] | None = None,
    problem_set: ProblemSet | None = None,
    *,
    parallelism: int = 1,
) -> RunReport:
    """Cross-product sweep; every grid point reuses the same seeds (paired deltas)."""
    sweep = dict(sweep if sweep is not None else cfg.sweep)
    for key in sweep:
        if key not in SWEEP_KEYS:
            raise ConfigError(f"cannot sweep {key!r}; choose from {SWEEP_KEYS}")
    if not sweep:
        raise ConfigError("empty sweep")
    ps = _problem_set(cfg, problem_set)
    keys = tuple(sweep)
    pids = [p.problem_id for p in ps.pools]
    cells, summaries, runs = [], [], []
    for values in itertools.product(*(sweep[k] for k in keys)):
        point = dict(zip(keys, values))
        methods = [_apply_point(m, point) for m in cfg.methods]
        part = _run_all(ps, methods, cfg.repeats, cfg.seed, parallelism)
        grid = tuple(point.items())
        for row in part:
            row.update(point)
        c, s = _aggregate(part, methods, pids, cfg.repeats, grid)
        cells += c
        summaries += s
        runs += part
    prov = _provenance(replace(cfg, sweep={k: list(v) for k, v in sweep.items()}), ps)
    return RunReport(cells, summaries, runs, prov, keys)


# ---------------------------------------------------------------------------
# emission
# ---------------------------------------------------------------------------

CELL_COLUMNS = [f.name for f in fields(Cell) if f.name != "grid"]
METHOD_COLUMNS = [f.name for f in fields(MethodSummary) if f.name != "grid"]
CURVE_COLUMNS = ["method", "kind", "K", "accuracy", "mean_tokens"]


def _csv(columns: Sequence[str], rows: Iterable[Mapping[str, Any]]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(columns), extrasaction="ignore", lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow(r)
    return buf.getvalue()


def _fmt_acc(x: float) -> str:
    return f"{100 * x:.1f}"


def _markdown(report: RunReport) -> str:
    lines = ["# Results", ""]
    prov = report.provenance
    lines.append(
        f"config `{prov.get('config_hash')}` | seed {prov.get('seed')} | "
        f"repeats {prov.get('repeats')} | schema v{prov.get('schema_version')}"
    )
    lines.append("")
    lines.append("Accuracy (%) with mean tokens per problem in parentheses.")
    lines.append("")
    grids = list(dict.fromkeys(c.grid for c in report.cells)) or [()]
    methods = list(dict.fromkeys(m.method for m in report.methods))
    for grid in grids:
        if grid:
            lines.append("## " + ", ".join(f"{k}={v}" for k, v in grid))
            lines.append("")
        lines.append("| problem | " + " | ".join(methods) + " |")
        lines.append("|---" * (len(methods) + 1) + "|")
        cells = [c for c in report.cells if c.grid == grid]
        pids = list(dict.fromkeys(c.problem_id for c in cells))
        for pid in pids:
            vals = []
            for name in methods:
                c = next(c for c in cells if c.problem_id == pid and c.method == name)
                vals.append(f"{_fmt_acc(c.accuracy)} ({c.mean_tokens:.0f})")
            lines.append(f"| {pid} | " + " | ".join(vals) + " |")
        avg = []
        for name in methods:
            s = next((m for m in report.methods if m.method == name and m.grid == grid), None)
            avg.append("" if s is None else f"**{_fmt_acc(s.accuracy)}** ({s.mean_tokens:.0f})")
        if methods:
            lines.append("| **avg** | " + " | ".join(avg) + " |")
        lines.append("")
    return "\n".join(lines)


def emit_report(report: RunReport, fmt: str, out_dir: str | os.PathLike) -> list[Path]:
    """Write ``report`` as ``csv``, ``json`` or ``markdown`` under ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    gk = list(report.grid_keys)
    written: list[Path] = []

    def put(name: str, text: str):
        p = out / name
        p.write_text(text, encoding="utf-8")
        written.append(p)

    if fmt == "csv":
        put("cells.csv", _csv(gk + CELL_COLUMNS, (_row(c) for c in report.cells)))
        put("methods.csv", _csv(gk + METHOD_COLUMNS, (_row(m) for m in report.methods)))
        put("curve.csv", _csv(gk + CURVE_COLUMNS, (_row(m) for m in report.methods)))
    elif fmt == "json":
        put("report.json", json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
        outcomes = [
            {"problem_id": r["problem_id"], "repeat": r["repeat"], "method": r["method"],
             **{k: r[k] for k in gk if k in r}, **r["outcome"]}
            for r in report.runs if "outcome" in r
        ]
        put("outcomes.jsonl", "".join(json.dumps(o, sort_keys=True) + "\n" for o in outcomes))
    elif fmt == "markdown":
        put("report.md", _markdown(report) + "\n")
    else:
        raise ConfigError(f"unknown report format {fmt!r}")
    return written

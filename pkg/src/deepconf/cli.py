"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 data validation error,
4 scoring error.
"""

from __future__ import annotations

import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import click
import yaml

from .client import ChatClient, GenRequest, Problem, build_messages, build_pool, load_presets
from .errors import ConfigError, DeepConfError, ParseError
from .harness import (
    ExperimentConfig,
    emit_report,
    load_config,
    load_report,
    run_ablation,
    run_experiment,
)
from .synth import SynthRecipe, SynthSuite, synth_problem_set
from .trace import AnswerNormalizer, Trace, TracePool, extract_boxed, from_log_base, save_pool

FORMATS = ("csv", "json", "markdown")


class _Group(click.Group):
    def invoke(self, ctx):
        try:
            return super().invoke(ctx)
        except DeepConfError as e:
            click.echo(f"error: {e}", err=True)
            sys.exit(e.exit_code)


def _load(ctx) -> ExperimentConfig:
    obj = ctx.obj
    if not obj["config"]:
        raise ConfigError("--config is required")
    cfg = load_config(obj["config"])
    kw = {}
    if obj["seed"] is not None:
        kw["seed"] = obj["seed"]
    if obj["repeats"] is not None:
        kw["repeats"] = obj["repeats"]
    return replace(cfg, **kw) if kw else cfg


def _out(ctx, cfg: ExperimentConfig | None = None) -> Path:
    out = ctx.obj["out"] or (cfg.output if cfg else None)
    if not out:
        raise ConfigError("--out is required")
    return Path(out)


def _emit(report, out: Path):
    for fmt in FORMATS:
        for p in emit_report(report, fmt, out):
            click.echo(str(p))


@click.group(cls=_Group)
@click.option("--config", type=click.Path(dir_okay=False), help="Experiment config (YAML).")
@click.option("--seed", type=int, help="Override the base seed.")
@click.option("--repeats", type=int, help="Override the number of repeats.")
@click.option("--out", type=click.Path(), help="Output file or directory.")
@click.option("--parallelism", type=int, default=1, show_default=True)
@click.option("-v", "--verbose", is_flag=True)
@click.pass_context
def main(ctx, config, seed, repeats, out, parallelism, verbose):
    """Confidence-filtered voting and early-stopped sampling over reasoning traces."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(levelname)s %(message)s")
    ctx.obj = dict(config=config, seed=seed, repeats=repeats, out=out, parallelism=parallelism)


@main.command("synth-pool")
@click.option("--problems", type=int, default=8, show_default=True)
@click.option("--traces", type=int, default=1024, show_default=True)
@click.option("--min-rate", type=float, default=0.3, show_default=True)
@click.option("--max-rate", type=float, default=0.7, show_default=True)
@click.option("--recipe", type=click.Path(exists=True, dir_okay=False), help="YAML overrides for the recipe.")
@click.pass_context
def synth_pool_cmd(ctx, problems, traces, min_rate, max_rate, recipe):
    """Write synthetic pools (one JSONL per problem) into --out."""
    out = _out(ctx)
    overrides = yaml.safe_load(Path(recipe).read_text()) if recipe else {}
    try:
        r = SynthRecipe(**{**(overrides or {}), "n_traces": traces})
    except TypeError as e:
        raise ConfigError(f"bad recipe: {e}") from None
    seed = ctx.obj["seed"] or 0
    ps = synth_problem_set(SynthSuite(problems, (min_rate, max_rate), r), seed)
    out.mkdir(parents=True, exist_ok=True)
    for pool in ps.pools:
        save_pool(pool, out / f"{pool.problem_id}.jsonl")
    (out / "problemset.yaml").write_text(yaml.safe_dump({"name": ps.name, "metadata": ps.metadata}, sort_keys=True))
    click.echo(f"wrote {len(ps.pools)} pools to {out}")


@main.command()
@click.argument("source", type=click.Path(exists=True, dir_okay=False))
@click.option("--problem-id", required=True)
@click.option("--ground-truth")
@click.option("--log-base", type=click.Choice(["e", "2", "10"]), default="e", show_default=True)
@click.option("--case-insensitive", is_flag=True)
@click.pass_context
def ingest(ctx, source, problem_id, ground_truth, log_base, case_insensitive):
    """Convert raw trace records into a validated pool file.

    Each input line is a JSON object with ``trace_id``, ``tokens`` (list of
    candidate-logprob lists, sampled token first) and either ``answer`` or
    ``text`` (from which the last boxed answer is extracted).
    """
    out = _out(ctx)
    norm = AnswerNormalizer(case_sensitive=not case_insensitive)
    base = {"e": None, "2": 2.0, "10": 10.0}[log_base]
    gt = norm(ground_truth) if ground_truth is not None else None
    traces = []
    with open(source, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                tid = str(rec["trace_id"])
                toks = rec["tokens"]
            except (json.JSONDecodeError, KeyError, TypeError) as e:
                raise ParseError(source, lineno, str(e)) from None
            if base is not None:
                toks = [from_log_base(r, base).tolist() for r in toks]
            answer = rec.get("answer")
            if answer is None and rec.get("text") is not None:
                answer = extract_boxed(rec["text"])
            answer = norm(answer)
            correct = None if gt is None else (answer is not None and answer == gt)
            traces.append(Trace(tid, toks, answer=answer, correct=correct))
    pool = TracePool(problem_id, ground_truth, tuple(traces), norm)
    save_pool(pool, out)
    click.echo(f"wrote {len(pool)} traces to {out}")


@main.command("generate-pool")
@click.option("--problem-id", required=True)
@click.option("--prompt", "prompt_text", help="Problem statement.")
@click.option("--prompt-file", type=click.Path(exists=True, dir_okay=False))
@click.option("--ground-truth")
@click.option("--model", required=True)
@click.option("--preset", help="Decoding preset name (see presets/models.yaml).")
@click.option("--presets-file", type=click.Path(exists=True, dir_okay=False))
@click.option("--system-prompt")
@click.option("--no-instruction", is_flag=True, help="Do not append the boxed-answer instruction.")
@click.option("--count", type=int, required=True)
@click.option("--n", "per_request", type=int, default=8, show_default=True)
@click.option("--top-logprobs", type=int, default=20, show_default=True)
@click.option("--base-url", help="Endpoint; defaults to $DEEPCONF_API_BASE.")
@click.pass_context
def generate_pool(ctx, problem_id, prompt_text, prompt_file, ground_truth, model, preset, presets_file,
                  system_prompt, no_instruction, count, per_request, top_logprobs, base_url):
    """Sample traces from an OpenAI-compatible endpoint into a resumable pool."""
    out = _out(ctx)
    if prompt_file:
        prompt_text = Path(prompt_file).read_text()
    if not prompt_text:
        raise ConfigError("give --prompt or --prompt-file")
    msgs = build_messages(prompt_text, system_prompt, append_instruction=not no_instruction)
    kw = dict(n=per_request, logprob_candidates=top_logprobs)
    if preset:
        req = GenRequest.from_preset(preset, model, msgs, load_presets(presets_file), **kw)
    else:
        req = GenRequest(model=model, prompt_messages=msgs, **kw)
    with ChatClient(base_url) as client:
        pool = build_pool(Problem(problem_id, prompt_text, ground_truth, system_prompt), count, req, out,
                          client, parallelism=ctx.obj["parallelism"])
    click.echo(f"{out}: {len(pool)} traces")


def _subset(cfg: ExperimentConfig, online: bool) -> ExperimentConfig:
    methods = tuple(m for m in cfg.methods if m.kind.online == online)
    if not methods:
        which = "online" if online else "offline"
        raise ConfigError(f"config has no {which} methods")
    return replace(cfg, methods=methods)


@main.command()
@click.pass_context
def offline(ctx):
    """Run the offline methods of --config and write reports to --out."""
    cfg = _subset(_load(ctx), online=False)
    report = run_experiment(cfg, parallelism=ctx.obj["parallelism"])
    _emit(report, _out(ctx, cfg))


@main.command()
@click.option("--strict", is_flag=True, help="Fail instead of falling back to an unfiltered vote.")
@click.pass_context
def online(ctx, strict):
    """Run the online methods of --config and write reports to --out."""
    cfg = _subset(_load(ctx), online=True)
    if strict:
        cfg = replace(cfg, methods=tuple(replace(m, strict=True) for m in cfg.methods))
    report = run_experiment(cfg, parallelism=ctx.obj["parallelism"])
    _emit(report, _out(ctx, cfg))


def _parse_grid(items) -> dict:
    grid = {}
    for item in items:
        if "=" not in item:
            raise ConfigError(f"--grid expects key=v1,v2,..., got {item!r}")
        key, vals = item.split("=", 1)
        grid[key] = [yaml.safe_load(v) for v in vals.split(",")]
    return grid


@main.command()
@click.option("--grid", multiple=True, help="key=v1,v2 (repeatable); overrides the config's sweep.")
@click.pass_context
def ablate(ctx, grid):
    """Sweep parameters of --config with paired seeds."""
    cfg = _load(ctx)
    sweep = _parse_grid(grid) if grid else cfg.sweep
    report = run_ablation(cfg, sweep, parallelism=ctx.obj["parallelism"])
    _emit(report, _out(ctx, cfg))


@main.command()
@click.argument("report_json", type=click.Path(exists=True, dir_okay=False))
@click.option("--format", "fmt", type=click.Choice(FORMATS + ("all",)), default="all", show_default=True)
@click.pass_context
def report(ctx, report_json, fmt):
    """Re-emit a saved report.json in other formats."""
    rep = load_report(report_json)
    out = _out(ctx)
    for f in FORMATS if fmt == "all" else (fmt,):
        for p in emit_report(rep, f, out):
            click.echo(str(p))


if __name__ == "__main__":
    main()

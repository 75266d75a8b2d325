"""Command-line entry point: ``asymprune <subcommand> --config cfg.json``."""

from __future__ import annotations

import functools
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import click
import torch

from ..errors import ConfigError, InfeasibleError, InputError, StateError
from ..model import init_model
from . import experiments as ex
from .report import emit_report, load_report, render_report, summarize, write_events

OUT_DIR_ENV = "ASYMPRUNE_OUT_DIR"
EXIT_CODES = {ConfigError: 2, InputError: 3, InfeasibleError: 4, StateError: 5, OSError: 6}


def _fail(exc: Exception) -> None:
    code = next((c for t, c in EXIT_CODES.items() if isinstance(exc, t)), 1)
    click.echo(json.dumps({"error": type(exc).__name__, "message": str(exc), "exit_code": code}), err=True)
    sys.exit(code)


def guarded(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except (ConfigError, InputError, InfeasibleError, StateError, OSError) as exc:
            _fail(exc)

    return wrapper


def common(fn):
    fn = click.option("--jobs", type=int, default=None, help="Worker threads (results are order-preserving).")(fn)
    fn = click.option("--format", "fmt", type=click.Choice(["json", "csv"]), default="json", show_default=True)(fn)
    fn = click.option("--out", type=click.Path(file_okay=False), default=None,
                      help=f"Output directory (default: ${OUT_DIR_ENV} or ./asymprune-out).")(fn)
    fn = click.option("--seed", type=int, default=None, help="Override the config seed.")(fn)
    fn = click.option("--scorer", "scorer_path", type=click.Path(), default=None,
                      help="Use a saved scorer instead of the config's scorer source.")(fn)
    fn = click.option("--config", "config_path", type=click.Path(), default=None,
                      help="Experiment config (JSON). Defaults are used when omitted.")(fn)
    return fn


def _setup(config_path, seed, scorer_path, jobs) -> ex.ExperimentConfig:
    cfg = ex.ExperimentConfig.load(config_path) if config_path else ex.ExperimentConfig()
    if seed is not None:
        cfg = cfg.with_seed(seed)
    if scorer_path is not None:
        cfg = replace(cfg, scorer_source="file", scorer_path=scorer_path)
    if jobs is not None:
        cfg = replace(cfg, jobs=jobs)
    if cfg.jobs == 1:
        torch.set_num_threads(1)
    torch.manual_seed(cfg.seed)
    return cfg


def _out_dir(out) -> Path:
    return Path(out or os.environ.get(OUT_DIR_ENV) or "asymprune-out")


def _metadata(cfg: ex.ExperimentConfig, command: str) -> dict:
    return {"command": command, "config": cfg.to_dict()}


def _write_json(path: Path, doc) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Log progress to stderr.")
def main(verbose: bool) -> None:
    """Vision-token pruning and KV-eviction experiments on a toy decoder."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


@main.command("train-scorer")
@common
@guarded
def train_scorer_cmd(config_path, seed, scorer_path, out, fmt, jobs):
    """Fit the importance scorer on the training corpus and save it."""
    cfg = _setup(config_path, seed, None, jobs)
    model = init_model(cfg.model)
    state = ex.fit_scorer(cfg, model)
    path = _out_dir(out) / "scorer.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    state.save(path)
    click.echo(json.dumps({"scorer": str(path), "final_loss": state.loss_log[-1],
                           "corpus_fingerprint": state.corpus_fingerprint}, sort_keys=True))


@main.command()
@common
@guarded
def calibrate(config_path, seed, scorer_path, out, fmt, jobs):
    """Calibrate both gap-adaptive budget policies on the calibration corpus."""
    cfg = _setup(config_path, seed, scorer_path, jobs)
    model = init_model(cfg.model)
    w = ex.scorer_weights(cfg, model)
    outcome = ex.run_calibration(cfg, model, w, cfg.corpus(model, "calibration"))
    d = _out_dir(out)
    _write_json(d / "policy_threshold.json", {"policy": outcome.threshold.to_dict()})
    _write_json(d / "policy_linear.json", {"policy": outcome.linear.to_dict()})
    _write_json(d / "calibration.json", outcome.to_dict())
    click.echo(json.dumps({k: v for k, v in outcome.to_dict().items() if not k.endswith("_log")}, sort_keys=True))


@main.command("eval-prune")
@common
@guarded
def eval_prune(config_path, seed, scorer_path, out, fmt, jobs):
    """Prune every eval sample per method and keep ratio and report the damage."""
    cfg = _setup(config_path, seed, scorer_path, jobs)
    records = ex.run_pruning_eval(cfg)
    path = emit_report(records, _out_dir(out) / f"prune.{fmt}", fmt, _metadata(cfg, "eval-prune"))
    click.echo(str(path))


@main.command("eval-evict")
@common
@guarded
def eval_evict(config_path, seed, scorer_path, out, fmt, jobs):
    """Greedy decoding under each eviction policy and retention level."""
    cfg = _setup(config_path, seed, scorer_path, jobs)
    records, events = ex.run_eviction_eval(cfg)
    d = _out_dir(out)
    path = emit_report(records, d / f"evict.{fmt}", fmt, _metadata(cfg, "eval-evict"))
    write_events(events, d / "evict_events.jsonl")
    click.echo(str(path))


@main.command("gap-stats")
@common
@click.option("--corpus", "which", type=click.Choice(["train", "eval", "calibration"]), default="eval", show_default=True)
@click.option("--cosine", is_flag=True, help="Score with plain cosine similarity instead of the scorer.")
@guarded
def gap_stats_cmd(config_path, seed, scorer_path, out, fmt, jobs, which, cosine):
    """Importance-gap summary and histogram of a corpus."""
    cfg = _setup(config_path, seed, scorer_path, jobs)
    if cosine:
        cfg = replace(cfg, scorer_source="cosine")
    model = init_model(cfg.model)
    stats = ex.gap_stats(model, cfg.corpus(model, which), ex.scorer_weights(cfg, model))
    stats["corpus"] = which
    path = _write_json(_out_dir(out) / f"gap_stats_{which}.json", stats)
    click.echo(str(path))


@main.command()
@click.argument("report_path", type=click.Path())
@click.option("--format", "fmt", type=click.Choice(["json", "csv"]), default=None, help="Convert to this format.")
@click.option("--out", type=click.Path(dir_okay=False), default=None, help="Converted report path.")
@click.option("--summary", is_flag=True, help="Print per-group means instead of converting.")
@guarded
def report(report_path, fmt, out, summary):
    """Summarize a report or convert it between JSON and CSV."""
    if not Path(report_path).exists():
        raise InputError(f"report not found: {report_path}")
    try:
        records, metadata = load_report(report_path)
    except (ValueError, KeyError, TypeError) as exc:
        raise InputError(f"malformed report {report_path}: {exc}") from exc
    if summary or fmt is None:
        click.echo(json.dumps(summarize(records), indent=2, sort_keys=True))
        return
    if out:
        click.echo(str(emit_report(records, out, fmt, metadata)))
    else:
        click.echo(render_report(records, fmt, metadata), nl=False)


if __name__ == "__main__":
    main()

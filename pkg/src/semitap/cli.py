"""Experiment harness CLI.

Subcommands: gen-data, train, eval, sweep. All configuration comes from a
JSON file merged over full defaults; every flag default is echoed into the
run manifest so any run can be reproduced from its manifest alone.

Exit codes: 0 success, 2 usage/config error, 3 validation error,
4 training divergence.
"""

from __future__ import annotations

import functools
import os
import sys

import click

from . import experiment
from .errors import ConfigError, DivergenceError, ValidationError


def _exit_codes(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except ConfigError as exc:
            click.echo(f"config error: {exc}", err=True)
            sys.exit(2)
        except ValidationError as exc:
            click.echo(f"validation error: {exc}", err=True)
            sys.exit(3)
        except DivergenceError as exc:
            click.echo(f"training diverged: {exc}", err=True)
            sys.exit(4)
    return wrapper


@click.group()
def main():
    """Semi-supervised temporal action proposal experiments."""


@main.command("gen-data")
@click.option("--config", "config_path", type=click.Path(), default=None,
              help="JSON config file (defaults applied for missing keys).")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.option("--force", is_flag=True, help="Overwrite a non-empty output directory.")
@_exit_codes
def gen_data(config_path, seed, out_dir, force):
    """Generate a synthetic dataset directory."""
    config = experiment.load_config(config_path)
    ds_hash = experiment.gen_data_command(config, seed, out_dir, force=force)
    click.echo(f"dataset written to {out_dir} (hash {ds_hash[:16]})")


@main.command("train")
@click.option("--config", "config_path", type=click.Path(), default=None)
@click.option("--seed", type=int, default=None, help="Overrides the manifest/config seed.")
@click.option("--mode", type=click.Choice(["supervised", "semi"]), default=None)
@click.option("--data", "dataset_path", type=click.Path(), default=None,
              help="Dataset directory; omitted = generate from config.")
@click.option("--fraction", type=float, default=None, help="Labeled fraction override.")
@click.option("--resume", type=click.Path(), default=None,
              help="checkpoint.bin to continue training from.")
@click.option("--out", "out_dir", type=click.Path(), required=True)
@_exit_codes
def train_cmd(config_path, seed, mode, dataset_path, fraction, resume, out_dir):
    """Train a proposal model (supervised baseline or semi-supervised)."""
    config, manifest = _load_with_manifest(config_path)
    seed = _pick(seed, manifest.get("seed"), 0)
    mode = _pick(mode, manifest.get("mode"), "semi")
    fraction = _pick(fraction, manifest.get("fraction"), None)
    dataset_path = _pick(dataset_path, manifest.get("dataset_path"), None)
    result = experiment.run_training(
        config, seed, mode, out_dir=out_dir, dataset_path=dataset_path,
        resume=resume, fraction=fraction,
    )
    last = result.history[-1] if result.history else {}
    click.echo(
        f"trained {result.state.step} steps (mode={mode}); "
        f"final sup_loss={last.get('sup_loss', float('nan')):.4f} "
        f"cons_loss={last.get('cons_loss', float('nan')):.4f}"
    )


@main.command("eval")
@click.option("--ckpt", "ckpt_path", type=click.Path(), required=True)
@click.option("--config", "config_path", type=click.Path(), default=None)
@click.option("--seed", type=int, default=None)
@click.option("--data", "dataset_path", type=click.Path(), default=None,
              help="Held-out dataset directory; omitted = generate from config.")
@click.option("--model", type=click.Choice(["teacher", "student"]), default="teacher",
              show_default=True)
@click.option("--out", "out_dir", type=click.Path(), required=True)
@_exit_codes
def eval_cmd(ckpt_path, config_path, seed, dataset_path, model, out_dir):
    """Generate proposals with a checkpoint and write the metric report."""
    config, manifest = _load_with_manifest(config_path)
    seed = _pick(seed, manifest.get("seed"), 0)
    state = experiment.load_checkpoint(ckpt_path)
    report = experiment.run_eval(
        state, config, seed, model=model, out_dir=out_dir, dataset_path=dataset_path,
    )
    click.echo(f"auc={report.auc:.4f} ar@100={report.ar_at_an.get(100, 0.0):.4f}")


@main.command("sweep")
@click.option("--config", "config_path", type=click.Path(), default=None)
@click.option("--out", "out_dir", type=click.Path(), required=True)
@_exit_codes
def sweep_cmd(config_path, out_dir):
    """Run a label-fraction or ablation sweep and aggregate metrics."""
    config = experiment.load_config(config_path)
    rows = experiment.run_sweep(config, out_dir=out_dir)
    for row in rows:
        click.echo(
            f"{row['axis']}={row['value']} mode={row['mode']}: "
            f"auc={row['auc_mean']:.4f}+-{row['auc_std']:.4f}"
        )


def _load_with_manifest(config_path):
    """Load config; if the file is a run manifest, surface its run settings."""
    manifest = {}
    if config_path is not None and os.path.isfile(config_path):
        import json

        with open(config_path, encoding="utf-8") as f:
            try:
                raw = json.load(f)
            except json.JSONDecodeError:
                raw = {}
        if isinstance(raw, dict) and "config" in raw:
            manifest = raw
    return experiment.load_config(config_path), manifest


def _pick(*values):
    for v in values:
        if v is not None:
            return v
    return None

"""
Command-line entry point for the distillation lab.

  python src/cli.py train-teacher --config configs/default.json
  python src/cli.py distill --config configs/default.json --seed 7
  python src/cli.py eval --checkpoint data/experiments/student.json --config configs/default.json
  python src/cli.py analyze --checkpoint data/experiments/student.json --config configs/default.json
  python src/cli.py sweep --config configs/default.json --seeds 0,1,2,3,4 --modes ce,kd,cckd

Every ExperimentConfig field can be overridden with `--field-name value`.
"""

from __future__ import annotations

import functools
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor

import click
import numpy as np
import pandas as pd

from analysis import cosine_similarity_matrix, export_curves, export_heatmap, intra_inter_stats
from errors import ConfigurationError, LabError
from harness import (
    ExperimentConfig,
    MetricsRecord,
    distill_student,
    evaluate,
    load_config,
    load_datasets,
    make_config,
    train_teacher,
)
from nn_core import load_checkpoint, mlp_forward
from utils import write_csv, write_json

logger = logging.getLogger(__name__)

PASS_THROUGH = {"ignore_unknown_options": True, "allow_extra_args": True}


def parse_overrides(args: list[str]) -> dict:
    """Turn ['--beta', '0.01', '--loss-mode', 'kd'] into {'beta': '0.01', 'loss-mode': 'kd'}."""
    overrides = {}
    it = iter(args)
    for token in it:
        if not token.startswith("--"):
            raise ConfigurationError(f"Unexpected argument '{token}'; overrides look like --key value")
        key = token[2:]
        if "=" in key:
            key, value = key.split("=", 1)
        else:
            value = next(it, None)
            if value is None:
                raise ConfigurationError(f"Override --{key} is missing a value")
        overrides[key] = value
    return overrides


def resolve_config(config_path: str | None, seed: int | None, extra: list[str]) -> ExperimentConfig:
    overrides = parse_overrides(extra)
    if seed is not None:
        overrides["seed"] = seed
    return load_config(config_path, overrides)


def reports_errors(f):
    """Report lab errors as a one-line diagnostic with a nonzero exit code."""

    @functools.wraps(f)
    def wrapper(*args, **kwargs):
        try:
            return f(*args, **kwargs)
        except LabError as e:
            raise click.ClickException(str(e)) from e

    return wrapper


def obtain_teacher(cfg: ExperimentConfig, train, test, teacher_path: str | None, output_dir: str):
    if teacher_path:
        logger.info(f"Loading teacher from {teacher_path}")
        return load_checkpoint(teacher_path)
    teacher, _ = train_teacher(cfg, train, test, output_dir)
    return teacher


def run_experiment(cfg: ExperimentConfig, output_dir: str, teacher_path: str | None = None) -> MetricsRecord:
    write_json(cfg.to_dict(), os.path.join(output_dir, "config.json"), indent=2, sort_keys=True)
    train, test = load_datasets(cfg)
    teacher = obtain_teacher(cfg, train, test, teacher_path, output_dir)
    _, record = distill_student(cfg, teacher, train, test, output_dir)
    return record


config_option = click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None)
seed_option = click.option("--seed", type=int, default=None)


@click.group()
@click.option("--quiet", is_flag=True, help="Only log warnings and errors")
def cli(quiet):
    logging.basicConfig(level=logging.WARNING if quiet else logging.INFO, format="%(levelname)s %(name)s: %(message)s")


@cli.command("train-teacher", context_settings=PASS_THROUGH)
@config_option
@seed_option
@click.pass_context
@reports_errors
def train_teacher_cmd(ctx, config_path, seed):
    """Train the teacher with cross-entropy and write its checkpoint and metrics."""
    cfg = resolve_config(config_path, seed, ctx.args)
    train, test = load_datasets(cfg)
    _, record = train_teacher(cfg, train, test, cfg.output_dir)
    click.echo(json.dumps(record.final))


@cli.command("distill", context_settings=PASS_THROUGH)
@config_option
@seed_option
@click.option("--teacher", "teacher_path", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Teacher checkpoint; trained from the config when omitted")
@click.pass_context
@reports_errors
def distill_cmd(ctx, config_path, seed, teacher_path):
    """Distill a student from the teacher under the configured loss mode."""
    cfg = resolve_config(config_path, seed, ctx.args)
    record = run_experiment(cfg, cfg.output_dir, teacher_path)
    click.echo(json.dumps(record.final))


@cli.command("eval", context_settings=PASS_THROUGH)
@config_option
@seed_option
@click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--split", type=click.Choice(["train", "test"]), default="test")
@click.pass_context
@reports_errors
def eval_cmd(ctx, config_path, seed, checkpoint, split):
    """Report top-1 (and top-5) accuracy of a checkpoint."""
    cfg = resolve_config(config_path, seed, ctx.args)
    train, test = load_datasets(cfg)
    accuracy = evaluate(load_checkpoint(checkpoint), test if split == "test" else train)
    click.echo(json.dumps({"top1": accuracy.top1, "top5": accuracy.top5}))


@cli.command("analyze", context_settings=PASS_THROUGH)
@config_option
@seed_option
@click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--classes", default="0,1", help="Comma-separated classes to include in the heatmap")
@click.option("--per-class", "per_class", type=int, default=20, help="First m test examples per chosen class")
@click.option("--output-dir", "analysis_dir", default=None, help="Defaults to <output_dir>/analysis")
@click.pass_context
@reports_errors
def analyze_cmd(ctx, config_path, seed, checkpoint, classes, per_class, analysis_dir):
    """Write cosine-similarity statistics (JSON) and a heatmap (CSV) for a checkpoint."""
    cfg = resolve_config(config_path, seed, ctx.args)
    analysis_dir = analysis_dir or os.path.join(cfg.output_dir, "analysis")
    _, test = load_datasets(cfg)
    model = load_checkpoint(checkpoint)
    embeddings = mlp_forward(model, test.features).embeddings

    stats = intra_inter_stats(embeddings, test.labels)
    write_json(stats.as_dict(), os.path.join(analysis_dir, "similarity_stats.json"), indent=2)

    chosen = [int(c) for c in classes.split(",") if c.strip()]
    selected = np.concatenate([np.flatnonzero(test.labels == c)[:per_class] for c in chosen])
    if selected.size == 0:
        raise click.ClickException(f"No test examples for classes {chosen}")
    S = cosine_similarity_matrix(embeddings[selected])
    export_heatmap(S, test.labels[selected], os.path.join(analysis_dir, "heatmap.csv"), example_ids=selected)
    click.echo(json.dumps({"mean_intra": stats.mean_intra, "mean_inter": stats.mean_inter}))


def _train_shared_teacher(job: tuple[dict, str]) -> str:
    cfg_dict, teacher_dir = job
    cfg = make_config(cfg_dict)
    train, test = load_datasets(cfg)
    train_teacher(cfg, train, test, teacher_dir)
    return os.path.join(teacher_dir, "teacher.json")


def _sweep_run(job: tuple[dict, str, str, str]) -> MetricsRecord:
    cfg_dict, output_dir, run_id, teacher_path = job
    cfg = make_config(cfg_dict)
    record = run_experiment(cfg, output_dir, teacher_path)
    record.run_id = run_id
    return record


def _run_all(fn, jobs: list, workers: int) -> list:
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, jobs))
    return [fn(job) for job in jobs]


def parse_axis(axis: str | None) -> tuple[str | None, list[str]]:
    if not axis:
        return None, [None]
    if "=" not in axis:
        raise ConfigurationError(f"--axis must look like name=v1,v2,... got '{axis}'")
    name, values = axis.split("=", 1)
    return name.replace("-", "_"), [v for v in values.split(",") if v.strip()]


@cli.command("sweep", context_settings=PASS_THROUGH)
@config_option
@click.option("--seeds", default="0,1,2,3,4", help="Comma-separated seeds")
@click.option("--modes", default="ce,kd,cckd", help="Comma-separated loss modes")
@click.option("--axis", default=None, help="Optional ablation axis, e.g. order=1,2,3 or samples_per_class=1,2,4,8,20")
@click.option("--workers", type=int, default=1, help="Parallel worker processes")
@click.pass_context
@reports_errors
def sweep_cmd(ctx, config_path, seeds, modes, axis, workers):
    """Run seeds x loss modes (x one ablation axis) and write curves.csv and summary.csv."""
    base = parse_overrides(ctx.args)
    axis_name, axis_values = parse_axis(axis)
    root = load_config(config_path, base).output_dir

    # one teacher per distinct teacher configuration, keyed by its settings
    teachers: dict[str, tuple[dict, str]] = {}
    jobs = []
    for value in axis_values:
        for mode in [m for m in modes.split(",") if m.strip()]:
            for seed in [int(s) for s in seeds.split(",") if s.strip()]:
                overrides = {**base, "loss_mode": mode, "seed": seed}
                tag = f"{mode}-seed{seed}"
                if axis_name:
                    overrides[axis_name] = value
                    tag = f"{axis_name}={value}-{tag}"
                run_dir = os.path.join(root, "sweep", tag)
                cfg = load_config(config_path, {**overrides, "output_dir": run_dir})
                key = json.dumps(cfg.teacher_settings(), sort_keys=True)
                if key not in teachers:
                    teacher_dir = os.path.join(root, "sweep", "teachers", f"{len(teachers):02d}-seed{seed}")
                    teachers[key] = (cfg.to_dict(), teacher_dir)
                teacher_path = os.path.join(teachers[key][1], "teacher.json")
                jobs.append((cfg.to_dict(), run_dir, tag, teacher_path))

    logger.info(f"Training {len(teachers)} teacher(s) for {len(jobs)} experiments with {workers} worker(s)")
    _run_all(_train_shared_teacher, list(teachers.values()), workers)
    records = _run_all(_sweep_run, jobs, workers)

    export_curves(records, os.path.join(root, "sweep", "curves.csv"))

    rows = []
    for (cfg_dict, _, tag, _), record in zip(jobs, records):
        row = {"run_id": tag, "loss_mode": cfg_dict["loss_mode"], "seed": cfg_dict["seed"], **record.final}
        if axis_name:
            row[axis_name] = cfg_dict[axis_name]
        rows.append(row)
    runs = pd.DataFrame(rows)
    write_csv(runs, os.path.join(root, "sweep", "runs.csv"))

    group_cols = ([axis_name] if axis_name else []) + ["loss_mode"]
    summary = runs.drop(columns=["run_id", "seed"]).groupby(group_cols, as_index=False).mean(numeric_only=True)
    write_csv(summary, os.path.join(root, "sweep", "summary.csv"))
    click.echo(summary.to_string(index=False))


if __name__ == "__main__":
    cli()

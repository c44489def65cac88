"""Command line entry point: ``klacmes run | ecdf | summarize``."""

from __future__ import annotations

import csv
import json
import logging
import sys
from pathlib import Path

import click
import yaml

from .benchmarks import FUNCTIONS, BenchmarkSpec
from .harness import (
    ALGORITHMS,
    DEFAULT_ECDF_TARGETS,
    ExperimentConfig,
    ecdf,
    emit_reports,
    load_records,
    run_experiment,
)


def _load_config(path: Path) -> dict:
    text = path.read_text()
    data = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    if not isinstance(data, dict):
        raise click.UsageError(f"{path}: expected a mapping of configuration keys")
    return data


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Log progress to stderr.")
def main(verbose):
    """Surrogate-assisted CMA-ES experiments."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False, path_type=Path),
              help="YAML or JSON file with ExperimentConfig keys; flags given explicitly override it.")
@click.option("--algo", multiple=True, type=click.Choice(ALGORITHMS), help="Algorithm (repeatable).")
@click.option("--func", multiple=True, type=click.Choice(FUNCTIONS), help="Benchmark (repeatable).")
@click.option("--dim", multiple=True, type=int, help="Dimension (repeatable).")
@click.option("--runs", type=int, help="Runs per cell.")
@click.option("--budget", type=int, help="True evaluations per run.")
@click.option("--target", type=float, help="Target precision of the untransformed function.")
@click.option("--seed", type=int, help="Seed base.")
@click.option("--out", type=click.Path(file_okay=False, path_type=Path), help="Output directory.")
@click.option("--power", type=float, default=None, help="Power transform of the objective.")
@click.option("--rotate/--no-rotate", default=None, help="Apply a random rotation.")
@click.option("--workers", type=int, help="Cells run in parallel.")
def run(config_path, algo, func, dim, runs, budget, target, seed, out, power, rotate, workers):
    """Run an experiment grid and write records and reports."""
    data = _load_config(config_path) if config_path else {}
    if func or dim or power is not None or rotate is not None:
        if not func or not dim:
            raise click.UsageError("--func and --dim are both required to define benchmarks")
        data["specs"] = [
            {"function_id": f, "dim": d, "rotate": bool(rotate), "power": 1.0 if power is None else power}
            for f in func for d in dim
        ]
    overrides = {"algorithms": list(algo) or None, "runs": runs, "budget": budget,
                 "target": target, "seed_base": seed, "out_dir": str(out) if out else None,
                 "workers": workers}
    data.update({k: v for k, v in overrides.items() if v is not None})
    if not data.get("specs"):
        raise click.UsageError("no benchmarks given: use --config or --func/--dim")
    try:
        cfg = ExperimentConfig.from_dict(data)
        records = run_experiment(cfg)
        emit_reports(records, cfg.out_dir, cfg.target, cfg.targets_ecdf)
    except Exception as exc:  # any failed cell fails the command
        click.echo(f"error: {exc}", err=True)
        sys.exit(1)
    click.echo(f"wrote {len(records)} records to {cfg.out_dir}")


@main.command(name="ecdf")
@click.argument("results", type=click.Path(exists=True, path_type=Path))
@click.option("--dim", type=int, required=True)
@click.option("--target", "targets", multiple=True, type=float,
              help="Target precision (repeatable); default 1e2 down to 1e-8.")
@click.option("--algo", type=click.Choice(ALGORITHMS), default=None)
def ecdf_cmd(results, dim, targets, algo):
    """Print ECDF (evals/dim, proportion solved) for records in RESULTS."""
    records = [r for r in load_records(results) if r.dim == dim and (algo is None or r.algorithm == algo)]
    if not records:
        click.echo("error: no records match", err=True)
        sys.exit(1)
    writer = csv.writer(sys.stdout, lineterminator="\n")
    writer.writerow(["evals_per_dim", "proportion"])
    for b, p in ecdf(records, targets or DEFAULT_ECDF_TARGETS, dim):
        writer.writerow([repr(b), repr(p)])


@main.command()
@click.argument("results", type=click.Path(exists=True, file_okay=False, path_type=Path))
@click.option("--target", type=float, default=None,
              help="Target precision; default taken from the stored configuration.")
def summarize(results, target):
    """Recompute summary, speedup and ECDF files for a results directory."""
    config = results / "config.json"
    stored = json.loads(config.read_text()) if config.exists() else {}
    target = target if target is not None else stored.get("target", 1e-8)
    targets_ecdf = stored.get("targets_ecdf", list(DEFAULT_ECDF_TARGETS))
    try:
        records = load_records(results)
        paths = emit_reports(records, results, target, sorted(set(targets_ecdf) | {target}, reverse=True))
    except (OSError, ValueError, KeyError) as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(1)
    click.echo((results / "summary.csv").read_text(), nl=False)
    click.echo(f"wrote {len(paths)} files", err=True)


if __name__ == "__main__":
    main()

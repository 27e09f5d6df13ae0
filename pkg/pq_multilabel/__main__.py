# -*- coding: utf-8 -*-
"""Main entry point for the perceptual-quality multi-label pipeline.

Stages can be run one at a time or fused:
    score -> cluster -> pool -> train -> eval, or reproduce for all of them

Every command reads the TOML config (``--config``, default ``desk_config.toml``)
and accepts ``--<section>.<field> <toml value>`` overrides for every field.
"""
import logging
import sys
from pathlib import Path

import click

from .clustering import fit_label_model, write_kmeans_csv
from .config import (
    CONDITIONS,
    HEADS,
    ExperimentConfig,
    config_digest,
    default_config_path,
    leaf_fields,
    load_config,
)
from .data_io import load_checkpoint, write_csv
from .errors import PQError
from .harness import (
    evaluate_suite,
    load_datasets,
    output_meta,
    output_path,
    prepare,
    reproduce,
    train_cell,
    training_head,
    write_condition_outputs,
)
from .quality import read_scores_csv, score_corpus, write_scores_csv
from .shifts import build_suite

logger = logging.getLogger(__name__)

LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR")


def set_logging_level(level=logging.WARNING):
    """Set the logging level for the whole package.

    Args:
        level: logging level (logging.INFO, logging.WARNING, logging.ERROR)
    """
    package_logger = logging.getLogger("pq_multilabel")
    package_logger.setLevel(level)

    if not package_logger.handlers:
        handler = logging.StreamHandler()
        handler.setFormatter(logging.Formatter("%(levelname)s: %(message)s"))
        package_logger.addHandler(handler)


def _option_name(path: str) -> str:
    return path.replace(".", "__")


def config_options(command):
    """Attach ``--config``, ``--seed`` and one override flag per config field."""
    for path, _ in reversed(list(leaf_fields())):
        command = click.option(
            f"--{path}",
            _option_name(path),
            default=None,
            metavar="TOML",
            help=f"Override {path}.",
        )(command)
    command = click.option(
        "--seed", "seed", type=int, default=None, help="Run a single seed."
    )(command)
    command = click.option(
        "--config",
        "config_path",
        type=click.Path(dir_okay=False),
        default=None,
        help="TOML config file (default: the bundled desk config).",
    )(command)
    return command


def resolve_config(options: dict) -> ExperimentConfig:
    config_path = options.pop("config_path", None) or default_config_path()
    seed = options.pop("seed", None)
    overrides = {}
    for path, _ in leaf_fields():
        raw = options.pop(_option_name(path), None)
        if raw is not None:
            overrides[path] = raw
    if seed is not None:
        overrides["seeds"] = [seed]
    return load_config(config_path, overrides)


@click.group()
@click.option(
    "--log-level",
    type=click.Choice(LOG_LEVELS, case_sensitive=False),
    default="WARNING",
    show_default=True,
)
def main(log_level):
    """Perceptual-quality based multi-label training under distribution shift."""
    set_logging_level(getattr(logging, log_level.upper()))


@main.command()
@click.option("--output", type=click.Path(dir_okay=False), default=None)
@config_options
def score(output, **options):
    """Score the training set's perceptual quality and write scores.csv."""
    cfg = resolve_config(options)
    train_set, _ = load_datasets(cfg)
    table = score_corpus(train_set, cfg.quality.ridge, cfg.quality.n_jobs)
    path = Path(output) if output else output_path(cfg) / "scores.csv"
    write_scores_csv(path, table, output_meta(cfg))
    click.echo(f"[+] {len(table.ids)} scores written to {path}")


@main.command()
@click.option("--scores", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--output", type=click.Path(dir_okay=False), default=None)
@config_options
def cluster(scores, output, **options):
    """Fit the k-means label model and write kmeans.csv."""
    cfg = resolve_config(options)
    train_set, _ = load_datasets(cfg)
    features = None
    if cfg.clustering.feature_mode == "quality":
        if scores:
            table = read_scores_csv(scores)
        else:
            table = score_corpus(train_set, cfg.quality.ridge, cfg.quality.n_jobs)
        features = table.features
    model, _ = fit_label_model(
        train_set,
        cfg.clustering.feature_mode,
        cfg.clustering.seed,
        cfg.clustering.max_iter,
        cfg.clustering.tol,
        quality_features=features,
    )
    path = Path(output) if output else output_path(cfg) / "kmeans.csv"
    write_kmeans_csv(path, model, output_meta(cfg))
    click.echo(
        f"[+] {model.k} centroids (inertia {model.inertia:.6g}) written to {path}"
    )


@main.command()
@click.option("--condition", type=click.Choice(CONDITIONS), default="pq_multi")
@click.option("--scores", type=click.Path(exists=True, dir_okay=False), default=None)
@config_options
def pool(condition, scores, **options):
    """Build one training condition and write its pairs.csv and pool manifest."""
    cfg = resolve_config(options)
    table = read_scores_csv(scores) if scores else None
    prepared = prepare(cfg, quality=table, with_suites=False, conditions=[condition])
    out = output_path(cfg)
    mld = write_condition_outputs(prepared, condition, out)
    click.echo(
        f"[+] {condition}: {int(mld.num_labels.sum())} pairs, "
        f"{len(mld.pool_ids)} pooled samples in {out / 'conditions' / condition}"
    )


@main.command()
@click.option("--condition", type=click.Choice(CONDITIONS), default="pq_multi")
@click.option("--head", type=click.Choice(("vanilla", "duq")), default="vanilla")
@click.option("--scores", type=click.Path(exists=True, dir_okay=False), default=None)
@config_options
def train(condition, head, scores, **options):
    """Train one model per seed and write checkpoints and training logs."""
    cfg = resolve_config(options)
    table = read_scores_csv(scores) if scores else None
    prepared = prepare(cfg, quality=table, with_suites=False, conditions=[condition])
    out = output_path(cfg)
    write_condition_outputs(prepared, condition, out)
    for seed in cfg.seeds:
        model = train_cell(prepared, condition, head, seed, cfg.hyper, out)
        summary = "untrained"
        if model.history:
            final = model.history[-1]
            summary = f"loss {final.loss:.4f}, train acc {final.train_acc:.4f}"
        click.echo(f"[+] {condition}/{training_head(head)} seed {seed}: {summary}")


@main.command(name="eval")
@click.option(
    "--checkpoint", type=click.Path(exists=True, dir_okay=False), required=True
)
@click.option("--head", type=click.Choice(HEADS), default="vanilla")
@click.option("--output", type=click.Path(dir_okay=False), default=None)
@config_options
def evaluate(checkpoint, head, output, **options):
    """Evaluate a checkpoint on every configured shift suite."""
    cfg = resolve_config(options)
    model = load_checkpoint(Path(checkpoint).read_bytes())
    _, test_set = load_datasets(cfg)
    seed = cfg.seeds[0]
    rows = []
    for kind in cfg.suites:
        suite = build_suite(test_set, kind, cfg.shifts)
        acc, ent, breakdown = evaluate_suite(model, head, suite, cfg.mc_samples, seed)
        rows += [[kind, r.shift, r.parameter, r.entropy, r.accuracy] for r in breakdown]
        click.echo(f"{kind}: entropy {ent:.4f} bits, accuracy {acc:.4f}")
    default_name = f"eval_{Path(checkpoint).stem}_{head}.csv"
    path = Path(output) if output else output_path(cfg) / default_name
    write_csv(
        path,
        ["suite", "shift", "parameter", "entropy", "accuracy"],
        rows,
        {"config_digest": config_digest(cfg), "checkpoint": checkpoint, "seeds": seed},
    )


@main.command(name="reproduce")
@config_options
def reproduce_command(**options):
    """Run every condition x head cell and write the report directory."""
    cfg = resolve_config(options)
    report, _ = reproduce(cfg)
    for verdict in report.verdicts:
        click.echo(
            f"[{verdict.status}] criterion {verdict.criterion}: {verdict.detail}"
        )
    click.echo(f"[+] Report written to {output_path(cfg)}")


@main.command()
@click.option("--breakdown", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option(
    "--suite", type=click.Choice(("rotation", "corruption")), default="rotation"
)
@click.option("--metric", type=click.Choice(("entropy", "accuracy")), default="entropy")
@click.option("--output", type=click.Path(dir_okay=False), default=None)
@config_options
def plot(breakdown, suite, metric, output, **options):
    """Plot per-shift curves from a report's breakdown.csv."""
    from visualisations.shift_curves import ShiftCurveVisualizer

    cfg = resolve_config(options)
    out = output_path(cfg)
    visualizer = ShiftCurveVisualizer(breakdown or out / "breakdown.csv", out / "plots")
    path = visualizer.plot(suite, metric, output)
    click.echo(f"[+] Plot written to {path}")


def cli(argv=None) -> int:
    """Run the CLI; exit code 1 for bad input, 2 for runtime errors."""
    try:
        result = main.main(args=argv, prog_name="pq_multilabel", standalone_mode=False)
    except click.ClickException as err:
        err.show()
        return 1
    except click.exceptions.Abort:
        click.echo("Aborted!", err=True)
        return 1
    except PQError as err:
        click.echo(f"Error: {err}", err=True)
        return err.exit_code
    except Exception as err:
        logger.exception("Unexpected failure")
        click.echo(f"Error: {err}", err=True)
        return 2
    return result if isinstance(result, int) else 0


if __name__ == "__main__":
    sys.exit(cli())

"""Console script for rffcl."""
import logging
import sys

import click
import click_log

from . import RffError
from .pipeline import inspect_path, load_config, run_eval, run_finetune, run_gen, run_pretrain
from .signals.chanest import Mode
from .utils import TqdmLoggingHandler

logger = logging.getLogger("rffcl")
click_log.basic_config(logger)


def _run(ctx: click.Context, phase):
    """Resolve the configuration, run one phase and map package errors to exit codes"""
    opts = ctx.obj
    try:
        cfg = load_config(
            opts["config"], mode=opts["mode"], seed=opts["seed"], deterministic=opts["deterministic"], out=opts["out"]
        )
        logger.info(f"{phase.__name__} [{cfg.mode.value}] config {cfg.hash} -> {cfg.out_dir}")
        outputs = phase(cfg, progress=opts["progress"])
    except RffError as e:
        logger.error(f"{type(e).__name__}: {e}")
        ctx.exit(e.exit_code)
    for name, path in outputs.items():
        click.echo(f"{name}: {path}")


@click.group()
@click.option("--config", "-c", type=click.Path(exists=True, dir_okay=False), help="JSON run configuration")
@click.option("--mode", type=click.Choice([m.value for m in Mode]), help="Positive-pair construction mode")
@click.option("--seed", type=int, help="Master seed")
@click.option("--deterministic", is_flag=True, help="Single-threaded, bit-reproducible runs")
@click.option("--out", "-o", type=click.Path(file_okay=False), help="Run output directory")
@click.option("--progress", is_flag=True, help="Show progress bars")
@click_log.simple_verbosity_option(logger)
@click.pass_context
def main(ctx, config, mode, seed, deterministic, out, progress):
    """Residual-channel contrastive learning for RF fingerprinting."""
    if progress:
        logger.handlers = [TqdmLoggingHandler()]
        logger.handlers[0].setFormatter(click_log.ColorFormatter())
    ctx.obj = {
        "config": config,
        "mode": mode,
        "seed": seed,
        "deterministic": True if deterministic else None,
        "out": out,
        "progress": progress,
    }


@main.command()
@click.pass_context
def gen(ctx):
    """Simulate the source and target datasets and their MMSE statistics."""
    _run(ctx, run_gen)


@main.command()
@click.pass_context
def pretrain(ctx):
    """Contrastive pretraining on the source dataset."""
    _run(ctx, run_pretrain)


@main.command()
@click.pass_context
def finetune(ctx):
    """Few-label fine-tuning on the target dataset."""
    _run(ctx, run_finetune)


@main.command(name="eval")
@click.pass_context
def evaluate(ctx):
    """SNR sweep, clustering NMI and feature export."""
    _run(ctx, run_eval)


@main.command()
@click.argument("path", type=click.Path(exists=True, dir_okay=False))
@click.pass_context
def inspect(ctx, path):
    """Summarise a dataset, statistics or checkpoint file."""
    try:
        click.echo(inspect_path(path))
    except RffError as e:
        logger.error(f"{type(e).__name__}: {e}")
        ctx.exit(e.exit_code)


if __name__ == "__main__":
    sys.exit(main())  # pragma: no cover

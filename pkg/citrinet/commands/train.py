"""Train command for fitting a model on a synthetic corpus."""

from typing import Optional

import click
from pydantic import ValidationError

from citrinet import training
from citrinet.checkpoint import load_checkpoint
from citrinet.errors import CitrinetError, TrainingDivergedError
from citrinet.synth import load_manifest
from citrinet.utils import config_options, model_options, resolve_config, validate_positive


@click.command(
    help="Train a model on a synthetic corpus. Writes metrics.csv, cmvn.txt, "
    "checkpoint-<step>.citr and last.citr into the output directory."
)
@config_options
@model_options
@click.option(
    "--data",
    required=True,
    type=click.Path(exists=True),
    help="Corpus directory or its manifest.yaml.",
)
@click.option("--steps", type=int, required=True, callback=validate_positive, help="Optimizer steps to run.")
@click.option("--output", "-o", required=True, type=click.Path(file_okay=False), help="Run directory.")
@click.option(
    "--resume",
    type=click.Path(exists=True, dir_okay=False),
    help="Checkpoint to continue from; its embedded config replaces --config.",
)
@click.pass_context
def train(
    ctx: click.Context,
    config_path: Optional[str],
    seed: Optional[int],
    variant: Optional[str],
    channels: Optional[int],
    total_blocks: Optional[int],
    data: str,
    steps: int,
    output: str,
    resume: Optional[str],
) -> None:
    """Train a model."""
    try:
        if resume:
            config = load_checkpoint(resume).config
            click.secho(f"Resuming from {resume}...", fg="yellow")
        else:
            config = resolve_config(
                config_path, seed, variant=variant, channels=channels, total_blocks=total_blocks
            )
        samples = load_manifest(data)
        click.secho(
            f"Training {config.model.label} on {len(samples)} utterances for {steps} steps...",
            fg="yellow",
        )
        result = training.train(config, samples, steps, output, resume)
    except TrainingDivergedError as e:
        click.secho(f"Training diverged: {e}", fg="red")
        ctx.exit(1)
    except (CitrinetError, ValidationError) as e:
        click.secho(f"Error training model: {e}", fg="red")
        ctx.exit(1)

    last = result.metrics[-1]
    click.secho(
        f"Finished step {result.checkpoint.step}: ctc {last.ctc:.4f}, combined {last.combined:.4f}",
        fg="green",
    )
    click.echo(f"Checkpoint: {result.checkpoint_path}")

"""Params command for the parameter census of a model configuration."""

from typing import Optional

import click
from pydantic import ValidationError

from citrinet.errors import CitrinetError
from citrinet.model import build_model, param_census
from citrinet.utils import config_options, echo_yaml, model_options, resolve_config


@click.command(help="Print the parameter census of a model, grouped by encoder block and decoder part, and its total.")
@config_options
@model_options
@click.pass_context
def params(
    ctx: click.Context,
    config_path: Optional[str],
    seed: Optional[int],
    variant: Optional[str],
    channels: Optional[int],
    total_blocks: Optional[int],
) -> None:
    """Count model parameters."""
    try:
        config = resolve_config(config_path, seed, variant=variant, channels=channels, total_blocks=total_blocks)
        census = param_census(build_model(config.model))
    except (CitrinetError, ValidationError) as e:
        click.secho(f"Error building model: {e}", fg="red")
        ctx.exit(1)

    total = sum(census.values())
    echo_yaml({"model": config.model.label, "blocks": config.model.total_blocks, "census": census})
    click.secho(f"Total: {total} parameters ({total / 1e6:.1f}M)", fg="green")

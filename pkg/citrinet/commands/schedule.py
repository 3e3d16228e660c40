"""Schedule command for the encoder kernel layout."""

from typing import Optional

import click
from pydantic import ValidationError

from citrinet.errors import CitrinetError
from citrinet.model import kernel_schedule
from citrinet.utils import config_options, echo_yaml, model_options, resolve_config


@click.command(help="Print the encoder block layout: kernel, stride, repeat and channels of every block.")
@config_options
@model_options
@click.pass_context
def schedule(
    ctx: click.Context,
    config_path: Optional[str],
    seed: Optional[int],
    variant: Optional[str],
    channels: Optional[int],
    total_blocks: Optional[int],
) -> None:
    """Print the kernel layout."""
    try:
        config = resolve_config(config_path, seed, variant=variant, channels=channels, total_blocks=total_blocks)
        specs = kernel_schedule(config.model)
    except (CitrinetError, ValidationError) as e:
        click.secho(f"Error building layout: {e}", fg="red")
        ctx.exit(1)

    echo_yaml(
        {
            "model": config.model.label,
            "blocks": [
                {
                    "name": spec.label,
                    "kernel": spec.kernel,
                    "stride": spec.stride,
                    "repeat": spec.repeat,
                    "channels": [spec.in_channels, spec.out_channels],
                    "residual": spec.has_residual,
                    "attention": spec.attention_enhanced,
                }
                for spec in specs
            ],
        }
    )
    reduction = 2 ** sum(1 for spec in specs if spec.stride == 2)
    click.secho(f"{len(specs)} blocks, time reduction {reduction}x", fg="green")

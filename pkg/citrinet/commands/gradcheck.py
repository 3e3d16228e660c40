"""Gradcheck command for verifying backpropagation against finite differences."""

from typing import Optional

import click
from pydantic import ValidationError

from citrinet import gradcheck as checks
from citrinet.errors import CitrinetError
from citrinet.utils import config_options, echo_yaml, resolve_config, validate_positive


@click.command(
    help="Compare analytic parameter gradients with central finite differences on a small model. "
    "Without --config a 16-channel Att-C with one block per mega block and 8 tokens is used. "
    "Exits with status 1 and lists the offending tensors when any relative error exceeds the threshold."
)
@config_options
@click.option(
    "--entries",
    type=int,
    default=checks.ENTRIES_PER_TENSOR,
    show_default=True,
    callback=validate_positive,
    help="Sampled entries per parameter tensor.",
)
@click.option(
    "--threshold",
    type=float,
    default=checks.THRESHOLD,
    show_default=True,
    help="Largest accepted relative error.",
)
@click.pass_context
def gradcheck(
    ctx: click.Context,
    config_path: Optional[str],
    seed: Optional[int],
    entries: int,
    threshold: float,
) -> None:
    """Run the gradient check."""
    seed = seed or 0
    try:
        config = resolve_config(config_path, seed) if config_path else checks.tiny_config(seed)
        click.secho(f"Checking gradients of {config.model.label} (seed {seed})...", fg="yellow")
        report = checks.gradcheck(config, seed, entries=entries, threshold=threshold)
    except (CitrinetError, ValidationError) as e:
        click.secho(f"Error running gradient check: {e}", fg="red")
        ctx.exit(1)

    echo_yaml(report.to_dict())
    if not report.passed:
        offenders = ", ".join(check.name for check in report.failures)
        click.secho(f"Gradient check failed for: {offenders}", fg="red")
        ctx.exit(1)
    click.secho(
        f"All {len(report.checks)} tensors passed (max rel err {report.max_rel_err:.3g}).", fg="green"
    )

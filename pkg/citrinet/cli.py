"""Citrinet speech recognition toolkit CLI."""

import logging

import click

from citrinet import __version__
from citrinet.commands.decode import decode
from citrinet.commands.eval import evaluate
from citrinet.commands.gradcheck import gradcheck
from citrinet.commands.params import params
from citrinet.commands.schedule import schedule
from citrinet.commands.synth import synth
from citrinet.commands.train import train
from citrinet.utils import load_env_if_present

load_env_if_present()


@click.group()
@click.version_option(__version__, prog_name="citrinet")
@click.option("--verbose", "-v", is_flag=True, help="Log training and decoding progress.")
def citrinet(verbose: bool) -> None:
    """Citrinet and attention-enhanced Citrinet on a numpy autodiff engine."""
    if verbose:
        logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(levelname)s: %(message)s")


# Data and training
citrinet.add_command(synth)
citrinet.add_command(train)

# Inference
citrinet.add_command(decode)
citrinet.add_command(evaluate)

# Diagnostics
citrinet.add_command(gradcheck)
citrinet.add_command(params)
citrinet.add_command(schedule)

if __name__ == "__main__":
    citrinet()  # pragma: no cover

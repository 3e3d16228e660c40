"""Decode command for transcribing a corpus with a trained checkpoint."""

from typing import Optional

import click
from pydantic import ValidationError

from citrinet.errors import CitrinetError
from citrinet.synth import manifest_entries
from citrinet.utils import config_options, decode_options, format_tokens, transcribe


@click.command(
    help="Transcribe a corpus with CTC prefix beam search followed by attention rescoring. "
    "Prints one line per utterance: its id, a tab, then the decoded token ids."
)
@config_options
@decode_options
@click.pass_context
def decode(
    ctx: click.Context,
    config_path: Optional[str],
    seed: Optional[int],
    checkpoint_path: str,
    data: str,
    cmvn_path: Optional[str],
    beam_width: Optional[int],
    w_ctc: Optional[float],
) -> None:
    """Decode a corpus."""
    try:
        samples, hypotheses = transcribe(
            checkpoint_path, data, config_path, seed, cmvn_path, beam_width=beam_width, w_ctc=w_ctc
        )
    except (CitrinetError, ValidationError) as e:
        click.secho(f"Error decoding corpus: {e}", fg="red")
        ctx.exit(1)

    for entry, tokens in zip(manifest_entries(samples), hypotheses):
        click.echo(f"{entry['id']}\t{format_tokens(tokens)}")

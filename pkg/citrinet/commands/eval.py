"""Eval command for scoring decoded transcripts against the corpus references."""

from typing import Optional

import click
from pydantic import ValidationError

from citrinet.decoding import cer, corpus_cer
from citrinet.errors import CitrinetError
from citrinet.synth import manifest_entries
from citrinet.utils import config_options, decode_options, echo_yaml, format_tokens, transcribe


@click.command(
    name="eval",
    help="Decode a corpus and report the character (token) error rate of every utterance and of the corpus.",
)
@config_options
@decode_options
@click.pass_context
def evaluate(
    ctx: click.Context,
    config_path: Optional[str],
    seed: Optional[int],
    checkpoint_path: str,
    data: str,
    cmvn_path: Optional[str],
    beam_width: Optional[int],
    w_ctc: Optional[float],
) -> None:
    """Score a checkpoint on a corpus."""
    try:
        samples, hypotheses = transcribe(
            checkpoint_path, data, config_path, seed, cmvn_path, beam_width=beam_width, w_ctc=w_ctc
        )
        pairs = [(hyp, sample.tokens) for hyp, sample in zip(hypotheses, samples)]
        total = corpus_cer(pairs)
        utterances = [
            {
                "id": entry["id"],
                "ref": format_tokens(ref),
                "hyp": format_tokens(hyp),
                "cer": float(cer(hyp, ref)),
            }
            for entry, (hyp, ref) in zip(manifest_entries(samples), pairs)
        ]
    except (CitrinetError, ValidationError) as e:
        click.secho(f"Error evaluating checkpoint: {e}", fg="red")
        ctx.exit(1)

    echo_yaml({"utterances": utterances})
    click.secho(
        f"Corpus CER: {float(total):.4f} ({total.numerator}/{total.denominator})",
        fg="green" if total == 0 else "yellow",
    )

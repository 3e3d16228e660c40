"""Synth command for generating the synthetic tone corpus."""

import os
from typing import Optional

import click
from pydantic import ValidationError

from citrinet.errors import CitrinetError, ConfigurationError
from citrinet.features import extract_features, write_feature_dump
from citrinet.synth import manifest_entries, save_manifest, synth_dataset
from citrinet.utils import config_options, resolve_config, validate_positive


@click.command(
    help="Generate a synthetic corpus where every token is a pure tone, and write its manifest. "
    "Waveforms are rebuilt from the (tokens, seed) pairs stored in the manifest."
)
@config_options
@click.option(
    "--output",
    "-o",
    required=True,
    type=click.Path(file_okay=False),
    help="Directory receiving manifest.yaml.",
)
@click.option("--count", "-n", type=int, default=10, show_default=True, callback=validate_positive)
@click.option(
    "--vocab-subset",
    type=int,
    default=8,
    show_default=True,
    callback=validate_positive,
    help="Tokens are drawn from ids 0..N-1.",
)
@click.option("--min-len", type=int, default=2, show_default=True, callback=validate_positive)
@click.option("--max-len", type=int, default=5, show_default=True, callback=validate_positive)
@click.option("--dump-features", is_flag=True, help="Also write an FBNK feature dump per utterance.")
@click.pass_context
def synth(
    ctx: click.Context,
    config_path: Optional[str],
    seed: Optional[int],
    output: str,
    count: int,
    vocab_subset: int,
    min_len: int,
    max_len: int,
    dump_features: bool,
) -> None:
    """Generate a synthetic corpus."""
    try:
        config = resolve_config(config_path, seed)
        if vocab_subset > config.model.vocab:
            raise ConfigurationError(
                f"vocab subset {vocab_subset} exceeds the model vocabulary of {config.model.vocab}"
            )
        samples = synth_dataset(count, config.train.seed, vocab_subset, min_len, max_len)
        path = save_manifest(samples, output)
        if dump_features:
            matrices = extract_features(
                [s.waveform for s in samples], config.train.dither, [s.seed for s in samples]
            )
            for entry, matrix in zip(manifest_entries(samples), matrices):
                write_feature_dump(matrix, os.path.join(output, f"{entry['id']}.fbnk"))
    except (CitrinetError, ValidationError) as e:
        click.secho(f"Error generating corpus: {e}", fg="red")
        ctx.exit(1)

    click.secho(f"Wrote {len(samples)} utterances to {path}", fg="green")

"""Helpers shared by the CLI commands."""

import logging
import os
import sys
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import click
import numpy as np
from pyaml import yaml

from citrinet.checkpoint import load_checkpoint
from citrinet.config import RunConfig, load_config
from citrinet.decoding import decode_corpus
from citrinet.features import CmvnStats, load_cmvn
from citrinet.synth import SynthSample, load_manifest
from citrinet.training import CMVN_FILE, prepare_features

logger = logging.getLogger(__name__)


def load_env_if_present() -> None:
    """Load environment variables from .env file if present."""
    env_path = os.path.join(os.getcwd(), ".env")
    if os.path.exists(env_path):
        try:
            import dotenv

            dotenv.load_dotenv(env_path)
        except ImportError:
            click.echo(
                "dotenv package not installed. CITRINET_* defaults will not be read from .env file."
            )


def validate_non_negative(ctx: click.Context, param: click.Parameter, value: Optional[int]) -> Optional[int]:
    """Reject negative seeds and counts."""
    if value is not None and value < 0:
        raise click.BadParameter("must be a non-negative integer.")
    return value


def validate_positive(ctx: click.Context, param: click.Parameter, value: Optional[int]) -> Optional[int]:
    if value is not None and value < 1:
        raise click.BadParameter("must be a positive integer.")
    return value


def config_options(command: Callable) -> Callable:
    """Add the --config and --seed options every verb accepts."""
    command = click.option(
        "--seed",
        envvar="CITRINET_SEED",
        type=int,
        callback=validate_non_negative,
        help="Random seed; overrides the config. Falls back to CITRINET_SEED.",
    )(command)
    return click.option(
        "--config",
        "config_path",
        envvar="CITRINET_CONFIG",
        type=click.Path(dir_okay=False),
        help="Flat key = value config file. Falls back to CITRINET_CONFIG.",
    )(command)


def model_options(command: Callable) -> Callable:
    """Add the variant/size overrides used by params, schedule and train."""
    for option in (
        click.option(
            "--total-blocks",
            type=int,
            callback=validate_positive,
            help="Encoder blocks including prolog and epilog.",
        ),
        click.option("--channels", type=int, callback=validate_positive, help="Encoder width C."),
        click.option("--variant", type=click.Choice(["C", "Att-C"], case_sensitive=False), help="Model variant."),
    ):
        command = option(command)
    return command


def decode_options(command: Callable) -> Callable:
    """Add the checkpoint, corpus and decoding options shared by decode and eval."""
    for option in (
        click.option("--w-ctc", type=click.FloatRange(0.0, 1.0), help="Weight of the CTC score when rescoring."),
        click.option("--beam-width", type=int, callback=validate_positive, help="CTC prefix beam width."),
        click.option(
            "--cmvn",
            "cmvn_path",
            type=click.Path(dir_okay=False),
            help="CMVN stats file; defaults to cmvn.txt beside the checkpoint.",
        ),
        click.option("--data", required=True, type=click.Path(exists=True), help="Corpus directory or manifest."),
        click.option(
            "--checkpoint",
            "checkpoint_path",
            required=True,
            type=click.Path(exists=True, dir_okay=False),
            help="Checkpoint written by train.",
        ),
    ):
        command = option(command)
    return command


def resolve_config(config_path: Optional[str], seed: Optional[int], **overrides: Any) -> RunConfig:
    """Config file (or defaults), then command-line overrides."""
    return load_config(config_path, {"seed": seed, **overrides})


def load_corpus_features(
    data: str, dither: float, cmvn_path: Optional[str] = None
) -> Tuple[List[SynthSample], List[np.ndarray]]:
    """Manifest samples and their normalized features.

    CMVN stats come from `cmvn_path` when it exists, otherwise they are fitted on
    the corpus itself.
    """
    samples = load_manifest(data)
    stats: Optional[CmvnStats] = None
    if cmvn_path and os.path.isfile(cmvn_path):
        stats = load_cmvn(cmvn_path)
    else:
        click.secho("No CMVN stats found; normalizing with statistics of this corpus.", fg="yellow")
    features, _ = prepare_features(samples, dither, stats)
    return samples, features


def default_cmvn_path(checkpoint_path: str) -> str:
    return os.path.join(os.path.dirname(os.path.abspath(checkpoint_path)), CMVN_FILE)


def to_plain(value: Any) -> Any:
    """Convert numpy scalars and containers into types safe_dump accepts."""
    if isinstance(value, dict):
        return {str(k): to_plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_plain(v) for v in value]
    if isinstance(value, np.generic):
        return value.item()
    return value


def echo_yaml(data: Dict[str, Any]) -> None:
    yaml.safe_dump(
        to_plain(data),
        sys.stdout,
        width=100,
        allow_unicode=True,
        default_flow_style=False,
        sort_keys=False,
    )


def format_tokens(tokens: Sequence[int]) -> str:
    return " ".join(str(t) for t in tokens)


def transcribe(
    checkpoint_path: str,
    data: str,
    config_path: Optional[str] = None,
    seed: Optional[int] = None,
    cmvn_path: Optional[str] = None,
    **overrides: Any,
) -> Tuple[List[SynthSample], List[List[int]]]:
    """Decode a corpus with the model stored in a checkpoint.

    Decoding settings start from the checkpoint's config; --config and command
    options override them.
    """
    checkpoint = load_checkpoint(checkpoint_path)
    config = load_config(config_path, {"seed": seed, **overrides}, base=checkpoint.config.to_flat())
    model = checkpoint.build_model()
    samples, features = load_corpus_features(
        data, config.train.dither, cmvn_path or default_cmvn_path(checkpoint_path)
    )
    hypotheses = decode_corpus(
        model,
        features,
        beam_width=config.train.beam_width,
        w_ctc=config.train.w_ctc,
        lambda2=config.model.lambda2,
        max_frames=config.train.max_frames,
    )
    return samples, hypotheses

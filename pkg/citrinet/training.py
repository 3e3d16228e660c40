"""
Training loop: static length-sorted batches, Novograd with cosine warmup,
periodic checkpoints and a CSV metrics log.
"""

import csv
import logging
import math
import os
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from citrinet.checkpoint import SUFFIX, Checkpoint, load_checkpoint, save_checkpoint
from citrinet.config import RunConfig
from citrinet.errors import InputError, TrainingDivergedError
from citrinet.features import (
    CmvnStats,
    cmvn_apply,
    cmvn_fit,
    collate_features,
    extract_features,
    save_cmvn,
    spec_augment,
)
from citrinet.layers import Initializer
from citrinet.losses import LossWeights, compute_losses
from citrinet.model import CitrinetModel, Vocabulary
from citrinet.optim import CosineWarmupSchedule, Novograd, clip_grad_norm
from citrinet.synth import SynthSample
from citrinet.tensor import backward

logger = logging.getLogger(__name__)

METRICS_FILE = "metrics.csv"
METRICS_COLUMNS = ("step", "lr", "ctc", "att_l2r", "att_r2l", "combined")
CMVN_FILE = "cmvn.txt"
LAST_CHECKPOINT = "last" + SUFFIX


@dataclass
class MetricsRow:
    step: int
    lr: float
    ctc: float
    att_l2r: Optional[float]
    att_r2l: Optional[float]
    combined: float

    def as_csv(self) -> List[str]:
        return [str(self.step)] + [
            "" if value is None else repr(float(value))
            for value in (self.lr, self.ctc, self.att_l2r, self.att_r2l, self.combined)
        ]


def read_metrics(path: str) -> List[MetricsRow]:
    def value(text: str) -> Optional[float]:
        return float(text) if text else None

    with open(path, "r", encoding="utf-8", newline="") as handle:
        return [
            MetricsRow(
                step=int(row["step"]),
                lr=float(row["lr"]),
                ctc=float(row["ctc"]),
                att_l2r=value(row["att_l2r"]),
                att_r2l=value(row["att_r2l"]),
                combined=float(row["combined"]),
            )
            for row in csv.DictReader(handle)
        ]


def static_batches(lengths: Sequence[int], max_frames: int) -> List[List[int]]:
    """Group utterance indices into length-sorted buckets of at most `max_frames` padded frames.

    An utterance longer than `max_frames` forms a batch of its own.
    """
    order = sorted(range(len(lengths)), key=lambda i: (lengths[i], i))
    batches: List[List[int]] = []
    current: List[int] = []
    for index in order:
        longest = max([lengths[i] for i in current] + [lengths[index]])
        if current and longest * (len(current) + 1) > max_frames:
            batches.append(current)
            current = []
        current.append(index)
    if current:
        batches.append(current)
    return batches


def prepare_features(
    samples: Sequence[SynthSample], dither: float, stats: Optional[CmvnStats] = None
) -> Tuple[List[np.ndarray], CmvnStats]:
    """FBank with per-utterance dither seeds, then global CMVN (fitted here unless given)."""
    raw = extract_features([s.waveform for s in samples], dither, [s.seed for s in samples])
    stats = stats if stats is not None else cmvn_fit(raw)
    return [cmvn_apply(m, stats) for m in raw], stats


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    metrics: List[MetricsRow] = field(default_factory=list)
    checkpoint_path: Optional[str] = None


class Trainer:
    """Single-threaded trainer; one generator drives initialization, dropout and SpecAugment."""

    def __init__(
        self,
        config: RunConfig,
        features: Sequence[np.ndarray],
        targets: Sequence[Sequence[int]],
        output_dir: Optional[str] = None,
    ) -> None:
        if len(features) != len(targets) or not features:
            raise InputError("training needs one target per feature matrix and at least one utterance")
        vocab = Vocabulary(config.model.vocab)
        for target in targets:
            vocab.check_tokens(target)

        self.config = config
        self.features = list(features)
        self.targets = [list(t) for t in targets]
        self.output_dir = output_dir
        train = config.train
        self.rng = np.random.default_rng(train.seed)
        self.model = CitrinetModel(config.model, Initializer(self.rng))
        self.optimizer = Novograd(
            self.model.named_parameters(),
            lr=train.lr_max,
            betas=(train.beta1, train.beta2),
            weight_decay=train.weight_decay,
        )
        self.schedule = CosineWarmupSchedule(train.lr_max, train.warmup_steps, train.total_steps, train.lr_min)
        self.weights = LossWeights(config.model.lambda1, config.model.lambda2, config.model.delta)
        self.batches = static_batches([m.shape[1] for m in self.features], train.max_frames)
        self.step = 0
        self.last_good = self.snapshot()
        self.last_good_path: Optional[str] = None

    def snapshot(self) -> Checkpoint:
        return Checkpoint.capture(self.config, self.model, self.optimizer, self.rng, self.step)

    def resume(self, checkpoint: Checkpoint) -> None:
        checkpoint.restore(self.model, self.optimizer, self.rng)
        self.step = checkpoint.step
        self.last_good = checkpoint
        logger.info("resumed training at step %d", self.step)

    def batch_indices(self, step: int) -> List[int]:
        epoch, position = divmod(step, len(self.batches))
        order = np.random.default_rng([self.config.train.seed, epoch]).permutation(len(self.batches))
        return self.batches[int(order[position])]

    def train_step(self) -> MetricsRow:
        indices = self.batch_indices(self.step)
        matrices = [self.features[i] for i in indices]
        if self.config.train.spec_augment:
            matrices = [spec_augment(m, self.rng) for m in matrices]
        batch = collate_features(matrices)
        targets = [self.targets[i] for i in indices]
        lr = self.schedule(self.step + 1)

        self.model.train()
        self.optimizer.zero_grad()
        losses = compute_losses(self.model, batch.features, batch.valid_len, targets, self.weights)
        row = MetricsRow(step=self.step + 1, lr=lr, **losses.as_floats())
        if not math.isfinite(row.combined):
            self._roll_back()
        backward(losses.combined)
        if self.config.train.grad_clip > 0:
            clip_grad_norm(self.model.parameters(), self.config.train.grad_clip)
        self.optimizer.step(lr)
        self.step += 1
        return row

    def _roll_back(self) -> None:
        failed = self.step + 1
        self.last_good.restore(self.model, self.optimizer, self.rng)
        self.step = self.last_good.step
        logger.warning("non-finite loss at step %d; restored step %d", failed, self.step)
        raise TrainingDivergedError(failed, self.last_good_path)

    def checkpoint(self) -> Checkpoint:
        self.last_good = self.snapshot()
        if self.output_dir:
            path = os.path.join(self.output_dir, f"checkpoint-{self.step}{SUFFIX}")
            save_checkpoint(self.last_good, path)
            save_checkpoint(self.last_good, os.path.join(self.output_dir, LAST_CHECKPOINT))
            self.last_good_path = path
        return self.last_good

    def run(self, steps: int) -> TrainResult:
        metrics: List[MetricsRow] = []
        writer = _MetricsWriter(self.output_dir) if self.output_dir else None
        every = self.config.train.checkpoint_every
        for _ in range(steps):
            row = self.train_step()
            metrics.append(row)
            if writer is not None:
                writer.write(row)
            logger.info(
                "step %d lr %.5g ctc %.4f combined %.4f", row.step, row.lr, row.ctc, row.combined
            )
            if self.step % every == 0:
                self.checkpoint()
        final = self.checkpoint() if self.last_good.step != self.step else self.last_good
        return TrainResult(final, metrics, self.last_good_path)


class _MetricsWriter:
    def __init__(self, output_dir: str) -> None:
        os.makedirs(output_dir, exist_ok=True)
        self.path = os.path.join(output_dir, METRICS_FILE)
        if not os.path.isfile(self.path):
            with open(self.path, "w", encoding="utf-8", newline="") as handle:
                csv.writer(handle).writerow(METRICS_COLUMNS)

    def write(self, row: MetricsRow) -> None:
        with open(self.path, "a", encoding="utf-8", newline="") as handle:
            csv.writer(handle).writerow(row.as_csv())


def train(
    config: RunConfig,
    samples: Sequence[SynthSample],
    steps: int,
    output_dir: Optional[str] = None,
    resume: Optional[str] = None,
) -> TrainResult:
    """Train on a synthetic corpus; `resume` names a checkpoint to continue from."""
    features, stats = prepare_features(samples, config.train.dither)
    if output_dir:
        os.makedirs(output_dir, exist_ok=True)
        save_cmvn(stats, os.path.join(output_dir, CMVN_FILE))
    trainer = Trainer(config, features, [s.tokens for s in samples], output_dir)
    if resume:
        trainer.resume(load_checkpoint(resume))
    return trainer.run(steps)

"""Greedy backward filter selection by loss influence on a fixed batch.

The selection loop masks one channel per iteration: every still-unmasked
prunable channel is scored by evaluating the classification loss with that
channel's mask bit additionally cleared, and the candidate minimizing the
selection score is masked. Scoring is either the raw masked loss (default)
or the absolute increase over the current mask's loss; ties break on
(layer, channel). Rescoring every iteration is the faithful behavior and is
quadratic in channel count; ``once`` ranks a single time as a fast,
non-equivalent approximation.
"""

from __future__ import annotations

import enum
import math
import warnings
from dataclasses import dataclass

import numpy as np

from .backend import TorchBackend
from .data import DatasetHandle
from .netmodel import (
    ChannelMask,
    ConfigurationError,
    NetworkSpec,
    PruneResult,
    apply_mask,
    prunable_channels,
    surgery,
)

__all__ = [
    "ScoringRule",
    "Rescoring",
    "PruneConfig",
    "ScoreRecord",
    "SelectionResult",
    "sample_eval_batch",
    "score_all_channels",
    "select_filters",
    "prune",
]

SCORE_COLUMNS = ("step", "layer", "channel", "masked_loss", "delta", "chosen")


class ScoringRule(str, enum.Enum):
    MASKED_LOSS = "masked_loss"
    LOSS_DELTA = "loss_delta"


class Rescoring(str, enum.Enum):
    EVERY_STEP = "every_step"
    ONCE = "once"


@dataclass
class PruneConfig:
    pruning_rate: float
    eval_batch_size: int = 128
    seed: int = 0
    rescoring: Rescoring = Rescoring.EVERY_STEP
    scoring: ScoringRule = ScoringRule.MASKED_LOSS
    min_channels_per_layer: int = 1

    def __post_init__(self):
        self.rescoring = Rescoring(self.rescoring)
        self.scoring = ScoringRule(self.scoring)
        if not 0.0 < self.pruning_rate < 1.0:
            raise ConfigurationError("pruning rate must be in (0, 1)")
        if self.eval_batch_size < 1:
            raise ConfigurationError("eval batch size must be positive")
        if self.min_channels_per_layer < 1:
            raise ConfigurationError("min_channels_per_layer must be >= 1")

    def to_dict(self) -> dict:
        return {
            "pruning_rate": self.pruning_rate,
            "eval_batch_size": self.eval_batch_size,
            "seed": self.seed,
            "rescoring": self.rescoring.value,
            "scoring": self.scoring.value,
            "min_channels_per_layer": self.min_channels_per_layer,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PruneConfig":
        return cls(**d)


@dataclass
class ScoreRecord:
    step: int
    layer_id: int
    channel_id: int
    masked_loss: float
    delta: float
    chosen: bool = False

    def as_row(self) -> list:
        return [self.step, self.layer_id, self.channel_id,
                self.masked_loss, self.delta, self.chosen]


@dataclass
class SelectionResult:
    mask: ChannelMask
    records: list[ScoreRecord]
    budget: int
    zeros: int

    @property
    def shortfall(self) -> int:
        return self.budget - self.zeros


def sample_eval_batch(data: DatasetHandle, n: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Draw the fixed evaluation batch once; the same seed gives the same batch."""
    if n > data.train_size:
        raise ConfigurationError(
            f"eval batch size {n} exceeds the training split ({data.train_size})"
        )
    rng = np.random.default_rng(seed)
    idx = rng.choice(data.train_size, size=n, replace=False)
    return data.train_x[idx].copy(), data.train_y[idx].copy()


def score_all_channels(net: NetworkSpec, mask: ChannelMask,
                       batch: tuple[np.ndarray, np.ndarray],
                       step: int = 0) -> list[ScoreRecord]:
    """Loss of every still-unmasked prunable channel when additionally masked.

    ``delta`` is the absolute change against the loss under the current mask.
    The inputs are not modified.
    """
    mask.validate_against(net)
    x, y = batch
    backend = TorchBackend(apply_mask(net, mask))
    baseline = backend.cross_entropy(x, y)
    records = []
    for lid, c in prunable_channels(net):
        if mask.is_masked(lid, c):
            continue
        saved = backend.zero_channel(lid, c)
        loss = backend.cross_entropy(x, y)
        backend.restore_channel(lid, c, saved)
        records.append(ScoreRecord(
            step=step,
            layer_id=lid,
            channel_id=c,
            masked_loss=loss,
            delta=abs(loss - baseline),
        ))
    return records


def _score_key(record: ScoreRecord, rule: ScoringRule) -> tuple:
    value = record.masked_loss if rule is ScoringRule.MASKED_LOSS else record.delta
    return (value, record.layer_id, record.channel_id)


def select_filters(net: NetworkSpec, data: DatasetHandle, cfg: PruneConfig) -> SelectionResult:
    """Greedy selection of floor(total_conv_channels * P) channels to mask.

    Candidates that would leave a layer below ``min_channels_per_layer``
    survivors are skipped. If the candidate pool runs out before the budget
    is met, the selection stops with an explicit warning and the shortfall
    recorded in the result.
    """
    budget = prune_budget(net.total_conv_channels, cfg.pruning_rate)
    if budget < 1:
        raise ConfigurationError("pruning budget is below one channel")
    batch = sample_eval_batch(data, cfg.eval_batch_size, cfg.seed)

    mask = ChannelMask.all_ones(net)
    log: list[ScoreRecord] = []

    def eligible(records):
        return [r for r in records
                if mask.unmasked_count(r.layer_id) > cfg.min_channels_per_layer]

    if cfg.rescoring is Rescoring.EVERY_STEP:
        for step in range(1, budget + 1):
            records = score_all_channels(net, mask, batch, step=step)
            candidates = eligible(records)
            if not candidates:
                break
            chosen = min(candidates, key=lambda r: _score_key(r, cfg.scoring))
            chosen.chosen = True
            mask.set_zero(chosen.layer_id, chosen.channel_id)
            log.extend(records)
    else:
        records = score_all_channels(net, mask, batch, step=1)
        log.extend(records)
        for r in sorted(records, key=lambda r: _score_key(r, cfg.scoring)):
            if mask.zeros_count() >= budget:
                break
            if mask.unmasked_count(r.layer_id) > cfg.min_channels_per_layer:
                r.chosen = True
                mask.set_zero(r.layer_id, r.channel_id)

    zeros = mask.zeros_count()
    if zeros < budget:
        warnings.warn(
            f"selection stopped at {zeros} of {budget} channels: "
            f"remaining candidates would drop a layer below "
            f"{cfg.min_channels_per_layer} channels",
            stacklevel=2,
        )
    return SelectionResult(mask=mask, records=log, budget=budget, zeros=zeros)


def prune(net: NetworkSpec, selection: SelectionResult | ChannelMask) -> PruneResult:
    """Physical removal of the selected channels via surgery."""
    if isinstance(selection, SelectionResult):
        result = surgery(net, selection.mask)
        result.scores = list(selection.records)
    else:
        result = surgery(net, selection)
    return result

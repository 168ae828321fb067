"""Training stages: dense baseline, sparse-regularized, and retrain-from-scratch.

All stages share one SGD+momentum loop over a ``TorchBackend``. The sparse
stage adds the analytic penalty gradient (from ``regularizers``) to the
autograd cross-entropy gradient each step, so the penalty implementation
under test is exactly the one that drives training. Runs are deterministic:
data order comes from a seeded numpy generator and the backend is
single-threaded.

Accuracies are reported in percent throughout.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Protocol

import numpy as np
import torch
import torch.nn.functional as F

from .backend import TorchBackend
from .data import DatasetHandle, augment_batch
from .netmodel import ConfigurationError, NetworkSpec, reinitialize
from .regularizers import PenaltyConfig, network_penalty, tensor_gradient

__all__ = [
    "TrainConfig",
    "EpochMetrics",
    "TrainResult",
    "SweepEntry",
    "ExecutionBackend",
    "train_baseline",
    "train_sparse",
    "retrain_from_scratch",
    "sparsity_ratio",
    "lambda_sweep",
    "select_best",
    "objective_value",
]

METRICS_COLUMNS = ("stage", "epoch", "train_loss", "penalty", "train_acc", "test_acc", "sparsity")


class ExecutionBackend(Protocol):
    """What the training loop needs from an execution engine."""

    def forward(self, x: np.ndarray) -> np.ndarray: ...
    def cross_entropy(self, x: np.ndarray, y: np.ndarray, batch_size: int = ...) -> float: ...
    def accuracy(self, x: np.ndarray, y: np.ndarray, batch_size: int = ...) -> float: ...
    def export_spec(self) -> NetworkSpec: ...


@dataclass
class TrainConfig:
    """SGD schedule for one training stage.

    ``lr_milestones`` pairs an epoch boundary with a multiplier; boundaries
    below 1.0 are fractions of total epochs, anything else an epoch index.
    """

    epochs: int
    batch_size: int = 128
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr_milestones: list[tuple[float, float]] = field(default_factory=list)
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigurationError("epochs must be nonnegative")
        if self.lr <= 0 or self.batch_size < 1:
            raise ConfigurationError("learning rate and batch size must be positive")
        boundaries = [self._boundary(m) for m, _ in self.lr_milestones]
        if any(b2 <= b1 for b1, b2 in zip(boundaries, boundaries[1:])):
            raise ConfigurationError("lr milestone epochs must be strictly increasing")

    def _boundary(self, milestone: float) -> int:
        if 0 < milestone < 1:
            return int(milestone * self.epochs)
        return int(milestone)

    def lr_at(self, epoch: int) -> float:
        lr = self.lr
        for milestone, mult in self.lr_milestones:
            if epoch >= self._boundary(milestone):
                lr *= mult
        return lr

    def to_dict(self) -> dict:
        return {
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "lr": self.lr,
            "momentum": self.momentum,
            "weight_decay": self.weight_decay,
            "lr_milestones": [list(m) for m in self.lr_milestones],
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["lr_milestones"] = [tuple(m) for m in d.get("lr_milestones", [])]
        return cls(**d)


@dataclass
class EpochMetrics:
    stage: str
    epoch: int
    train_loss: float
    penalty: float
    train_acc: float
    test_acc: float
    sparsity: float

    def as_row(self) -> list:
        return [getattr(self, c) for c in METRICS_COLUMNS]


@dataclass
class TrainResult:
    net: NetworkSpec
    history: list[EpochMetrics]

    @property
    def final_test_acc(self) -> float:
        return self.history[-1].test_acc if self.history else float("nan")

    @property
    def final_train_acc(self) -> float:
        return self.history[-1].train_acc if self.history else float("nan")


def sparsity_ratio(net: NetworkSpec, threshold: float = 1e-3) -> float:
    """Fraction of conv weights with magnitude below the threshold."""
    total = 0
    small = 0
    for l in net.conv_layers:
        total += l.weights.size
        small += int((np.abs(l.weights) < threshold).sum())
    return small / total if total else 0.0


def objective_value(net: NetworkSpec, x: np.ndarray, y: np.ndarray,
                    penalty: PenaltyConfig | None, weight_decay: float) -> dict:
    """Decomposed training objective on a fixed batch.

    Returns cross_entropy, penalty_term (strength included), weight_decay_term
    (0.5 * wd * ||params||^2 over all trainable parameters), and their total.
    """
    backend = TorchBackend(net)
    ce = backend.cross_entropy(x, y)
    pen = 0.0
    if penalty is not None and penalty.strength > 0:
        pen = penalty.strength * network_penalty(net, penalty)
    sq = sum(float((p.detach() ** 2).sum()) for p in backend.module.parameters())
    wd = 0.5 * weight_decay * sq
    return {
        "cross_entropy": ce,
        "penalty_term": pen,
        "weight_decay_term": wd,
        "total": ce + pen + wd,
    }


def _epoch_metrics(backend: TorchBackend, data: DatasetHandle, stage: str, epoch: int,
                   train_loss: float, penalty: PenaltyConfig | None) -> EpochMetrics:
    snapshot = backend.export_spec()
    pen_value = network_penalty(snapshot, penalty) if penalty is not None else 0.0
    return EpochMetrics(
        stage=stage,
        epoch=epoch,
        train_loss=train_loss,
        penalty=pen_value,
        train_acc=backend.accuracy(data.train_x, data.train_y),
        test_acc=backend.accuracy(data.test_x, data.test_y),
        sparsity=sparsity_ratio(snapshot),
    )


def _run_training(spec: NetworkSpec, data: DatasetHandle, cfg: TrainConfig,
                  penalty: PenaltyConfig | None, stage: str,
                  log=None) -> TrainResult:
    if data.image_channels != spec.image_channels:
        raise ConfigurationError("dataset channel count does not match the network")
    if data.num_classes != spec.classifier.out_channels:
        raise ConfigurationError("dataset class count does not match the classifier")

    rng = np.random.default_rng(cfg.seed)
    torch.manual_seed(cfg.seed)
    backend = TorchBackend(spec)
    model = backend.module
    opt = torch.optim.SGD(model.parameters(), lr=cfg.lr, momentum=cfg.momentum,
                          weight_decay=cfg.weight_decay)
    conv_ids = [l.layer_id for l in spec.conv_layers]
    lam = penalty.strength if penalty is not None else 0.0

    history: list[EpochMetrics] = []
    n = data.train_size
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        for g in opt.param_groups:
            g["lr"] = lr
        model.train()
        perm = rng.permutation(n)
        loss_sum, seen = 0.0, 0
        for lo in range(0, n, cfg.batch_size):
            idx = perm[lo:lo + cfg.batch_size]
            xb = data.train_x[idx]
            if data.augment:
                xb = augment_batch(xb, rng)
            xb = torch.from_numpy(np.ascontiguousarray(xb))
            yb = torch.from_numpy(data.train_y[idx])
            opt.zero_grad()
            loss = F.cross_entropy(model(xb), yb)
            loss.backward()
            if not torch.isfinite(loss):
                raise RuntimeError(f"non-finite loss at {stage} epoch {epoch}")
            if lam > 0:
                _add_penalty_grads(backend, conv_ids, penalty, lam)
            opt.step()
            loss_sum += float(loss) * len(idx)
            seen += len(idx)
        metrics = _epoch_metrics(backend, data, stage, epoch, loss_sum / seen, penalty)
        history.append(metrics)
        if log is not None:
            log(metrics)

    return TrainResult(net=backend.export_spec(), history=history)


def _add_penalty_grads(backend: TorchBackend, conv_ids: list[int],
                       penalty: PenaltyConfig, lam: float) -> None:
    for lid in conv_ids:
        w = backend.convs_param(lid)
        g = tensor_gradient(w.detach().numpy().astype(np.float64),
                            penalty.grouping, penalty.base, penalty.hierarchical)
        w.grad.add_(torch.from_numpy(g.astype(np.float32)), alpha=lam)
    if penalty.include_classifier:
        fc = backend.classifier_weight()
        w4 = fc.detach().numpy().astype(np.float64)[:, :, None, None]
        g = tensor_gradient(w4, penalty.grouping, penalty.base, penalty.hierarchical)
        fc.grad.add_(torch.from_numpy(g[:, :, 0, 0].astype(np.float32)), alpha=lam)


def train_baseline(net: NetworkSpec, data: DatasetHandle, cfg: TrainConfig,
                   log=None) -> TrainResult:
    """Stage 1: dense training with cross-entropy plus weight decay only."""
    return _run_training(net, data, cfg, penalty=None, stage="baseline", log=log)


def train_sparse(net: NetworkSpec, data: DatasetHandle, cfg: TrainConfig,
                 penalty: PenaltyConfig, log=None) -> TrainResult:
    """Stage 2: continue from trained weights with the structured penalty added."""
    return _run_training(net, data, cfg, penalty=penalty, stage="sparse", log=log)


def retrain_from_scratch(pruned: NetworkSpec, data: DatasetHandle, cfg: TrainConfig,
                         log=None) -> TrainResult:
    """Stage 4: random re-init of the compact architecture, then dense training."""
    fresh = reinitialize(pruned, seed=cfg.seed)
    return _run_training(fresh, data, cfg, penalty=None, stage="retrain", log=log)


@dataclass
class SweepEntry:
    lam: float
    net: NetworkSpec
    sparsity: float
    test_acc: float
    history: list[EpochMetrics] = field(default_factory=list)


def lambda_sweep(net: NetworkSpec, data: DatasetHandle, cfg: TrainConfig,
                 penalty_template: PenaltyConfig, lambda_grid: list[float],
                 log=None) -> list[SweepEntry]:
    """Sparse-train once per strength value, strongest first."""
    if not lambda_grid:
        raise ConfigurationError("lambda grid must be nonempty")
    entries = []
    for lam in sorted(lambda_grid, reverse=True):
        pen = replace(penalty_template, strength=lam)
        result = train_sparse(net, data, cfg, pen, log=log)
        entries.append(SweepEntry(
            lam=lam,
            net=result.net,
            sparsity=sparsity_ratio(result.net),
            test_acc=result.final_test_acc,
            history=result.history,
        ))
    return entries


def select_best(entries: list[SweepEntry], accuracy_tolerance: float = 1.0) -> SweepEntry:
    """Sparsest run whose accuracy is within tolerance (in points) of the sweep's best.

    Ties go to the larger strength.
    """
    if not entries:
        raise ConfigurationError("empty sweep")
    best_acc = max(e.test_acc for e in entries)
    eligible = [e for e in entries if e.test_acc >= best_acc - accuracy_tolerance]
    return max(eligible, key=lambda e: (e.sparsity, e.lam))

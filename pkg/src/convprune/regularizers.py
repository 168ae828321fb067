"""Structured sparse penalties and their gradients over conv weight tensors.

A layer's weights (out_channels, in_channels, K, K) are partitioned into
groups either by output channel (neuron-wise: one group per filter) or by
input channel (feature-wise: one group per incoming feature map). A group's
sparseness is measured by one of three base criteria; the hierarchical
squared mode instead applies the criterion to each K x K kernel inside the
group, sums, and squares the sum.

All accumulation happens in float64 regardless of the storage dtype of the
weights. At points where a group or kernel norm is exactly zero the
subgradient 0 is used; the group-L1/2 derivative denominator carries an
additive 1e-12 floor since it diverges as the norm vanishes.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .netmodel import ConfigurationError, ConvLayerSpec, NetworkSpec

__all__ = [
    "GroupingScheme",
    "BaseCriterion",
    "HierarchicalMode",
    "PenaltyConfig",
    "GroupSlice",
    "group_slices",
    "base_penalty",
    "hierarchical_penalty",
    "layer_penalty",
    "penalty_gradient",
    "network_penalty",
    "tensor_penalty",
    "tensor_gradient",
    "group_norms",
]

_L12_FLOOR = 1e-12


class GroupingScheme(str, enum.Enum):
    NEURON = "neuron"
    FEATURE = "feature"


class BaseCriterion(str, enum.Enum):
    GROUP_LASSO = "group_lasso"
    EXCLUSIVE_SPARSITY = "exclusive_sparsity"
    GROUP_L12 = "group_l12"


class HierarchicalMode(str, enum.Enum):
    NONE = "none"
    SQUARED = "squared"


@dataclass
class PenaltyConfig:
    """Which penalty to apply and how strongly.

    ``strength`` is the balance coefficient applied by the trainer; the
    penalty functions themselves return the raw regularization value.
    ``include_classifier`` extends the penalty to the final K=1 layer,
    off by default.
    """

    grouping: GroupingScheme = GroupingScheme.FEATURE
    base: BaseCriterion = BaseCriterion.GROUP_L12
    hierarchical: HierarchicalMode = HierarchicalMode.SQUARED
    strength: float = 0.0
    include_classifier: bool = False

    def __post_init__(self):
        self.grouping = GroupingScheme(self.grouping)
        self.base = BaseCriterion(self.base)
        self.hierarchical = HierarchicalMode(self.hierarchical)
        if self.strength < 0:
            raise ConfigurationError("penalty strength must be nonnegative")

    def to_dict(self) -> dict:
        return {
            "grouping": self.grouping.value,
            "base": self.base.value,
            "hierarchical": self.hierarchical.value,
            "strength": self.strength,
            "include_classifier": self.include_classifier,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PenaltyConfig":
        return cls(**d)


@dataclass
class GroupSlice:
    """One group of a layer's weights, kept as its stack of K x K kernels."""

    layer_id: int
    group_index: int
    kernels: np.ndarray  # (n_kernels, K, K), float64

    @property
    def values(self) -> np.ndarray:
        return self.kernels.reshape(-1)


def group_slices(layer: ConvLayerSpec, scheme: GroupingScheme) -> list[GroupSlice]:
    """Partition a layer's weights into groups under the given scheme.

    Feature-wise gives in_channels groups of out_channels kernels each;
    neuron-wise gives out_channels groups of in_channels kernels each.
    """
    w = layer.weights.astype(np.float64)
    scheme = GroupingScheme(scheme)
    if scheme is GroupingScheme.FEATURE:
        return [
            GroupSlice(layer.layer_id, j, np.ascontiguousarray(w[:, j]))
            for j in range(layer.in_channels)
        ]
    return [
        GroupSlice(layer.layer_id, i, np.ascontiguousarray(w[i]))
        for i in range(layer.out_channels)
    ]


def _criterion_value(flat: np.ndarray, criterion: BaseCriterion) -> float:
    if criterion is BaseCriterion.GROUP_LASSO:
        return float(np.linalg.norm(flat))
    if criterion is BaseCriterion.EXCLUSIVE_SPARSITY:
        s = float(np.abs(flat).sum())
        return 0.5 * s * s
    # group L1/2: square root of the Euclidean norm
    return float(np.sqrt(np.linalg.norm(flat)))


def base_penalty(group: GroupSlice, criterion: BaseCriterion) -> float:
    """Base criterion applied to the whole (flattened) group."""
    return _criterion_value(group.values.astype(np.float64), BaseCriterion(criterion))


def hierarchical_penalty(group: GroupSlice, criterion: BaseCriterion) -> float:
    """Square of the summed per-kernel criterion values."""
    criterion = BaseCriterion(criterion)
    s = sum(_criterion_value(k.reshape(-1), criterion) for k in group.kernels.astype(np.float64))
    return float(s * s)


# ---------------------------------------------------------------------------
# vectorized core over bare 4-D tensors (used by both the public layer API
# and the training loop)

def _axes(grouping: GroupingScheme) -> tuple[int, int]:
    """(group_axis, kernel_axis) for a (out, in, K, K) tensor."""
    if GroupingScheme(grouping) is GroupingScheme.FEATURE:
        return 1, 0
    return 0, 1


def tensor_penalty(w: np.ndarray, grouping: GroupingScheme, base: BaseCriterion,
                   hierarchical: HierarchicalMode) -> float:
    """Penalty of a single 4-D weight tensor, summed over its groups."""
    w = np.asarray(w, dtype=np.float64)
    base = BaseCriterion(base)
    g_ax, k_ax = _axes(grouping)

    if HierarchicalMode(hierarchical) is HierarchicalMode.NONE:
        other = tuple(ax for ax in range(4) if ax != g_ax)
        if base is BaseCriterion.GROUP_LASSO:
            return float(np.sqrt((w * w).sum(axis=other)).sum())
        if base is BaseCriterion.EXCLUSIVE_SPARSITY:
            s = np.abs(w).sum(axis=other)
            return float(0.5 * (s * s).sum())
        norms = np.sqrt((w * w).sum(axis=other))
        return float(np.sqrt(norms).sum())

    # squared hierarchy: per-kernel criterion, sum over group members, square
    if base is BaseCriterion.GROUP_LASSO:
        per_kernel = np.sqrt((w * w).sum(axis=(2, 3)))
    elif base is BaseCriterion.EXCLUSIVE_SPARSITY:
        a = np.abs(w).sum(axis=(2, 3))
        per_kernel = 0.5 * a * a
    else:
        per_kernel = np.sqrt(np.sqrt((w * w).sum(axis=(2, 3))))
    sums = per_kernel.sum(axis=k_ax)
    return float((sums * sums).sum())


def _flat_gradient(w: np.ndarray, norms: np.ndarray, abssums: np.ndarray,
                   base: BaseCriterion) -> np.ndarray:
    """d r / d w for the base criterion, with norms/abssums pre-broadcast."""
    if base is BaseCriterion.GROUP_LASSO:
        with np.errstate(divide="ignore", invalid="ignore"):
            g = w / norms
        return np.where(norms > 0, g, 0.0)
    if base is BaseCriterion.EXCLUSIVE_SPARSITY:
        return abssums * np.sign(w)
    denom = 2.0 * norms ** 1.5 + _L12_FLOOR
    return np.where(norms > 0, w / denom, 0.0)


def tensor_gradient(w: np.ndarray, grouping: GroupingScheme, base: BaseCriterion,
                    hierarchical: HierarchicalMode) -> np.ndarray:
    """Gradient of ``tensor_penalty`` with respect to the weights (float64)."""
    w = np.asarray(w, dtype=np.float64)
    base = BaseCriterion(base)
    g_ax, k_ax = _axes(grouping)

    if HierarchicalMode(hierarchical) is HierarchicalMode.NONE:
        other = tuple(ax for ax in range(4) if ax != g_ax)
        norms = np.sqrt((w * w).sum(axis=other, keepdims=True))
        abssums = np.abs(w).sum(axis=other, keepdims=True)
        return _flat_gradient(w, norms, abssums, base)

    norms = np.sqrt((w * w).sum(axis=(2, 3), keepdims=True))
    abssums = np.abs(w).sum(axis=(2, 3), keepdims=True)
    if base is BaseCriterion.GROUP_LASSO:
        per_kernel = norms
    elif base is BaseCriterion.EXCLUSIVE_SPARSITY:
        per_kernel = 0.5 * abssums * abssums
    else:
        per_kernel = np.sqrt(norms)
    sums = per_kernel.sum(axis=k_ax, keepdims=True)
    kernel_grad = _flat_gradient(w, norms, abssums, base)
    return 2.0 * sums * kernel_grad


# ---------------------------------------------------------------------------
# layer / network level

def layer_penalty(layer: ConvLayerSpec, config: PenaltyConfig) -> float:
    """Sum of per-group penalties for one layer under the config."""
    return tensor_penalty(layer.weights, config.grouping, config.base, config.hierarchical)


def penalty_gradient(layer: ConvLayerSpec, config: PenaltyConfig) -> np.ndarray:
    """Gradient of ``layer_penalty`` w.r.t. the layer weights, same shape."""
    return tensor_gradient(layer.weights, config.grouping, config.base, config.hierarchical)


def network_penalty(net: NetworkSpec, config: PenaltyConfig) -> float:
    """Total penalty over conv layers (classifier and biases excluded).

    The strength coefficient is not applied here; the trainer multiplies it
    into the objective.
    """
    total = sum(layer_penalty(l, config) for l in net.conv_layers)
    if config.include_classifier:
        total += layer_penalty(net.classifier, config)
    return float(total)


def group_norms(layer: ConvLayerSpec, scheme: GroupingScheme) -> np.ndarray:
    """Euclidean norm of each group; handy for sparsity diagnostics."""
    w = layer.weights.astype(np.float64)
    g_ax, _ = _axes(scheme)
    other = tuple(ax for ax in range(4) if ax != g_ax)
    return np.sqrt((w * w).sum(axis=other))

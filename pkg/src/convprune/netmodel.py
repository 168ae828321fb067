"""Structural model of convolutional networks.

Everything in this module is backend-free shape bookkeeping: a network is an
ordered list of conv layer records (numpy weight tensors plus batch-norm
parameters, classifier last) wired together by a producer map saying which
layer feeds which. Mask application and channel surgery are pure functions
returning new specs; forward evaluation lives in ``backend``.

Conventions: conv weights have shape (out_channels, in_channels, K, K), and
output channel ``i`` of a layer always feeds input slice ``i`` of each of its
consumers. Fully connected layers are represented with K = 1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "ConfigurationError",
    "StructuralError",
    "BatchNormParams",
    "ConvLayerSpec",
    "NetworkSpec",
    "ChannelMask",
    "PruneResult",
    "build_vgg",
    "build_resnet",
    "apply_mask",
    "prunable_channels",
    "surgery",
    "reinitialize",
    "pruning_param_delta",
]


class ConfigurationError(ValueError):
    """Invalid architecture or experiment configuration."""


class StructuralError(ValueError):
    """Mask or surgery request inconsistent with the network structure."""


@dataclass
class BatchNormParams:
    """Per-output-channel batch normalization parameters and running stats."""

    scale: np.ndarray
    shift: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5

    @property
    def num_channels(self) -> int:
        return int(self.scale.shape[0])

    def copy(self) -> "BatchNormParams":
        return BatchNormParams(
            self.scale.copy(),
            self.shift.copy(),
            self.running_mean.copy(),
            self.running_var.copy(),
            self.eps,
        )

    def select(self, keep: np.ndarray) -> "BatchNormParams":
        return BatchNormParams(
            self.scale[keep].copy(),
            self.shift[keep].copy(),
            self.running_mean[keep].copy(),
            self.running_var[keep].copy(),
            self.eps,
        )


@dataclass
class ConvLayerSpec:
    """One convolutional (or K=1 classifier) layer.

    ``role`` is "conv" for regular layers and "classifier" for the final
    fully connected layer; only the classifier carries a bias vector.
    """

    layer_id: int
    out_channels: int
    in_channels: int
    kernel_size: int
    weights: np.ndarray
    has_batchnorm: bool = True
    bn_params: BatchNormParams | None = None
    stride: int = 1
    padding: int = 1
    bias: np.ndarray | None = None
    role: str = "conv"

    def validate(self) -> None:
        expected = (self.out_channels, self.in_channels, self.kernel_size, self.kernel_size)
        if tuple(self.weights.shape) != expected:
            raise StructuralError(
                f"layer {self.layer_id}: weight shape {self.weights.shape} != {expected}"
            )
        if self.has_batchnorm:
            if self.bn_params is None:
                raise StructuralError(f"layer {self.layer_id}: has_batchnorm but no bn_params")
            if self.bn_params.num_channels != self.out_channels:
                raise StructuralError(
                    f"layer {self.layer_id}: bn_params length {self.bn_params.num_channels} "
                    f"!= out_channels {self.out_channels}"
                )
        if self.role == "classifier" and self.kernel_size != 1:
            raise StructuralError("classifier layers must have kernel_size 1")

    def param_count(self) -> int:
        # running stats are buffers, not parameters
        n = int(self.weights.size)
        if self.has_batchnorm:
            n += 2 * self.out_channels
        if self.bias is not None:
            n += int(self.bias.size)
        return n

    def copy(self) -> "ConvLayerSpec":
        return ConvLayerSpec(
            layer_id=self.layer_id,
            out_channels=self.out_channels,
            in_channels=self.in_channels,
            kernel_size=self.kernel_size,
            weights=self.weights.copy(),
            has_batchnorm=self.has_batchnorm,
            bn_params=self.bn_params.copy() if self.bn_params is not None else None,
            stride=self.stride,
            padding=self.padding,
            bias=self.bias.copy() if self.bias is not None else None,
            role=self.role,
        )


@dataclass
class NetworkSpec:
    """A conv net as data: layers, wiring, and residual structure.

    ``producers`` maps each layer to the layer whose output it consumes
    (None for the network input). ``blocks`` lists residual basic blocks as
    (first_conv_id, second_conv_id, stride) triples; ``pool_after`` holds ids
    of layers followed by a 2x2 max pool. ``residual_groups`` are sets of
    layer ids whose output channel counts are tied by elementwise addition.
    """

    layers: list[ConvLayerSpec]
    image_channels: int
    image_size: int
    arch: dict
    producers: dict[int, int | None]
    residual_groups: list[frozenset[int]] = field(default_factory=list)
    pool_after: frozenset[int] = frozenset()
    blocks: list[tuple[int, int, int]] = field(default_factory=list)

    @property
    def conv_layers(self) -> list[ConvLayerSpec]:
        return [l for l in self.layers if l.role == "conv"]

    @property
    def classifier(self) -> ConvLayerSpec:
        last = self.layers[-1]
        if last.role != "classifier":
            raise StructuralError("last layer is not a classifier")
        return last

    @property
    def num_conv_layers(self) -> int:
        return len(self.conv_layers)

    @property
    def total_conv_channels(self) -> int:
        return sum(l.out_channels for l in self.conv_layers)

    @property
    def consumers(self) -> dict[int, list[int]]:
        """Inverse of ``producers``: layer id -> ids of layers reading its output."""
        out: dict[int, list[int]] = {l.layer_id: [] for l in self.layers}
        for lid, prod in self.producers.items():
            if prod is not None:
                out[prod].append(lid)
        return out

    def layer(self, layer_id: int) -> ConvLayerSpec:
        for l in self.layers:
            if l.layer_id == layer_id:
                return l
        raise StructuralError(f"no layer with id {layer_id}")

    def channel_consumers(self, layer_id: int, channel: int) -> list[tuple[int, int]]:
        """Consumers of one output channel as (layer_id, input_slice) pairs."""
        return [(m, channel) for m in self.consumers[layer_id]]

    def param_count(self) -> int:
        return sum(l.param_count() for l in self.layers)

    def copy(self) -> "NetworkSpec":
        return NetworkSpec(
            layers=[l.copy() for l in self.layers],
            image_channels=self.image_channels,
            image_size=self.image_size,
            arch=dict(self.arch),
            producers=dict(self.producers),
            residual_groups=list(self.residual_groups),
            pool_after=frozenset(self.pool_after),
            blocks=list(self.blocks),
        )

    def validate(self) -> None:
        for l in self.layers:
            l.validate()
        if self.layers[-1].role != "classifier":
            raise StructuralError("network must end in a classifier layer")
        consumers = self.consumers
        for l in self.conv_layers:
            if not consumers[l.layer_id]:
                raise StructuralError(f"conv layer {l.layer_id} has no consumer")
        # producer/consumer channel counts must line up
        for lid, prod in self.producers.items():
            layer = self.layer(lid)
            if prod is None:
                if layer.in_channels != self.image_channels:
                    raise StructuralError(
                        f"layer {lid} reads the image but in_channels != image_channels"
                    )
            elif layer.in_channels != self.layer(prod).out_channels:
                raise StructuralError(
                    f"layer {lid} in_channels {layer.in_channels} != "
                    f"producer {prod} out_channels {self.layer(prod).out_channels}"
                )
        for group in self.residual_groups:
            counts = {self.layer(lid).out_channels for lid in group}
            if len(counts) > 1:
                raise StructuralError(f"residual group {sorted(group)} has unequal widths {counts}")


@dataclass
class ChannelMask:
    """Binary keep/drop vector per conv layer; 1 keeps the channel."""

    bits: dict[int, np.ndarray]

    @classmethod
    def all_ones(cls, net: NetworkSpec) -> "ChannelMask":
        return cls({l.layer_id: np.ones(l.out_channels, dtype=np.uint8) for l in net.conv_layers})

    def copy(self) -> "ChannelMask":
        return ChannelMask({lid: v.copy() for lid, v in self.bits.items()})

    @property
    def total_length(self) -> int:
        return sum(int(v.shape[0]) for v in self.bits.values())

    def zeros_count(self) -> int:
        return int(sum(int((v == 0).sum()) for v in self.bits.values()))

    def is_masked(self, layer_id: int, channel: int) -> bool:
        return self.bits[layer_id][channel] == 0

    def set_zero(self, layer_id: int, channel: int) -> None:
        if layer_id not in self.bits:
            raise StructuralError(f"mask has no layer {layer_id}")
        if not 0 <= channel < self.bits[layer_id].shape[0]:
            raise StructuralError(f"channel {channel} out of range for layer {layer_id}")
        self.bits[layer_id][channel] = 0

    def with_zero(self, layer_id: int, channel: int) -> "ChannelMask":
        m = self.copy()
        m.set_zero(layer_id, channel)
        return m

    def masked_channels(self) -> list[tuple[int, int]]:
        out = []
        for lid in sorted(self.bits):
            for c in np.flatnonzero(self.bits[lid] == 0):
                out.append((lid, int(c)))
        return out

    def unmasked_count(self, layer_id: int) -> int:
        return int(self.bits[layer_id].sum())

    def validate_against(self, net: NetworkSpec) -> None:
        conv_ids = {l.layer_id: l.out_channels for l in net.conv_layers}
        if set(self.bits) != set(conv_ids):
            raise StructuralError("mask layer ids do not match the network's conv layers")
        for lid, v in self.bits.items():
            if v.shape != (conv_ids[lid],):
                raise StructuralError(
                    f"mask for layer {lid} has length {v.shape[0]}, expected {conv_ids[lid]}"
                )
            if not np.isin(v, (0, 1)).all():
                raise StructuralError(f"mask for layer {lid} has non-binary entries")


@dataclass
class PruneResult:
    """Outcome of surgery: the compact net plus provenance."""

    net: NetworkSpec
    mask: ChannelMask
    params_before: int
    params_after: int
    removed_per_layer: dict[int, int]
    scores: list = field(default_factory=list)

    @property
    def param_reduction(self) -> float:
        return 1.0 - self.params_after / self.params_before


# ---------------------------------------------------------------------------
# builders

def _he_normal(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    return (rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)).astype(np.float32)


def _fresh_bn(channels: int) -> BatchNormParams:
    return BatchNormParams(
        scale=np.ones(channels, dtype=np.float32),
        shift=np.zeros(channels, dtype=np.float32),
        running_mean=np.zeros(channels, dtype=np.float32),
        running_var=np.ones(channels, dtype=np.float32),
    )


def _make_classifier(rng: np.random.Generator, layer_id: int, in_features: int,
                     num_classes: int) -> ConvLayerSpec:
    bound = 1.0 / math.sqrt(in_features)
    w = rng.uniform(-bound, bound, size=(num_classes, in_features, 1, 1)).astype(np.float32)
    b = rng.uniform(-bound, bound, size=num_classes).astype(np.float32)
    return ConvLayerSpec(
        layer_id=layer_id,
        out_channels=num_classes,
        in_channels=in_features,
        kernel_size=1,
        weights=w,
        has_batchnorm=False,
        bn_params=None,
        stride=1,
        padding=0,
        bias=b,
        role="classifier",
    )


def _split_stages(n_layers: int, max_stages: int = 5) -> list[int]:
    """Contiguous stage sizes, as even as possible with earlier stages smaller."""
    k = min(max_stages, n_layers)
    base, rem = divmod(n_layers, k)
    return [base] * (k - rem) + [base + 1] * rem


def build_vgg(conv_layer_count: int, num_classes: int, base_width: int, *,
              image_channels: int = 3, image_size: int = 32, seed: int = 0) -> NetworkSpec:
    """Plain chain of conv+BN layers with stage-wise width doubling.

    Layers are split into up to five contiguous stages; the width doubles per
    stage (capped at 8x base_width) and a 2x2 max pool follows each stage.
    A single fully connected classifier, fed by global average pooling, ends
    the network.
    """
    if conv_layer_count < 2:
        raise ConfigurationError("need at least 2 conv layers")
    if base_width < 1:
        raise ConfigurationError("base_width must be >= 1")
    if num_classes < 2:
        raise ConfigurationError("need at least 2 classes")

    rng = np.random.default_rng(seed)
    stages = _split_stages(conv_layer_count)
    widths: list[int] = []
    pool_after = set()
    lid = 0
    for s, size in enumerate(stages):
        width = base_width * 2 ** min(s, 3)
        widths.extend([width] * size)
        lid += size
        pool_after.add(lid - 1)

    layers: list[ConvLayerSpec] = []
    producers: dict[int, int | None] = {}
    in_ch = image_channels
    for lid, width in enumerate(widths):
        fan_in = in_ch * 9
        layers.append(ConvLayerSpec(
            layer_id=lid,
            out_channels=width,
            in_channels=in_ch,
            kernel_size=3,
            weights=_he_normal(rng, (width, in_ch, 3, 3), fan_in),
            has_batchnorm=True,
            bn_params=_fresh_bn(width),
            stride=1,
            padding=1,
        ))
        producers[lid] = None if lid == 0 else lid - 1
        in_ch = width

    fc_id = conv_layer_count
    layers.append(_make_classifier(rng, fc_id, widths[-1], num_classes))
    producers[fc_id] = conv_layer_count - 1

    net = NetworkSpec(
        layers=layers,
        image_channels=image_channels,
        image_size=image_size,
        arch={
            "family": "plain",
            "conv_layers": conv_layer_count,
            "num_classes": num_classes,
            "base_width": base_width,
            "widths": widths,
        },
        producers=producers,
        residual_groups=[],
        pool_after=frozenset(pool_after),
        blocks=[],
    )
    net.validate()
    return net


def build_resnet(conv_layer_count: int, num_classes: int, *, base_width: int = 16,
                 image_channels: int = 3, image_size: int = 32, seed: int = 0) -> NetworkSpec:
    """Residual network of basic blocks in three stages (widths x1, x2, x4).

    ``conv_layer_count`` counts the stem plus two convs per block, so it must
    be 6n+1 for n blocks per stage (e.g. 19 gives the classic 3-stage,
    3-blocks-per-stage layout). Stage transitions use stride-2 convolution
    with a zero-padded identity shortcut.
    """
    if conv_layer_count < 7 or (conv_layer_count - 1) % 6 != 0:
        raise ConfigurationError(
            f"conv_layer_count must be 6n+1 with n >= 1, got {conv_layer_count}"
        )
    if num_classes < 2:
        raise ConfigurationError("need at least 2 classes")

    n_blocks = (conv_layer_count - 1) // 6
    widths = [base_width, 2 * base_width, 4 * base_width]
    rng = np.random.default_rng(seed)

    layers: list[ConvLayerSpec] = []
    producers: dict[int, int | None] = {}
    blocks: list[tuple[int, int, int]] = []
    residual_groups: list[frozenset[int]] = []

    def conv(lid, out_ch, in_ch, stride):
        return ConvLayerSpec(
            layer_id=lid,
            out_channels=out_ch,
            in_channels=in_ch,
            kernel_size=3,
            weights=_he_normal(rng, (out_ch, in_ch, 3, 3), in_ch * 9),
            has_batchnorm=True,
            bn_params=_fresh_bn(out_ch),
            stride=stride,
            padding=1,
        )

    layers.append(conv(0, widths[0], image_channels, 1))
    producers[0] = None
    lid = 1
    prev_end = 0
    for s, width in enumerate(widths):
        group = {prev_end} if s == 0 else set()
        for b in range(n_blocks):
            stride = 2 if (s > 0 and b == 0) else 1
            a_id, b_id = lid, lid + 1
            layers.append(conv(a_id, width, layers[-1].out_channels, stride))
            producers[a_id] = prev_end
            layers.append(conv(b_id, width, width, 1))
            producers[b_id] = a_id
            blocks.append((a_id, b_id, stride))
            group.add(b_id)
            prev_end = b_id
            lid += 2
        residual_groups.append(frozenset(group))

    fc_id = lid
    layers.append(_make_classifier(rng, fc_id, widths[-1], num_classes))
    producers[fc_id] = prev_end

    net = NetworkSpec(
        layers=layers,
        image_channels=image_channels,
        image_size=image_size,
        arch={
            "family": "resnet",
            "conv_layers": conv_layer_count,
            "num_classes": num_classes,
            "base_width": base_width,
            "widths": widths,
            "blocks_per_stage": n_blocks,
        },
        producers=producers,
        residual_groups=residual_groups,
        pool_after=frozenset(),
        blocks=blocks,
    )
    net.validate()
    return net


def reinitialize(net: NetworkSpec, seed: int) -> NetworkSpec:
    """Fresh random weights for an existing (possibly pruned) architecture."""
    rng = np.random.default_rng(seed)
    out = net.copy()
    for l in out.layers:
        if l.role == "classifier":
            bound = 1.0 / math.sqrt(l.in_channels)
            l.weights = rng.uniform(-bound, bound, size=l.weights.shape).astype(np.float32)
            l.bias = rng.uniform(-bound, bound, size=l.out_channels).astype(np.float32)
        else:
            fan_in = l.in_channels * l.kernel_size ** 2
            l.weights = _he_normal(rng, l.weights.shape, fan_in)
            if l.has_batchnorm:
                l.bn_params = _fresh_bn(l.out_channels)
    return out


# ---------------------------------------------------------------------------
# masking and surgery

def prunable_channels(net: NetworkSpec) -> list[tuple[int, int]]:
    """All conv output channels that may be masked and removed.

    Excluded: the final conv layer (its width is the classifier input) and
    every layer whose output participates in an elementwise shortcut
    addition, where removal would break the shape constraint.
    """
    conv = net.conv_layers
    excluded = {conv[-1].layer_id}
    for group in net.residual_groups:
        excluded |= set(group)
    return [
        (l.layer_id, c)
        for l in conv
        if l.layer_id not in excluded
        for c in range(l.out_channels)
    ]


def apply_mask(net: NetworkSpec, mask: ChannelMask) -> NetworkSpec:
    """Zero out masked filters (and their BN scale/shift) without resizing."""
    mask.validate_against(net)
    out = net.copy()
    for layer in out.conv_layers:
        off = mask.bits[layer.layer_id] == 0
        if not off.any():
            continue
        layer.weights[off] = 0.0
        if layer.has_batchnorm:
            layer.bn_params.scale[off] = 0.0
            layer.bn_params.shift[off] = 0.0
    return out


def surgery(net: NetworkSpec, mask: ChannelMask) -> PruneResult:
    """Physically remove masked channels.

    For each masked channel (l, i) the filter i of layer l is deleted, the
    input slice i of every consumer's kernels is deleted, and the BN record
    for channel i goes with the filter. Raises if a non-prunable channel is
    masked or if any layer would end up with zero channels.
    """
    mask.validate_against(net)
    allowed = set(prunable_channels(net))
    for lc in mask.masked_channels():
        if lc not in allowed:
            raise StructuralError(f"channel {lc} is not prunable")

    keep: dict[int, np.ndarray] = {}
    removed: dict[int, int] = {}
    for layer in net.conv_layers:
        k = mask.bits[layer.layer_id].astype(bool)
        if int(k.sum()) == 0:
            raise StructuralError(f"layer {layer.layer_id} would reach 0 channels")
        keep[layer.layer_id] = k
        removed[layer.layer_id] = int((~k).sum())

    out = net.copy()
    for layer in out.layers:
        keep_out = keep.get(layer.layer_id, np.ones(layer.out_channels, dtype=bool))
        prod = net.producers[layer.layer_id]
        if prod is None:
            keep_in = np.ones(layer.in_channels, dtype=bool)
        else:
            keep_in = keep.get(prod, np.ones(layer.in_channels, dtype=bool))
        layer.weights = np.ascontiguousarray(layer.weights[keep_out][:, keep_in])
        layer.out_channels = int(keep_out.sum())
        layer.in_channels = int(keep_in.sum())
        if layer.has_batchnorm:
            layer.bn_params = layer.bn_params.select(keep_out)
        if layer.bias is not None:
            layer.bias = layer.bias[keep_out].copy()
    out.validate()

    return PruneResult(
        net=out,
        mask=mask.copy(),
        params_before=net.param_count(),
        params_after=out.param_count(),
        removed_per_layer=removed,
    )


def pruning_param_delta(net: NetworkSpec, mask: ChannelMask) -> int:
    """Parameter count removed by surgery, attributed channel by channel.

    Each masked channel accounts for its own filter at the layer's original
    input width, one kernel slice per surviving consumer filter, and its two
    BN parameters. Summed over channels this matches params_before minus
    params_after exactly, also when producer and consumer are masked
    together.
    """
    mask.validate_against(net)
    zeros = {l.layer_id: int((mask.bits[l.layer_id] == 0).sum()) for l in net.conv_layers}
    consumers = net.consumers
    delta = 0
    for layer in net.conv_layers:
        a = zeros[layer.layer_id]
        if a == 0:
            continue
        own = layer.in_channels * layer.kernel_size ** 2 + (2 if layer.has_batchnorm else 0)
        downstream = 0
        for mid in consumers[layer.layer_id]:
            m = net.layer(mid)
            surviving = m.out_channels - zeros.get(mid, 0)
            downstream += surviving * m.kernel_size ** 2
        delta += a * (own + downstream)
    return delta

"""Self-describing checkpoint container for network specs.

A checkpoint is an npz archive holding one ``layout`` entry (a JSON string
describing the architecture, wiring, and user metadata) plus raw arrays per
layer: weights, BN parameters and running stats, optional bias, optional
channel mask. Arrays round-trip bit-exactly, and the zip members are written
with fixed timestamps so identical contents produce identical files.
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import dataclass

import numpy as np

from .netmodel import (
    BatchNormParams,
    ChannelMask,
    ConvLayerSpec,
    NetworkSpec,
    StructuralError,
)

FORMAT_NAME = "convprune-checkpoint"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    net: NetworkSpec
    mask: ChannelMask | None
    metadata: dict


def _write_npz_deterministic(path, arrays: dict[str, np.ndarray]) -> None:
    # plain np.savez stamps zip members with the current time; fix it for
    # byte-identical artifacts under replay
    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.asanyarray(arrays[name]), allow_pickle=False)
            info = zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0))
            zf.writestr(info, buf.getvalue())


def save_checkpoint(path, net: NetworkSpec, mask: ChannelMask | None = None,
                    metadata: dict | None = None) -> None:
    layout = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "image_channels": net.image_channels,
        "image_size": net.image_size,
        "arch": net.arch,
        "producers": {str(k): v for k, v in net.producers.items()},
        "residual_groups": [sorted(g) for g in net.residual_groups],
        "pool_after": sorted(net.pool_after),
        "blocks": [list(b) for b in net.blocks],
        "layers": [
            {
                "layer_id": l.layer_id,
                "role": l.role,
                "out_channels": l.out_channels,
                "in_channels": l.in_channels,
                "kernel_size": l.kernel_size,
                "stride": l.stride,
                "padding": l.padding,
                "has_batchnorm": l.has_batchnorm,
                "has_bias": l.bias is not None,
                "bn_eps": l.bn_params.eps if l.bn_params is not None else None,
            }
            for l in net.layers
        ],
        "has_mask": mask is not None,
        "metadata": metadata or {},
    }

    arrays: dict[str, np.ndarray] = {"layout": np.array(json.dumps(layout, sort_keys=True))}
    for l in net.layers:
        arrays[f"w{l.layer_id}"] = l.weights
        if l.has_batchnorm:
            bn = l.bn_params
            arrays[f"bn_scale{l.layer_id}"] = bn.scale
            arrays[f"bn_shift{l.layer_id}"] = bn.shift
            arrays[f"bn_mean{l.layer_id}"] = bn.running_mean
            arrays[f"bn_var{l.layer_id}"] = bn.running_var
        if l.bias is not None:
            arrays[f"bias{l.layer_id}"] = l.bias
    if mask is not None:
        mask.validate_against(net)
        for lid, bits in mask.bits.items():
            arrays[f"mask{lid}"] = bits
    _write_npz_deterministic(path, arrays)


def load_checkpoint(path) -> Checkpoint:
    with np.load(path, allow_pickle=False) as data:
        try:
            layout = json.loads(str(data["layout"]))
        except KeyError:
            raise StructuralError(f"{path} is not a checkpoint (no layout entry)")
        if layout.get("format") != FORMAT_NAME:
            raise StructuralError(f"{path}: unexpected container format")

        layers = []
        for rec in layout["layers"]:
            lid = rec["layer_id"]
            bn = None
            if rec["has_batchnorm"]:
                bn = BatchNormParams(
                    scale=data[f"bn_scale{lid}"],
                    shift=data[f"bn_shift{lid}"],
                    running_mean=data[f"bn_mean{lid}"],
                    running_var=data[f"bn_var{lid}"],
                    eps=rec["bn_eps"],
                )
            layers.append(ConvLayerSpec(
                layer_id=lid,
                out_channels=rec["out_channels"],
                in_channels=rec["in_channels"],
                kernel_size=rec["kernel_size"],
                weights=data[f"w{lid}"],
                has_batchnorm=rec["has_batchnorm"],
                bn_params=bn,
                stride=rec["stride"],
                padding=rec["padding"],
                bias=data[f"bias{lid}"] if rec["has_bias"] else None,
                role=rec["role"],
            ))

        net = NetworkSpec(
            layers=layers,
            image_channels=layout["image_channels"],
            image_size=layout["image_size"],
            arch=layout["arch"],
            producers={int(k): v for k, v in layout["producers"].items()},
            residual_groups=[frozenset(g) for g in layout["residual_groups"]],
            pool_after=frozenset(layout["pool_after"]),
            blocks=[tuple(b) for b in layout["blocks"]],
        )
        net.validate()

        mask = None
        if layout["has_mask"]:
            mask = ChannelMask({l.layer_id: data[f"mask{l.layer_id}"] for l in net.conv_layers})
            mask.validate_against(net)

    return Checkpoint(net=net, mask=mask, metadata=layout["metadata"])

"""Torch-backed execution engine for network specs.

``TorchBackend`` owns a torch module mirroring a ``NetworkSpec``: it loads
the spec's weights, evaluates forward passes and cross-entropy, exposes the
parameters to an optimizer, and exports the (possibly updated) weights back
into a fresh spec. Evaluation helpers run the module in eval mode under
no_grad; the training loop in ``trainer`` drives train mode itself.

Runs single-threaded on CPU so that identical seeds give bitwise-identical
trajectories.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .netmodel import NetworkSpec

__all__ = ["TorchBackend", "SpecModule"]


def _shortcut(x: torch.Tensor, stride: int, out_channels: int) -> torch.Tensor:
    """Identity shortcut: spatial subsampling plus zero channel padding."""
    if stride > 1:
        x = x[:, :, ::stride, ::stride]
    pad = out_channels - x.shape[1]
    if pad < 0:
        raise RuntimeError("shortcut source wider than block output")
    if pad > 0:
        x = F.pad(x, (0, 0, 0, 0, 0, pad))
    return x


class SpecModule(nn.Module):
    """Torch module assembled from a NetworkSpec's layers and topology."""

    def __init__(self, spec: NetworkSpec):
        super().__init__()
        self.family = spec.arch["family"]
        self.conv_ids = [l.layer_id for l in spec.conv_layers]
        self.pool_after = set(spec.pool_after)
        self.blocks = list(spec.blocks)

        convs = {}
        bns = {}
        for l in spec.conv_layers:
            convs[str(l.layer_id)] = nn.Conv2d(
                l.in_channels, l.out_channels, l.kernel_size,
                stride=l.stride, padding=l.padding, bias=False,
            )
            if l.has_batchnorm:
                bns[str(l.layer_id)] = nn.BatchNorm2d(l.out_channels, eps=l.bn_params.eps)
        self.convs = nn.ModuleDict(convs)
        self.bns = nn.ModuleDict(bns)
        fc = spec.classifier
        self.fc = nn.Linear(fc.in_channels, fc.out_channels, bias=fc.bias is not None)

        self.load_spec_weights(spec)

    def load_spec_weights(self, spec: NetworkSpec) -> None:
        with torch.no_grad():
            for l in spec.conv_layers:
                key = str(l.layer_id)
                self.convs[key].weight.copy_(torch.from_numpy(np.ascontiguousarray(l.weights)))
                if l.has_batchnorm:
                    bn = self.bns[key]
                    bn.weight.copy_(torch.from_numpy(l.bn_params.scale))
                    bn.bias.copy_(torch.from_numpy(l.bn_params.shift))
                    bn.running_mean.copy_(torch.from_numpy(l.bn_params.running_mean))
                    bn.running_var.copy_(torch.from_numpy(l.bn_params.running_var))
            fc = spec.classifier
            self.fc.weight.copy_(torch.from_numpy(fc.weights[:, :, 0, 0].copy()))
            if fc.bias is not None:
                self.fc.bias.copy_(torch.from_numpy(fc.bias))

    def _stack(self, x: torch.Tensor, layer_id: int) -> torch.Tensor:
        key = str(layer_id)
        x = self.convs[key](x)
        if key in self.bns:
            x = self.bns[key](x)
        return x

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.family == "resnet":
            x = F.relu(self._stack(x, self.conv_ids[0]))
            for a_id, b_id, stride in self.blocks:
                identity = x
                x = F.relu(self._stack(x, a_id))
                x = self._stack(x, b_id)
                x = F.relu(x + _shortcut(identity, stride, x.shape[1]))
        else:
            for lid in self.conv_ids:
                x = F.relu(self._stack(x, lid))
                if lid in self.pool_after and x.shape[-1] >= 2:
                    x = F.max_pool2d(x, 2)
        x = F.adaptive_avg_pool2d(x, 1).flatten(1)
        return self.fc(x)


class TorchBackend:
    """Execution contract implementation on CPU torch."""

    def __init__(self, spec: NetworkSpec):
        torch.set_num_threads(1)
        self._template = spec.copy()
        self.module = SpecModule(spec)

    # -- measurement (eval mode) ------------------------------------------

    def forward(self, x: np.ndarray) -> np.ndarray:
        self.module.eval()
        with torch.no_grad():
            return self.module(torch.from_numpy(np.ascontiguousarray(x, dtype=np.float32))).numpy()

    def cross_entropy(self, x: np.ndarray, y: np.ndarray, batch_size: int = 512) -> float:
        """Mean cross-entropy over the given samples."""
        self.module.eval()
        total = 0.0
        with torch.no_grad():
            for lo in range(0, len(x), batch_size):
                xb = torch.from_numpy(np.ascontiguousarray(x[lo:lo + batch_size], dtype=np.float32))
                yb = torch.from_numpy(np.ascontiguousarray(y[lo:lo + batch_size], dtype=np.int64))
                total += float(F.cross_entropy(self.module(xb), yb, reduction="sum"))
        return total / len(x)

    def accuracy(self, x: np.ndarray, y: np.ndarray, batch_size: int = 512) -> float:
        """Top-1 accuracy in percent."""
        self.module.eval()
        correct = 0
        with torch.no_grad():
            for lo in range(0, len(x), batch_size):
                xb = torch.from_numpy(np.ascontiguousarray(x[lo:lo + batch_size], dtype=np.float32))
                pred = self.module(xb).argmax(dim=1).numpy()
                correct += int((pred == y[lo:lo + batch_size]).sum())
        return 100.0 * correct / len(x)

    # -- parameter access ---------------------------------------------------

    def conv_weight(self, layer_id: int) -> torch.Tensor:
        return self.convs_param(layer_id)

    def convs_param(self, layer_id: int) -> torch.Tensor:
        return self.module.convs[str(layer_id)].weight

    def conv_weight_numpy(self, layer_id: int) -> np.ndarray:
        return self.convs_param(layer_id).detach().numpy()

    def classifier_weight(self) -> torch.Tensor:
        return self.module.fc.weight

    def zero_channel(self, layer_id: int, channel: int) -> dict:
        """Zero one filter (and its BN scale/shift); returns state to restore."""
        key = str(layer_id)
        saved = {"w": self.module.convs[key].weight[channel].detach().clone()}
        with torch.no_grad():
            self.module.convs[key].weight[channel] = 0.0
            if key in self.module.bns:
                bn = self.module.bns[key]
                saved["scale"] = bn.weight[channel].detach().clone()
                saved["shift"] = bn.bias[channel].detach().clone()
                bn.weight[channel] = 0.0
                bn.bias[channel] = 0.0
        return saved

    def restore_channel(self, layer_id: int, channel: int, saved: dict) -> None:
        key = str(layer_id)
        with torch.no_grad():
            self.module.convs[key].weight[channel] = saved["w"]
            if "scale" in saved:
                self.module.bns[key].weight[channel] = saved["scale"]
                self.module.bns[key].bias[channel] = saved["shift"]

    def export_spec(self) -> NetworkSpec:
        """Current weights and BN stats as a fresh NetworkSpec."""
        out = self._template.copy()
        for l in out.conv_layers:
            key = str(l.layer_id)
            l.weights = self.module.convs[key].weight.detach().numpy().astype(np.float32).copy()
            if l.has_batchnorm:
                bn = self.module.bns[key]
                l.bn_params.scale = bn.weight.detach().numpy().astype(np.float32).copy()
                l.bn_params.shift = bn.bias.detach().numpy().astype(np.float32).copy()
                l.bn_params.running_mean = bn.running_mean.detach().numpy().astype(np.float32).copy()
                l.bn_params.running_var = bn.running_var.detach().numpy().astype(np.float32).copy()
        fc = out.classifier
        fc.weights = self.module.fc.weight.detach().numpy().astype(np.float32)[:, :, None, None].copy()
        if fc.bias is not None:
            fc.bias = self.module.fc.bias.detach().numpy().astype(np.float32).copy()
        return out

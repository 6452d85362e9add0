"""Layer modules built on :mod:`isgan.nn.functional`.

Every module is a ``torch.nn.Module`` so the parameter store is the usual
``named_parameters()`` / ``named_buffers()`` view.
"""
from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Any

import torch
from torch import nn

from ..errors import ShapeMismatchError
from . import functional as F

LEAKY_SLOPE = 0.2
BN_EPS = 1e-5
BN_MOMENTUM = 0.9


class Conv2d(nn.Module):
    def __init__(self, in_channels, out_channels, kernel_size, stride=1, padding=None, bias=True):
        super().__init__()
        if padding is None:
            padding = kernel_size // 2
        self.in_channels, self.out_channels = in_channels, out_channels
        self.kernel_size, self.stride, self.padding = kernel_size, stride, padding
        self.weight = nn.Parameter(torch.empty(out_channels, in_channels, kernel_size, kernel_size))
        self.bias = nn.Parameter(torch.zeros(out_channels)) if bias else None
        nn.init.xavier_uniform_(self.weight)

    def forward(self, x):
        return F.conv2d(x, self.weight, self.bias, self.stride, self.padding)

    def extra_repr(self):
        return (f"{self.in_channels}, {self.out_channels}, k={self.kernel_size}, "
                f"stride={self.stride}, pad={self.padding}")


class BatchNorm2d(nn.Module):
    def __init__(self, channels, eps=BN_EPS, momentum=BN_MOMENTUM):
        super().__init__()
        self.eps, self.momentum = eps, momentum
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))
        self.register_buffer("running_mean", torch.zeros(channels))
        self.register_buffer("running_var", torch.ones(channels))

    def forward(self, x):
        return F.batch_norm(x, self.weight, self.bias, self.running_mean, self.running_var,
                            self.training, self.momentum, self.eps)


class Activation(nn.Module):
    def __init__(self, kind, slope=LEAKY_SLOPE):
        super().__init__()
        if kind not in F.ACTIVATIONS:
            raise ValueError(f"unknown activation {kind!r}")
        self.kind, self.slope = kind, slope

    def forward(self, x):
        return F.activation(x, self.kind, self.slope)

    def extra_repr(self):
        return self.kind


class AvgPool(nn.Module):
    def __init__(self, kernel=2, stride=2, padding=0):
        super().__init__()
        self.kernel, self.stride, self.padding = kernel, stride, padding

    def forward(self, x):
        return F.avg_pool(x, self.kernel, self.stride, self.padding)


class SPP(nn.Module):
    def __init__(self, levels=(1, 2, 4)):
        super().__init__()
        self.levels = tuple(levels)

    def features(self, channels):
        return channels * sum(g * g for g in self.levels)

    def forward(self, x):
        return F.spp(x, self.levels)


class Linear(nn.Module):
    def __init__(self, in_features, out_features, bias=True):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(out_features, in_features))
        self.bias = nn.Parameter(torch.zeros(out_features)) if bias else None
        nn.init.xavier_uniform_(self.weight)

    def forward(self, x):
        return F.fully_connected(x, self.weight, self.bias)


class AffineRescale(nn.Module):
    def __init__(self, scale=0.5, offset=0.5):
        super().__init__()
        self.scale, self.offset = scale, offset

    def forward(self, x):
        return F.affine_rescale(x, self.scale, self.offset)


class ConvBlock(nn.Sequential):
    """Conv, optional BN, optional activation, optional 2x2 average pool."""


    def __init__(self, in_channels, out_channels, kernel_size=3, stride=1, bn=True,
                 act="leaky_relu", pool=False):
        # a bias in front of BN is cancelled by the mean subtraction
        layers = [("conv", Conv2d(in_channels, out_channels, kernel_size, stride, bias=not bn))]
        if bn:
            layers.append(("bn", BatchNorm2d(out_channels)))
        if act:
            layers.append(("act", Activation(act)))
        if pool:
            layers.append(("pool", AvgPool(2, 2)))
        super().__init__(OrderedDict(layers))


class InceptionResidual(nn.Module):
    """Four-branch inception module with a residual shortcut.

    Branches (each ``out_channels // 4`` wide): 1x1; 1x1 -> 3x3; 1x1 -> 3x3 -> 3x3;
    3x3 average pool -> 1x1.  Every conv is followed by BN and LeakyReLU.  The
    shortcut is the identity when channel counts agree, otherwise a 1x1 conv + BN.
    """

    def __init__(self, in_channels, out_channels):
        super().__init__()
        if out_channels % 4:
            raise ShapeMismatchError(f"InceptionResidual needs out_channels divisible by 4, got {out_channels}")
        q = out_channels // 4
        self.in_channels, self.out_channels = in_channels, out_channels
        self.branch1 = ConvBlock(in_channels, q, 1)
        self.branch3 = nn.Sequential(ConvBlock(in_channels, q, 1), ConvBlock(q, q, 3))
        self.branch5 = nn.Sequential(ConvBlock(in_channels, q, 1), ConvBlock(q, q, 3), ConvBlock(q, q, 3))
        self.branch_pool = nn.Sequential(AvgPool(3, 1, 1), ConvBlock(in_channels, q, 1))
        if in_channels != out_channels:
            self.shortcut = ConvBlock(in_channels, out_channels, 1, act=None)
        else:
            self.shortcut = nn.Identity()

    def branches(self):
        return [self.branch1, self.branch3, self.branch5, self.branch_pool]

    def forward(self, x):
        out = torch.cat([b(x) for b in self.branches()], dim=1)
        return out + self.shortcut(x)


def xavier_init_(module: nn.Module, generator: torch.Generator) -> nn.Module:
    """Re-draw every conv/linear weight from ``generator`` (Glorot uniform), zero biases,
    reset BN to unit scale / zero shift with fresh running statistics."""
    for sub in module.modules():
        if isinstance(sub, (Conv2d, Linear)):
            w = sub.weight
            fan_out, fan_in = w.shape[0], w.shape[1]
            receptive = w[0, 0].numel() if w.dim() > 2 else 1
            bound = math.sqrt(6.0 / ((fan_in + fan_out) * receptive))
            with torch.no_grad():
                w.copy_(torch.rand(w.shape, generator=generator, dtype=torch.float64)
                        .mul(2 * bound).sub(bound).to(w.dtype))
                if sub.bias is not None:
                    sub.bias.zero_()
        elif isinstance(sub, BatchNorm2d):
            with torch.no_grad():
                sub.weight.fill_(1.0)
                sub.bias.zero_()
                sub.running_mean.zero_()
                sub.running_var.fill_(1.0)
    return module


@dataclass
class LayerSpec:
    """Declarative description of one layer, used by the gradient harness."""

    kind: str
    params: dict[str, Any] = field(default_factory=dict)

    KINDS = ("conv", "batchnorm", "leaky_relu", "tanh", "sigmoid", "avgpool", "spp",
             "fully_connected", "inception_residual", "affine_rescale")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind == "inception_residual" and self.params.get("out_channels", 4) % 4:
            raise ShapeMismatchError("inception_residual out_channels must be divisible by 4")

    def build(self) -> nn.Module:
        p = dict(self.params)
        if self.kind == "conv":
            return Conv2d(p["in_channels"], p["out_channels"], p.get("kernel_size", 3),
                          p.get("stride", 1), p.get("padding"))
        if self.kind == "batchnorm":
            return BatchNorm2d(p["channels"], p.get("eps", BN_EPS), p.get("momentum", BN_MOMENTUM))
        if self.kind in ("leaky_relu", "tanh", "sigmoid"):
            return Activation(self.kind, p.get("slope", LEAKY_SLOPE))
        if self.kind == "avgpool":
            return AvgPool(p.get("kernel", 2), p.get("stride", 2), p.get("padding", 0))
        if self.kind == "spp":
            return SPP(p.get("levels", (1, 2, 4)))
        if self.kind == "fully_connected":
            return Linear(p["in_features"], p["out_features"])
        if self.kind == "inception_residual":
            return InceptionResidual(p["in_channels"], p["out_channels"])
        return AffineRescale(p.get("scale", 0.5), p.get("offset", 0.5))

    def input_shape(self) -> tuple[int, ...]:
        """Default small input shape for this layer (batch 2, at most 8x8)."""
        p = self.params
        if "input_shape" in p:
            return tuple(p["input_shape"])
        if self.kind == "fully_connected":
            return (3, p["in_features"])
        channels = p.get("in_channels", p.get("channels", 2))
        return (2, channels, 6, 6)

"""Encoder, decoder and steganalyzer networks and the hide/reveal pipeline.

The encoder sees the cover's Y plane stacked with the gray secret and emits a
new Y plane; the cover's chroma planes are carried over untouched.  The
decoder recovers the secret from the stego Y plane alone.
"""
from __future__ import annotations

from collections import OrderedDict
from contextlib import contextmanager

import numpy as np
import torch
from torch import nn

from .errors import DimensionMismatchError, ImageTooSmallError, ShapeMismatchError
from .image import (
    RGB,
    GrayImage,
    RasterImage,
    extract_luma,
    replace_luma,
    rgb_planes_to_ycbcr,
    rgb_to_ycbcr,
    ycbcr_planes_to_rgb,
    ycbcr_to_rgb,
)
from .nn.layers import SPP, Activation, AffineRescale, ConvBlock, InceptionResidual, Linear, xavier_init_

ENCODER_LADDER = (32, 64, 128, 256, 128, 64, 32)
STEGANALYZER_MIN_SIZE = 32


class Encoder(nn.Module):
    kind = "encoder"

    def __init__(self):
        super().__init__()
        layers = [("layer1", ConvBlock(2, 16, 3))]
        channels = 16
        for i, out in enumerate(ENCODER_LADDER, start=2):
            layers.append((f"layer{i}", InceptionResidual(channels, out)))
            channels = out
        layers.append(("layer9", ConvBlock(channels, 16, 3)))
        layers.append(("output", ConvBlock(16, 1, 1, bn=False, act="tanh")))
        layers.append(("rescale", AffineRescale()))
        self.layers = nn.Sequential(OrderedDict(layers))

    def forward(self, x):
        if x.dim() != 4 or x.shape[1] != 2:
            raise ShapeMismatchError(f"encoder expects (N, 2, H, W), got {tuple(x.shape)}")
        return self.layers(x)


class Decoder(nn.Module):
    kind = "decoder"

    def __init__(self):
        super().__init__()
        widths = (1, 32, 64, 128, 64, 32)
        layers = [(f"layer{i}", ConvBlock(widths[i - 1], widths[i], 3)) for i in range(1, 6)]
        layers.append(("output", ConvBlock(32, 1, 1, bn=False, act="sigmoid")))
        self.layers = nn.Sequential(OrderedDict(layers))

    def forward(self, x):
        if x.dim() != 4 or x.shape[1] != 1:
            raise ShapeMismatchError(f"decoder expects (N, 1, H, W), got {tuple(x.shape)}")
        return self.layers(x)


class Steganalyzer(nn.Module):
    """Binary cover/stego classifier on RGB input; returns ``(N, 2)`` logits,
    column 0 = cover, column 1 = stego.

    Layers 3-5 are 1x1 convolutions with stride 2, which is what halves the
    feature maps 64 -> 32 -> 16 -> 8 at 256x256 input.
    """

    kind = "steganalyzer"

    def __init__(self, levels=(1, 2, 4)):
        super().__init__()
        spp = SPP(levels)
        self.layers = nn.Sequential(OrderedDict([
            ("layer1", ConvBlock(3, 8, 3, pool=True)),
            ("layer2", ConvBlock(8, 16, 3, pool=True)),
            ("layer3", ConvBlock(16, 32, 1, stride=2, act=None)),
            ("layer4", ConvBlock(32, 64, 1, stride=2, act=None)),
            ("layer5", ConvBlock(64, 128, 1, stride=2)),
            ("layer6", spp),
            ("layer7", nn.Sequential(Linear(spp.features(128), 128), Activation("leaky_relu"))),
            ("layer8", Linear(128, 2)),
        ]))

    def forward(self, x):
        if x.dim() != 4 or x.shape[1] != 3:
            raise ShapeMismatchError(f"steganalyzer expects (N, 3, H, W), got {tuple(x.shape)}")
        h, w = x.shape[-2:]
        if min(h, w) < STEGANALYZER_MIN_SIZE:
            raise ImageTooSmallError(f"steganalyzer needs at least {STEGANALYZER_MIN_SIZE}px, got {h}x{w}")
        if h % 4 or w % 4:
            raise ShapeMismatchError(f"steganalyzer needs sides divisible by 4, got {h}x{w}")
        return self.layers(x)


NETWORKS = {cls.kind: cls for cls in (Encoder, Decoder, Steganalyzer)}


def _seeded(net: nn.Module, seed: int) -> nn.Module:
    return xavier_init_(net, torch.Generator().manual_seed(seed))


def build_encoder(seed: int = 0) -> Encoder:
    return _seeded(Encoder(), seed)


def build_decoder(seed: int = 0) -> Decoder:
    return _seeded(Decoder(), seed)


def build_steganalyzer(seed: int = 0) -> Steganalyzer:
    return _seeded(Steganalyzer(), seed)


def layer_shapes(net: nn.Module, x: torch.Tensor) -> list[tuple[str, tuple[int, ...]]]:
    """Per-sample output shape after each named top-level layer, input first."""
    rows = [("input", tuple(x.shape[1:]))]
    with torch.no_grad():
        for name, layer in net.layers.named_children():
            x = layer(x)
            if name != "rescale":
                rows.append((name, tuple(x.shape[1:])))
    return rows


# --- tensor-level color pipeline -------------------------------------------

def rgb_to_ycbcr_tensor(t: torch.Tensor) -> torch.Tensor:
    y, cb, cr = rgb_planes_to_ycbcr(t[:, 0:1], t[:, 1:2], t[:, 2:3])
    return torch.cat([y, cb, cr], dim=1).clamp(0.0, 1.0)


def ycbcr_to_rgb_tensor(t: torch.Tensor) -> torch.Tensor:
    r, g, b = ycbcr_planes_to_rgb(t[:, 0:1], t[:, 1:2], t[:, 2:3])
    return torch.cat([r, g, b], dim=1).clamp(0.0, 1.0)


def embed(encoder: Encoder, covers_rgb: torch.Tensor, secrets: torch.Tensor):
    """Differentiable hiding on batches.

    Returns ``(cover_ycbcr, stego_ycbcr)``; the stego's chroma channels are the
    cover's chroma tensor itself.
    """
    if covers_rgb.shape[0] != secrets.shape[0] or covers_rgb.shape[-2:] != secrets.shape[-2:]:
        raise DimensionMismatchError(
            f"covers {tuple(covers_rgb.shape)} and secrets {tuple(secrets.shape)} disagree")
    cover_ycc = rgb_to_ycbcr_tensor(covers_rgb)
    stego_y = encoder(torch.cat([cover_ycc[:, :1], secrets], dim=1))
    return cover_ycc, torch.cat([stego_y, cover_ycc[:, 1:]], dim=1)


@contextmanager
def inference(*nets: nn.Module):
    """Eval mode and no autograd for the duration; modes restored afterwards."""
    modes = [n.training for n in nets]
    try:
        for n in nets:
            n.eval()
        with torch.no_grad():
            yield
    finally:
        for n, m in zip(nets, modes):
            n.train(m)


def _param_dtype(net: nn.Module) -> torch.dtype:
    return next(net.parameters()).dtype


def _plane_tensor(plane: np.ndarray, dtype) -> torch.Tensor:
    return torch.from_numpy(np.array(plane, dtype=np.float64))[None, None].to(dtype)


def _to_plane(t: torch.Tensor) -> np.ndarray:
    return np.clip(t[0, 0].detach().to(torch.float64).numpy(), 0.0, 1.0)


def hide_ycbcr(cover: RasterImage, secret: GrayImage, encoder: Encoder) -> RasterImage:
    """Stego image in YCbCr; its Cb/Cr planes are the cover's, bit for bit."""
    if cover.space != RGB:
        cover = ycbcr_to_rgb(cover)
    if cover.size != secret.size:
        raise DimensionMismatchError(f"cover {cover.size} and secret {secret.size} differ in size")
    cover_ycc = rgb_to_ycbcr(cover)
    dtype = _param_dtype(encoder)
    x = torch.cat([_plane_tensor(cover_ycc.planes[0], dtype), _plane_tensor(secret.plane, dtype)], dim=1)
    with inference(encoder):
        stego_y = encoder(x)
    return replace_luma(cover_ycc, GrayImage(_to_plane(stego_y)))


def hide(cover: RasterImage, secret: GrayImage, encoder: Encoder) -> RasterImage:
    """Conceal ``secret`` in the luma of ``cover``; returns the RGB stego image."""
    return ycbcr_to_rgb(hide_ycbcr(cover, secret, encoder))


def reveal(stego: RasterImage, decoder: Decoder) -> GrayImage:
    ycc = stego if stego.space != RGB else rgb_to_ycbcr(stego)
    y = extract_luma(ycc)
    with inference(decoder):
        out = decoder(_plane_tensor(y.plane, _param_dtype(decoder)))
    return GrayImage(_to_plane(out))


def steganalyze(img: RasterImage, steganalyzer: Steganalyzer) -> tuple[float, float]:
    """``(p_cover, p_stego)`` for an RGB image."""
    if img.space != RGB:
        img = ycbcr_to_rgb(img)
    if min(img.height, img.width) < STEGANALYZER_MIN_SIZE:
        raise ImageTooSmallError(f"steganalysis needs at least {STEGANALYZER_MIN_SIZE}px, got {img.size}")
    x = torch.from_numpy(np.array(img.planes))[None].to(_param_dtype(steganalyzer))
    with inference(steganalyzer):
        probs = torch.softmax(steganalyzer(x).to(torch.float64), dim=1)[0]
    return float(probs[0]), float(probs[1])


def capacity_bpp(cover: RasterImage, secret: GrayImage, bits_per_sample: int = 8) -> float:
    """Secret bits carried per cover pixel."""
    return bits_per_sample * secret.width * secret.height / (cover.width * cover.height)

"""Lossless image I/O, RGB/YCbCr conversion and luma-plane surgery.

Images are immutable values holding unit-float planes in ``[0, 1]``.  Color
images keep three channel-major planes tagged with their color space; the
YCbCr container stores planes in ``(Y, Cb, Cr)`` order.

The color arithmetic below is written with plain ``+ - *`` on whole planes so
that the same functions serve numpy arrays and torch tensors.
"""
from __future__ import annotations

import errno
import os
from dataclasses import dataclass
from typing import Union

import numpy as np
from PIL import Image

from .errors import (
    DimensionMismatchError,
    InvalidSizeError,
    UnsupportedFormatError,
    WrongColorSpaceError,
)

RGB = "RGB"
YCBCR = "YCbCr"

# Full-range BT.601 (JPEG/JFIF) luma weights and chroma scales.
KR, KG, KB = 0.299, 0.587, 0.114
CB_SCALE = 0.564
CR_SCALE = 0.713


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64, copy=True)
    a.setflags(write=False)
    return a


def _check_unit_range(a: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{what} contains non-finite values")
    if a.size and (a.min() < 0.0 or a.max() > 1.0):
        raise ValueError(f"{what} values must lie in [0, 1], got [{a.min()}, {a.max()}]")


@dataclass(frozen=True, eq=False)
class RasterImage:
    """Three-plane color image, ``planes`` shaped ``(3, height, width)``."""

    planes: np.ndarray
    space: str = RGB

    def __post_init__(self):
        planes = _freeze(self.planes)
        if planes.ndim != 3 or planes.shape[0] != 3:
            raise DimensionMismatchError(f"expected planes of shape (3, H, W), got {planes.shape}")
        if self.space not in (RGB, YCBCR):
            raise WrongColorSpaceError(f"unknown color space {self.space!r}")
        _check_unit_range(planes, "RasterImage")
        object.__setattr__(self, "planes", planes)

    @property
    def height(self) -> int:
        return self.planes.shape[1]

    @property
    def width(self) -> int:
        return self.planes.shape[2]

    @property
    def size(self) -> tuple[int, int]:
        """``(width, height)``."""
        return self.width, self.height

    def __eq__(self, other):
        if not isinstance(other, RasterImage):
            return NotImplemented
        return self.space == other.space and np.array_equal(self.planes, other.planes)

    def __repr__(self):
        return f"RasterImage({self.width}x{self.height}, space={self.space})"


@dataclass(frozen=True, eq=False)
class GrayImage:
    """Single-plane image, ``plane`` shaped ``(height, width)``."""

    plane: np.ndarray

    def __post_init__(self):
        plane = _freeze(self.plane)
        if plane.ndim != 2:
            raise DimensionMismatchError(f"expected a plane of shape (H, W), got {plane.shape}")
        _check_unit_range(plane, "GrayImage")
        object.__setattr__(self, "plane", plane)

    @property
    def height(self) -> int:
        return self.plane.shape[0]

    @property
    def width(self) -> int:
        return self.plane.shape[1]

    @property
    def size(self) -> tuple[int, int]:
        return self.width, self.height

    def __eq__(self, other):
        if not isinstance(other, GrayImage):
            return NotImplemented
        return np.array_equal(self.plane, other.plane)

    def __repr__(self):
        return f"GrayImage({self.width}x{self.height})"


AnyImage = Union[RasterImage, GrayImage]


@dataclass(frozen=True)
class ColorMatrix:
    """Affine RGB<->YCbCr maps: ``out = matrix @ in + offset``."""

    forward: np.ndarray
    forward_offset: np.ndarray
    inverse: np.ndarray
    inverse_offset: np.ndarray

    @classmethod
    def bt601(cls) -> "ColorMatrix":
        luma = np.array([KR, KG, KB])
        fwd = np.stack([
            luma,
            CB_SCALE * (np.array([0.0, 0.0, 1.0]) - luma),
            CR_SCALE * (np.array([1.0, 0.0, 0.0]) - luma),
        ])
        off = np.array([0.0, 0.5, 0.5])
        inv = np.linalg.inv(fwd)
        return cls(fwd, off, inv, -inv @ off)

    def to_ycbcr(self, rgb: np.ndarray) -> np.ndarray:
        """Apply to an array whose leading axis holds the three channels."""
        flat = rgb.reshape(3, -1)
        return (self.forward @ flat + self.forward_offset[:, None]).reshape(rgb.shape)

    def to_rgb(self, ycc: np.ndarray) -> np.ndarray:
        flat = ycc.reshape(3, -1)
        return (self.inverse @ flat + self.inverse_offset[:, None]).reshape(ycc.shape)


BT601 = ColorMatrix.bt601()


def rgb_planes_to_ycbcr(r, g, b):
    """Unclamped forward transform on numpy arrays or torch tensors.

    Chroma is computed from channel differences so that gray input yields
    chroma of exactly 0.5 regardless of rounding in the luma sum.
    """
    y = KR * r + KG * g + KB * b
    cb = 0.5 + CB_SCALE * (KR * (b - r) + KG * (b - g))
    cr = 0.5 + CR_SCALE * (KG * (r - g) + KB * (r - b))
    return y, cb, cr


def ycbcr_planes_to_rgb(y, cb, cr):
    """Unclamped algebraic inverse of :func:`rgb_planes_to_ycbcr`."""
    r = y + (cr - 0.5) / CR_SCALE
    b = y + (cb - 0.5) / CB_SCALE
    g = (y - KR * r - KB * b) / KG
    return r, g, b


def rgb_to_ycbcr(img: RasterImage) -> RasterImage:
    if not isinstance(img, RasterImage) or img.space != RGB:
        raise WrongColorSpaceError(f"rgb_to_ycbcr expects an RGB RasterImage, got {img!r}")
    out = np.stack(rgb_planes_to_ycbcr(*img.planes))
    return RasterImage(np.clip(out, 0.0, 1.0), YCBCR)


def ycbcr_to_rgb(img: RasterImage) -> RasterImage:
    if not isinstance(img, RasterImage) or img.space != YCBCR:
        raise WrongColorSpaceError(f"ycbcr_to_rgb expects a YCbCr RasterImage, got {img!r}")
    out = np.stack(ycbcr_planes_to_rgb(*img.planes))
    return RasterImage(np.clip(out, 0.0, 1.0), RGB)


def extract_luma(img: RasterImage) -> GrayImage:
    if not isinstance(img, RasterImage) or img.space != YCBCR:
        raise WrongColorSpaceError(f"extract_luma expects a YCbCr RasterImage, got {img!r}")
    return GrayImage(img.planes[0])


def replace_luma(img: RasterImage, y: GrayImage) -> RasterImage:
    """Swap in a new Y plane; the Cb/Cr planes are carried over untouched."""
    if not isinstance(img, RasterImage) or img.space != YCBCR:
        raise WrongColorSpaceError(f"replace_luma expects a YCbCr RasterImage, got {img!r}")
    if y.size != img.size:
        raise DimensionMismatchError(f"luma plane {y.size} does not match image {img.size}")
    planes = np.empty_like(img.planes)
    planes[0] = y.plane
    planes[1:] = img.planes[1:]
    return RasterImage(planes, YCBCR)


def to_gray(img: AnyImage) -> GrayImage:
    """BT.601 luma of an RGB image; gray images pass through."""
    if isinstance(img, GrayImage):
        return img
    if img.space == YCBCR:
        return extract_luma(img)
    return extract_luma(rgb_to_ycbcr(img))


def to_rgb(img: AnyImage) -> RasterImage:
    """Replicate a gray plane into RGB; color images are converted to RGB."""
    if isinstance(img, GrayImage):
        return RasterImage(np.repeat(img.plane[None], 3, axis=0), RGB)
    if img.space == YCBCR:
        return ycbcr_to_rgb(img)
    return img


def load_image(path) -> AnyImage:
    """Read an 8-bit PNG; gray files give a GrayImage, RGB files a RasterImage."""
    path = os.fspath(path)
    if not os.path.exists(path):
        raise FileNotFoundError(errno.ENOENT, "no such file", path)
    try:
        with Image.open(path) as im:
            if im.format != "PNG":
                raise UnsupportedFormatError(f"{path}: only lossless PNG is accepted, got {im.format}")
            mode = im.mode
            if mode == "P" and "transparency" not in im.info:
                im = im.convert("RGB")
                mode = "RGB"
            elif mode == "1":
                im = im.convert("L")
                mode = "L"
            if mode not in ("L", "RGB"):
                raise UnsupportedFormatError(
                    f"{path}: unsupported PNG mode {mode!r} (need 8-bit gray or RGB, no alpha)")
            data = np.asarray(im, dtype=np.uint8)
    except UnsupportedFormatError:
        raise
    except Image.UnidentifiedImageError as exc:
        raise UnsupportedFormatError(f"{path}: not a readable image") from exc
    scaled = data.astype(np.float64) / 255.0
    if mode == "L":
        return GrayImage(scaled)
    return RasterImage(np.moveaxis(scaled, -1, 0), RGB)


def quantize(a: np.ndarray) -> np.ndarray:
    """Unit floats to bytes by round-half-up of ``x * 255``, clamped."""
    return np.clip(np.floor(np.asarray(a) * 255.0 + 0.5), 0, 255).astype(np.uint8)


def save_image(img: AnyImage, path) -> None:
    """Write an 8-bit PNG. YCbCr images are converted to RGB first."""
    if isinstance(img, GrayImage):
        pil = Image.fromarray(quantize(img.plane), mode="L")
    else:
        rgb = to_rgb(img)
        pil = Image.fromarray(np.ascontiguousarray(np.moveaxis(quantize(rgb.planes), 0, -1)), mode="RGB")
    pil.save(os.fspath(path), format="PNG")


def _resize_axis(n_in: int, n_out: int):
    if n_out == 1 or n_in == 1:
        pos = np.zeros(n_out)
    else:
        pos = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
    lo = np.minimum(np.floor(pos).astype(np.intp), n_in - 1)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, pos - lo


def resize_plane(plane: np.ndarray, new_h: int, new_w: int) -> np.ndarray:
    """Corner-aligned bilinear resampling of a 2-D array."""
    h, w = plane.shape
    if (h, w) == (new_h, new_w):
        return np.array(plane, copy=True)
    r0, r1, fr = _resize_axis(h, new_h)
    c0, c1, fc = _resize_axis(w, new_w)
    top = plane[r0][:, c0] * (1 - fc) + plane[r0][:, c1] * fc
    bottom = plane[r1][:, c0] * (1 - fc) + plane[r1][:, c1] * fc
    out = top * (1 - fr)[:, None] + bottom * fr[:, None]
    return np.clip(out, 0.0, 1.0)


def resize_bilinear(img: AnyImage, new_w: int, new_h: int) -> AnyImage:
    if int(new_w) != new_w or int(new_h) != new_h or new_w < 1 or new_h < 1:
        raise InvalidSizeError(f"target size must be positive integers, got {new_w}x{new_h}")
    new_w, new_h = int(new_w), int(new_h)
    if isinstance(img, GrayImage):
        return GrayImage(resize_plane(img.plane, new_h, new_w))
    planes = np.stack([resize_plane(p, new_h, new_w) for p in img.planes])
    return RasterImage(planes, img.space)

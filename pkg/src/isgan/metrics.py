"""Image quality metrics, the mixed reconstruction loss and histogram divergences.

Differentiable metrics take torch tensors of shape ``(N, 1, H, W)`` (or anything
:func:`as_tensor` accepts) on the unit range and return 0-dim tensors, so the
same code serves training losses and reporting.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np
import torch
import torch.nn.functional as tF

from .errors import DimensionMismatchError, EmptyInputError, ImageTooSmallError
from .image import GrayImage, RasterImage

# Reference 5-scale weights, rescaled to sum to exactly 1 (published values sum to 1.0001).
_RAW_MSSSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
MSSSIM_WEIGHTS = tuple(w / sum(_RAW_MSSSIM_WEIGHTS) for w in _RAW_MSSSIM_WEIGHTS)


@dataclass(frozen=True)
class SsimConfig:
    window_size: int = 11
    gaussian_sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    # exponents of the luminance, contrast and structure terms
    l: float = 1.0
    m: float = 1.0
    n: float = 1.0
    msssim_scale_weights: tuple[float, ...] = MSSSIM_WEIGHTS

    def __post_init__(self):
        if self.window_size < 3 or self.window_size % 2 == 0:
            raise ValueError(f"window_size must be odd and >= 3, got {self.window_size}")
        if self.k1 <= 0 or self.k2 <= 0:
            raise ValueError("k1 and k2 must be positive")
        if not self.msssim_scale_weights or abs(sum(self.msssim_scale_weights) - 1.0) > 1e-9:
            raise ValueError(f"MS-SSIM weights must sum to 1, got {self.msssim_scale_weights}")
        object.__setattr__(self, "msssim_scale_weights", tuple(float(w) for w in self.msssim_scale_weights))

    @property
    def c1(self) -> float:
        return self.k1 ** 2

    @property
    def c2(self) -> float:
        return self.k2 ** 2

    @property
    def c3(self) -> float:
        return self.c2 / 2

    @property
    def scales(self) -> int:
        return len(self.msssim_scale_weights)

    def min_size(self) -> int:
        return self.window_size * 2 ** (self.scales - 1)

    def fitted(self, height: int, width: int) -> "SsimConfig":
        """Drop the coarsest MS-SSIM scales that do not fit ``height x width`` and
        renormalize the remaining weights."""
        side = min(height, width)
        if side < self.window_size:
            raise ImageTooSmallError(f"{height}x{width} smaller than the {self.window_size}px window")
        scales = self.scales
        while self.window_size * 2 ** (scales - 1) > side:
            scales -= 1
        if scales == self.scales:
            return self
        kept = self.msssim_scale_weights[:scales]
        total = sum(kept)
        return replace(self, msssim_scale_weights=tuple(w / total for w in kept))


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.5
    beta: float = 0.3
    gamma: float = 0.85

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.beta < 0 or self.gamma < 0:
            raise ValueError("beta and gamma must be non-negative")


@dataclass(frozen=True)
class DivergenceEstimate:
    kind: str
    value: float
    bin_count: int


def as_tensor(x, dtype=None) -> torch.Tensor:
    """Coerce an image, array or tensor to a 4-D ``(N, C, H, W)`` tensor."""
    if isinstance(x, GrayImage):
        t = torch.from_numpy(np.array(x.plane))[None, None]
    elif isinstance(x, RasterImage):
        t = torch.from_numpy(np.array(x.planes))[None]
    elif isinstance(x, torch.Tensor):
        t = x
    else:
        t = torch.as_tensor(np.asarray(x, dtype=np.float64))
    while t.dim() < 4:
        t = t.unsqueeze(0)
    if dtype is not None:
        t = t.to(dtype)
    return t


def _pair(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionMismatchError(f"shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    if a.dtype != b.dtype:
        dtype = torch.promote_types(a.dtype, b.dtype)
        a, b = a.to(dtype), b.to(dtype)
    return a, b


def mse(a, b) -> torch.Tensor:
    a, b = _pair(a, b)
    return ((a - b) ** 2).mean()


def psnr(a, b, max_value: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; ``inf`` for identical inputs."""
    err = float(mse(a, b))
    if err == 0.0:
        return math.inf
    return 10.0 * math.log10(max_value ** 2 / err)


@lru_cache(maxsize=16)
def _gaussian_1d(size: int, sigma: float) -> np.ndarray:
    coords = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-(coords ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def gaussian_window(size: int, sigma: float) -> np.ndarray:
    """Normalized 2-D Gaussian window (outer product of the 1-D kernel)."""
    g = _gaussian_1d(size, sigma)
    return np.outer(g, g)


def _filter(x: torch.Tensor, kernel: torch.Tensor) -> torch.Tensor:
    """Separable 'valid' Gaussian filtering of every channel independently."""
    n, c, h, w = x.shape
    flat = x.reshape(n * c, 1, h, w)
    k = kernel.numel()
    flat = tF.conv2d(flat, kernel.view(1, 1, k, 1))
    flat = tF.conv2d(flat, kernel.view(1, 1, 1, k))
    return flat.reshape(n, c, flat.shape[-2], flat.shape[-1])


def _ssim_maps(a: torch.Tensor, b: torch.Tensor, cfg: SsimConfig):
    """Per-position SSIM map and contrast-structure map."""
    kernel = torch.as_tensor(_gaussian_1d(cfg.window_size, cfg.gaussian_sigma), dtype=a.dtype)
    mu_a, mu_b = _filter(a, kernel), _filter(b, kernel)
    var_a = _filter(a * a, kernel) - mu_a ** 2
    var_b = _filter(b * b, kernel) - mu_b ** 2
    cov = _filter(a * b, kernel) - mu_a * mu_b
    lum = (2 * mu_a * mu_b + cfg.c1) / (mu_a ** 2 + mu_b ** 2 + cfg.c1)
    if cfg.l == cfg.m == cfg.n == 1.0:
        # with C3 = C2 / 2 contrast * structure collapses to one ratio
        cs = (2 * cov + cfg.c2) / (var_a + var_b + cfg.c2)
        return lum * cs, cs
    sd_a, sd_b = var_a.clamp_min(0).sqrt(), var_b.clamp_min(0).sqrt()
    con = (2 * sd_a * sd_b + cfg.c2) / (var_a + var_b + cfg.c2)
    struct = (cov + cfg.c3) / (sd_a * sd_b + cfg.c3)
    cs = con ** cfg.m * struct.sign() * struct.abs() ** cfg.n
    return lum ** cfg.l * cs, cs


def _check_window(a: torch.Tensor, size: int):
    if min(a.shape[-2:]) < size:
        raise ImageTooSmallError(f"image {tuple(a.shape[-2:])} smaller than required {size}px")


def ssim(a, b, cfg: SsimConfig = SsimConfig(), reduction: str = "mean") -> torch.Tensor:
    """Mean SSIM over all valid window positions (per image if ``reduction='none'``)."""
    a, b = _pair(a, b)
    _check_window(a, cfg.window_size)
    smap, _ = _ssim_maps(a, b, cfg)
    per_image = smap.mean(dim=(1, 2, 3))
    return per_image.mean() if reduction == "mean" else per_image


def ms_ssim(a, b, cfg: SsimConfig = SsimConfig(), reduction: str = "mean") -> torch.Tensor:
    """Multi-scale SSIM.

    Contrast-structure means on every scale but the coarsest, full SSIM on the
    coarsest; each factor clamped at zero and raised to its scale weight.
    Images are halved by 2x2 averaging between scales.
    """
    a, b = _pair(a, b)
    _check_window(a, cfg.min_size())
    factors = []
    weights = cfg.msssim_scale_weights
    for j, w in enumerate(weights):
        smap, cs = _ssim_maps(a, b, cfg)
        term = smap if j == len(weights) - 1 else cs
        factors.append(term.mean(dim=(1, 2, 3)).clamp_min(0) ** w)
        if j < len(weights) - 1:
            a = tF.avg_pool2d(a, 2)
            b = tF.avg_pool2d(b, 2)
    per_image = torch.stack(factors).prod(dim=0)
    return per_image.mean() if reduction == "mean" else per_image


def image_loss(a, b, w: LossWeights = LossWeights(), cfg: SsimConfig = SsimConfig()) -> torch.Tensor:
    """``alpha (1 - SSIM) + (1 - alpha) (1 - MS-SSIM) + beta * MSE``."""
    a, b = _pair(a, b)
    out = w.beta * mse(a, b)
    if w.alpha > 0:
        out = out + w.alpha * (1 - ssim(a, b, cfg))
    if w.alpha < 1:
        out = out + (1 - w.alpha) * (1 - ms_ssim(a, b, cfg))
    return out


def total_loss(cover, stego, secret, revealed, w: LossWeights = LossWeights(),
               cfg: SsimConfig = SsimConfig()) -> torch.Tensor:
    """Cover-side loss plus ``gamma`` times the secret-side loss."""
    out = image_loss(cover, stego, w, cfg)
    if w.gamma != 0:
        out = out + w.gamma * image_loss(secret, revealed, w, cfg)
    return out


@dataclass
class LossTerms:
    """Both reconstruction losses and the SSIM values computed on the way."""

    total: torch.Tensor
    cover: torch.Tensor
    secret: torch.Tensor
    cover_ssim: float = field(default=float("nan"))
    secret_ssim: float = field(default=float("nan"))
    cover_mse: float = field(default=float("nan"))
    secret_mse: float = field(default=float("nan"))


def _terms(a, b, w: LossWeights, cfg: SsimConfig, kind: str):
    err = mse(a, b)
    if kind == "mse":
        with torch.no_grad():
            s = ssim(a, b, cfg)
        return err, err, s
    s = ssim(a, b, cfg)
    loss = w.beta * err + w.alpha * (1 - s)
    if w.alpha < 1:
        loss = loss + (1 - w.alpha) * (1 - ms_ssim(a, b, cfg))
    return loss, err, s


def loss_terms(cover, stego, secret, revealed, w: LossWeights, cfg: SsimConfig,
               kind: str = "mixed") -> LossTerms:
    """Training-side loss. ``kind='mixed'`` is :func:`total_loss`; ``kind='mse'``
    replaces each image loss with plain MSE (the loss-ablation baseline)."""
    if kind not in ("mixed", "mse"):
        raise ValueError(f"unknown loss kind {kind!r}")
    lc, ec, sc = _terms(cover, stego, w, cfg, kind)
    ls, es, ss = _terms(secret, revealed, w, cfg, kind)
    values = (float(v.detach()) for v in (sc, ss, ec, es))
    return LossTerms(lc + w.gamma * ls, lc, ls, *values)


def kl_divergence(p, q) -> float:
    """``sum p log(p / q)`` in nats over two probability vectors."""
    p, q = np.asarray(p, dtype=np.float64), np.asarray(q, dtype=np.float64)
    mask = p > 0
    return float(np.sum(p[mask] * np.log(p[mask] / q[mask])))


def js_divergence(p, q) -> float:
    p, q = np.asarray(p, dtype=np.float64), np.asarray(q, dtype=np.float64)
    m = 0.5 * (p + q)
    return 0.5 * kl_divergence(p, m) + 0.5 * kl_divergence(q, m)


def divergence(p_samples, q_samples, kind: str = "JS", bins: int = 256) -> DivergenceEstimate:
    """KL or JS divergence between Laplace-smoothed histograms of two sample sets
    over their common range."""
    p_samples = np.ravel(np.asarray(p_samples, dtype=np.float64))
    q_samples = np.ravel(np.asarray(q_samples, dtype=np.float64))
    if p_samples.size == 0 or q_samples.size == 0:
        raise EmptyInputError("divergence needs non-empty sample sets")
    if bins < 2:
        raise ValueError("bins must be >= 2")
    kind = kind.upper()
    if kind not in ("KL", "JS"):
        raise ValueError(f"unknown divergence kind {kind!r}")
    lo = min(p_samples.min(), q_samples.min())
    hi = max(p_samples.max(), q_samples.max())
    if hi == lo:
        hi = lo + 1.0
    edges = np.linspace(lo, hi, bins + 1)
    p = np.histogram(p_samples, edges)[0] + 1.0
    q = np.histogram(q_samples, edges)[0] + 1.0
    p, q = p / p.sum(), q / q.sum()
    value = kl_divergence(p, q) if kind == "KL" else js_divergence(p, q)
    return DivergenceEstimate(kind, max(value, 0.0), bins)

"""Quality reports, the cross-model security experiment, residual maps and an
LSB baseline.

Everything here runs the deployment pipeline: stego images are converted to
RGB and quantized to 8 bits (as if written to PNG) before they are revealed
or shown to a detector.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .data import PairSet
from .errors import DimensionMismatchError, EmptyDatasetError
from .image import GrayImage, RasterImage, RGB, extract_luma, quantize, rgb_to_ycbcr, to_rgb
from .metrics import SsimConfig, mse, ssim
from .networks import (
    Decoder,
    Encoder,
    Steganalyzer,
    build_steganalyzer,
    inference,
    rgb_to_ycbcr_tensor,
    ycbcr_to_rgb_tensor,
)
from .training import COVER_LABEL, SGD, STEGO_LABEL, named_parameters


def _dtype(net: nn.Module):
    return next(net.parameters()).dtype


def quantize_tensor(t: torch.Tensor) -> torch.Tensor:
    return torch.floor(t * 255.0 + 0.5).clamp(0, 255) / 255.0


def stego_images(encoder: Encoder, covers: torch.Tensor, secrets: torch.Tensor,
                 quantized: bool = True, batch_size: int = 32) -> torch.Tensor:
    """RGB stegos (float64) for a stack of RGB covers and gray secrets."""
    out = []
    with inference(encoder):
        for i in range(0, covers.shape[0], batch_size):
            c = covers[i:i + batch_size].to(torch.float64)
            s = secrets[i:i + batch_size]
            ycc = rgb_to_ycbcr_tensor(c)
            x = torch.cat([ycc[:, :1], s.to(torch.float64)], dim=1).to(_dtype(encoder))
            y = encoder(x).to(torch.float64).clamp(0, 1)
            rgb = ycbcr_to_rgb_tensor(torch.cat([y, ycc[:, 1:]], dim=1))
            out.append(quantize_tensor(rgb) if quantized else rgb)
    return torch.cat(out)


def revealed_images(decoder: Decoder, stegos_rgb: torch.Tensor, batch_size: int = 32) -> torch.Tensor:
    out = []
    with inference(decoder):
        for i in range(0, stegos_rgb.shape[0], batch_size):
            y = rgb_to_ycbcr_tensor(stegos_rgb[i:i + batch_size].to(torch.float64))[:, :1]
            out.append(decoder(y.to(_dtype(decoder))).to(torch.float64).clamp(0, 1))
    return torch.cat(out)


def _finite_or_str(v):
    return v if not isinstance(v, float) or math.isfinite(v) else repr(v)


def _psnr(err: float) -> float:
    return math.inf if err == 0 else 10 * math.log10(1.0 / err)


QUALITY_FIELDS = ("cover", "secret", "stego_cover_psnr", "stego_cover_ssim",
                  "revealed_secret_psnr", "revealed_secret_ssim")


@dataclass
class QualityReport:
    dataset: str
    checkpoint: str
    per_pair: list[dict] = field(default_factory=list)
    aggregate: dict = field(default_factory=dict)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=QUALITY_FIELDS, lineterminator="\n")
        writer.writeheader()
        for row in self.per_pair:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
        return buf.getvalue()

    def to_json(self) -> str:
        body = {
            "dataset": self.dataset,
            "checkpoint": self.checkpoint,
            "aggregate": {k: _finite_or_str(v) for k, v in self.aggregate.items()},
            "per_pair": [{k: _finite_or_str(v) for k, v in r.items()} for r in self.per_pair],
        }
        return json.dumps(body, indent=2, sort_keys=True) + "\n"

    def save(self, out_dir, stem: str = "quality") -> tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        csv_path, json_path = out / f"{stem}.csv", out / f"{stem}.json"
        csv_path.write_text(self.to_csv(), encoding="utf-8")
        json_path.write_text(self.to_json(), encoding="utf-8")
        return csv_path, json_path


def evaluate_quality(encoder: Encoder, decoder: Decoder, pairs: PairSet, dataset: str = "",
                     checkpoint: str = "", cfg: SsimConfig = SsimConfig()) -> QualityReport:
    """Per-pair stego-vs-cover (RGB) and revealed-vs-secret (gray) PSNR and SSIM.

    Aggregates are plain means of the per-pair values; PSNR is averaged in dB.
    """
    if len(pairs) == 0:
        raise EmptyDatasetError("no pairs to evaluate")
    covers = pairs.covers.to(torch.float64)
    secrets = pairs.secrets.to(torch.float64)
    stegos = stego_images(encoder, covers, secrets)
    revealed = revealed_images(decoder, stegos)
    cover_ssim = ssim(covers, stegos, cfg, reduction="none")
    secret_ssim = ssim(secrets, revealed, cfg, reduction="none")
    names = pairs.names or [(str(2 * i), str(2 * i + 1)) for i in range(len(pairs))]
    rows = []
    for i, (cn, sn) in enumerate(names):
        rows.append({
            "cover": cn,
            "secret": sn,
            "stego_cover_psnr": _psnr(float(mse(covers[i], stegos[i]))),
            "stego_cover_ssim": float(cover_ssim[i]),
            "revealed_secret_psnr": _psnr(float(mse(secrets[i], revealed[i]))),
            "revealed_secret_ssim": float(secret_ssim[i]),
        })
    agg = {k: float(np.mean([r[k] for r in rows])) for k in QUALITY_FIELDS[2:]}
    agg["pairs"] = len(rows)
    return QualityReport(dataset, checkpoint, rows, agg)


# --- security experiment ----------------------------------------------------

@dataclass(frozen=True)
class DetectorConfig:
    epochs: int = 20
    batch_size: int = 16
    lr: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 1e-4
    seed: int = 0


@dataclass
class SecurityReport:
    detector_training: dict
    basic_accuracy: float
    isgan_accuracy: dict[str, float]
    detector_history: list[float] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"


def _labelled(covers: torch.Tensor, stegos: torch.Tensor):
    x = torch.cat([covers.to(torch.float64), stegos])
    n = covers.shape[0]
    y = torch.cat([torch.full((n,), COVER_LABEL), torch.full((stegos.shape[0],), STEGO_LABEL)])
    return x, y


def train_detector(images: torch.Tensor, labels: torch.Tensor, cfg: DetectorConfig = DetectorConfig()):
    """Fresh steganalyzer trained as a binary cover/stego classifier with
    momentum SGD; returns it with its per-epoch training accuracy."""
    det = build_steganalyzer(cfg.seed)
    opt = SGD(named_parameters(steganalyzer=det), cfg.lr, cfg.momentum, cfg.weight_decay)
    ce = nn.CrossEntropyLoss()
    x, y = images.to(_dtype(det)), labels
    history = []
    for epoch in range(cfg.epochs):
        det.train()
        order = torch.from_numpy(np.random.default_rng([cfg.seed, epoch]).permutation(len(y)))
        correct = 0
        for i in range(0, len(y), cfg.batch_size):
            idx = order[i:i + cfg.batch_size]
            if len(idx) < 2:
                continue            # batch statistics need at least two samples
            logits = det(x[idx])
            loss = ce(logits, y[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            correct += int((logits.argmax(1) == y[idx]).sum())
        history.append(correct / len(y))
    return det, history


def detector_accuracy(det: Steganalyzer, images: torch.Tensor, labels: torch.Tensor,
                      batch_size: int = 64) -> float:
    hits = 0
    with inference(det):
        for i in range(0, len(labels), batch_size):
            logits = det(images[i:i + batch_size].to(_dtype(det)))
            hits += int((logits.argmax(1) == labels[i:i + batch_size]).sum())
    return hits / len(labels)


def security_experiment(basic: Encoder, isgan: dict[str, Encoder], train_pairs: PairSet,
                        test_pairs: PairSet, cfg: DetectorConfig = DetectorConfig()) -> SecurityReport:
    """Cross-model detectability.

    A detector is trained on covers vs. basic-model stegos from ``train_pairs``
    and then scored on ``test_pairs`` covers paired with stegos from the basic
    model and from each ``isgan`` encoder.  The detector only ever sees
    basic-model images during training.
    """
    if len(train_pairs) == 0 or len(test_pairs) == 0:
        raise EmptyDatasetError("security experiment needs non-empty train and test pairs")
    overlap = set(map(tuple, train_pairs.names)) & set(map(tuple, test_pairs.names))
    if overlap:
        raise ValueError(f"{len(overlap)} pairs appear in both detector train and test sets")
    x, y = _labelled(train_pairs.covers, stego_images(basic, train_pairs.covers, train_pairs.secrets))
    det, history = train_detector(x, y, cfg)

    def score(encoder):
        xt, yt = _labelled(test_pairs.covers, stego_images(encoder, test_pairs.covers, test_pairs.secrets))
        return detector_accuracy(det, xt, yt)

    return SecurityReport(
        detector_training={"pairs": len(train_pairs), "images": len(y), "epochs": cfg.epochs,
                           "seed": cfg.seed, "source": "basic"},
        basic_accuracy=score(basic),
        isgan_accuracy={name: score(enc) for name, enc in isgan.items()},
        detector_history=history,
    )


# --- residuals and the LSB baseline ------------------------------------------

def _luma(img: RasterImage) -> np.ndarray:
    return extract_luma(img if img.space != RGB else rgb_to_ycbcr(img)).plane


def residual_visualization(cover: RasterImage, stego: RasterImage, amplification: float = 10.0) -> GrayImage:
    """``|Y_cover - Y_stego| * amplification`` clamped to [0, 1]."""
    if cover.size != stego.size:
        raise DimensionMismatchError(f"cover {cover.size} and stego {stego.size} differ in size")
    diff = np.abs(_luma(cover) - _luma(stego)) * amplification
    return GrayImage(np.clip(diff, 0.0, 1.0))


LSB_SPLIT = (3, 3, 2)   # secret bits carried by the R, G, B low bits


def lsb_embed(cover: RasterImage, secret: GrayImage) -> RasterImage:
    """8 bpp LSB baseline: the secret byte's top 3 bits replace R's low 3 bits,
    the next 3 replace G's, the last 2 replace B's."""
    if cover.size != secret.size:
        raise DimensionMismatchError(f"cover {cover.size} and secret {secret.size} differ in size")
    c = quantize(np.asarray(to_rgb(cover).planes)).astype(np.int64)
    s = quantize(np.asarray(secret.plane)).astype(np.int64)
    shift = 8
    out = np.empty_like(c)
    for ch, bits in enumerate(LSB_SPLIT):
        shift -= bits
        chunk = (s >> shift) & ((1 << bits) - 1)
        out[ch] = (c[ch] & ~((1 << bits) - 1)) | chunk
    return RasterImage(out / 255.0)


def lsb_extract(stego: RasterImage) -> GrayImage:
    c = quantize(np.asarray(to_rgb(stego).planes)).astype(np.int64)
    value = np.zeros(c.shape[1:], dtype=np.int64)
    for ch, bits in enumerate(LSB_SPLIT):
        value = (value << bits) | (c[ch] & ((1 << bits) - 1))
    return GrayImage(value / 255.0)


def mean_residual(cover: RasterImage, stego: RasterImage) -> float:
    return float(np.mean(residual_visualization(cover, stego, 1.0).plane))

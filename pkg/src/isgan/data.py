"""Dataset scanning, cover/secret pairing and batch iteration.

Files under a root directory are sorted, shuffled by seed, split into train and
validation parts, and paired consecutively inside each part (even position =
cover, odd = secret).  Secrets are converted to gray with the BT.601 luma.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import EmptyDatasetError, InsufficientImagesError
from .image import load_image, resize_bilinear, save_image, to_gray, to_rgb, RasterImage

MANIFEST_HEADER = "# isgan-manifest v1"
TRAIN, VAL = "train", "val"


@dataclass(frozen=True)
class DatasetManifest:
    root: str
    files: tuple[str, ...]          # relative paths in shuffled order
    seed: int
    split_fraction: float
    target_size: tuple[int, int]    # (height, width)
    n_train_files: int

    def pairs(self, split: str = TRAIN) -> list[tuple[str, str]]:
        """(cover, secret) relative paths for ``split``; unpaired leftovers are dropped."""
        if split == TRAIN:
            part = self.files[:self.n_train_files]
        elif split == VAL:
            part = self.files[self.n_train_files:]
        else:
            raise ValueError(f"unknown split {split!r}")
        return [(part[i], part[i + 1]) for i in range(0, len(part) - 1, 2)]

    def to_text(self) -> str:
        h, w = self.target_size
        lines = [
            MANIFEST_HEADER,
            f"# seed={self.seed} split_fraction={self.split_fraction!r} size={h}x{w} "
            f"train_files={self.n_train_files} files={len(self.files)}",
            *self.files,
        ]
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")

    @classmethod
    def from_text(cls, text: str, root) -> "DatasetManifest":
        lines = text.splitlines()
        if not lines or lines[0] != MANIFEST_HEADER:
            raise ValueError("not an isgan manifest")
        fields = dict(item.split("=", 1) for item in lines[1].lstrip("# ").split())
        h, w = (int(v) for v in fields["size"].split("x"))
        files = tuple(line for line in lines[2:] if line)
        if len(files) != int(fields["files"]):
            raise ValueError("manifest file count does not match its header")
        return cls(os.fspath(root), files, int(fields["seed"]), float(fields["split_fraction"]),
                   (h, w), int(fields["train_files"]))


def scan_dataset(root, target_size=(64, 64), seed: int = 0, split_fraction: float = 0.8,
                 pattern: str = "*.png") -> DatasetManifest:
    root = Path(root)
    files = sorted(p.relative_to(root).as_posix() for p in root.rglob(pattern) if p.is_file())
    if len(files) < 2:
        raise InsufficientImagesError(f"{root}: need at least 2 images, found {len(files)}")
    order = np.random.default_rng(seed).permutation(len(files))
    shuffled = tuple(files[i] for i in order)
    n_train = int(np.floor(len(files) * split_fraction))
    if isinstance(target_size, int):
        target_size = (target_size, target_size)
    return DatasetManifest(os.fspath(root), shuffled, seed, float(split_fraction),
                           tuple(int(v) for v in target_size), n_train)


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    """Pair visiting order for one epoch; a pure function of (seed, epoch)."""
    return np.random.default_rng([seed, epoch]).permutation(n)


@dataclass
class ImagePairBatch:
    covers: torch.Tensor      # (N, 3, H, W) RGB
    secrets: torch.Tensor     # (N, 1, H, W) gray
    paths: list[tuple[str, str]] = field(default_factory=list)

    def __len__(self):
        return self.covers.shape[0]


def _load_resized(path: Path, size):
    try:
        img = load_image(path)
    except OSError as exc:
        raise OSError(f"{path}: {exc}") from exc
    h, w = size
    return resize_bilinear(img, w, h)


def load_pair(manifest: DatasetManifest, cover: str, secret: str):
    root = Path(manifest.root)
    c = to_rgb(_load_resized(root / cover, manifest.target_size))
    s = to_gray(_load_resized(root / secret, manifest.target_size))
    return c.planes, s.plane[None]


def next_batch(manifest: DatasetManifest, cursor: int, batch_size: int, split: str = TRAIN,
               epoch: int = 0, dtype=torch.float32) -> tuple[ImagePairBatch, int]:
    """Load the batch starting at ``cursor`` of this epoch's order; returns it with
    the next cursor.  The final batch may be short."""
    pairs = manifest.pairs(split)
    if not 0 <= cursor < len(pairs):
        raise IndexError(f"cursor {cursor} outside 0..{len(pairs) - 1}")
    order = epoch_order(len(pairs), manifest.seed, epoch)
    chosen = [pairs[i] for i in order[cursor:cursor + batch_size]]
    loaded = [load_pair(manifest, c, s) for c, s in chosen]
    covers = torch.from_numpy(np.stack([c for c, _ in loaded])).to(dtype)
    secrets = torch.from_numpy(np.stack([s for _, s in loaded])).to(dtype)
    return ImagePairBatch(covers, secrets, chosen), cursor + len(chosen)


@dataclass
class PairSet:
    """Cover/secret pairs held in memory as tensors."""

    covers: torch.Tensor
    secrets: torch.Tensor
    names: list[tuple[str, str]] = field(default_factory=list)
    seed: int = 0

    def __post_init__(self):
        if self.covers.shape[0] != self.secrets.shape[0]:
            raise ValueError("covers and secrets must hold the same number of images")

    def __len__(self):
        return self.covers.shape[0]

    @property
    def size(self) -> tuple[int, int]:
        return tuple(self.covers.shape[-2:])

    def subset(self, indices) -> "PairSet":
        idx = torch.as_tensor(list(indices), dtype=torch.long)
        names = [self.names[i] for i in idx.tolist()] if self.names else []
        return PairSet(self.covers[idx], self.secrets[idx], names, self.seed)

    def batches(self, batch_size: int, epoch: int = 0, shuffle: bool = True):
        if len(self) == 0:
            raise EmptyDatasetError("no pairs to iterate")
        order = epoch_order(len(self), self.seed, epoch) if shuffle else np.arange(len(self))
        for start in range(0, len(self), batch_size):
            idx = torch.as_tensor(order[start:start + batch_size], dtype=torch.long)
            yield self.covers[idx], self.secrets[idx]


def load_pairs(manifest: DatasetManifest, split: str = TRAIN, limit: int | None = None,
               dtype=torch.float32) -> PairSet:
    pairs = manifest.pairs(split)[:limit]
    if not pairs:
        raise EmptyDatasetError(f"manifest has no {split} pairs")
    loaded = [load_pair(manifest, c, s) for c, s in pairs]
    covers = torch.from_numpy(np.stack([c for c, _ in loaded])).to(dtype)
    secrets = torch.from_numpy(np.stack([s for _, s in loaded])).to(dtype)
    return PairSet(covers, secrets, list(pairs), manifest.seed)


# Color photographs bundled with scikit-image (no download needed).
SAMPLE_SOURCES = ("astronaut", "chelsea", "coffee", "rocket", "immunohistochemistry",
                  "retina", "hubble_deep_field", "colorwheel", "stereo_motorcycle")


def _sample_sources():
    from skimage import data as skdata

    images = []
    for name in SAMPLE_SOURCES:
        img = getattr(skdata, name)()
        if isinstance(img, tuple):
            images.extend(i for i in img if getattr(i, "ndim", 0) == 3)
        else:
            images.append(img)
    return [np.asarray(i[..., :3], dtype=np.float64) / 255.0 for i in images]


def build_sample_corpus(out_dir, count: int, size: int = 64, seed: int = 0,
                        min_crop: int | None = None, max_crop: int = 256) -> list[Path]:
    """Write ``count`` RGB PNG patches cut from scikit-image's sample photographs.

    Each patch is a random square crop (side drawn from ``[min_crop, max_crop]``)
    of a random source, resized to ``size x size``.  Deterministic in ``seed``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    sources = _sample_sources()
    min_crop = min_crop or size
    paths = []
    for i in range(count):
        src = sources[rng.integers(len(sources))]
        h, w = src.shape[:2]
        side = int(rng.integers(min_crop, min(max_crop, h, w) + 1))
        top, left = int(rng.integers(0, h - side + 1)), int(rng.integers(0, w - side + 1))
        crop = np.moveaxis(src[top:top + side, left:left + side], -1, 0)
        patch = resize_bilinear(RasterImage(crop), size, size)
        path = out / f"patch_{i:05d}.png"
        save_image(patch, path)
        paths.append(path)
    return paths

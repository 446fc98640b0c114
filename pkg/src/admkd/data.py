"""Datasets, augmentation, label noise and batching.

Every random choice is drawn from a generator seeded by a tuple such as
``(seed, epoch)`` or ``(seed, epoch, sample_index)``, so outputs depend only
on their inputs and never on call order or threading.
"""

from __future__ import annotations

import csv
import hashlib
import math
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class DataError(ValueError):
    pass


class FormatError(DataError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # (N, C, H, W) float32 in [0, 1]
    labels: np.ndarray  # (N,) int64
    num_classes: int
    split: str = "train"
    name: str = "dataset"

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise DataError(f"images must be (N, C, H, W), got {self.images.shape}")
        if len(self.images) == 0:
            raise DataError("dataset is empty")
        if len(self.labels) != len(self.images):
            raise DataError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise DataError(f"labels must lie in [0, {self.num_classes})")
        if not np.isfinite(self.images).all():
            raise DataError("images contain non-finite values")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def shape(self) -> Tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def checksum(self) -> str:
        h = hashlib.sha256(self.images.tobytes())
        h.update(self.labels.tobytes())
        return h.hexdigest()


# ----------------------------------------------------------------------
# synthetic data


def blob_templates(classes: int, shape: Tuple[int, int, int]) -> np.ndarray:
    """One Gaussian blob per class on a k x k grid of cells (k = ceil(sqrt(classes)))."""
    c, h, w = shape
    if min(h, w) < 4:
        raise DataError(f"blob images need spatial extents >= 4, got {shape}")
    if classes > h * w:
        raise DataError(f"{classes} classes exceed the {h * w} available templates for {h}x{w} images")
    k = math.ceil(math.sqrt(classes))
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    cell_h, cell_w = h / k, w / k
    sigma = max(min(cell_h, cell_w) / 4.0, 0.5)
    templates = np.zeros((classes, c, h, w), np.float32)
    for cls in range(classes):
        cy = (cls // k + 0.5) * cell_h - 0.5
        cx = (cls % k + 0.5) * cell_w - 0.5
        blob = np.exp(-((ys - cy) ** 2 + (xs - cx) ** 2) / (2 * sigma ** 2))
        templates[cls] = blob.astype(np.float32)[None]
    return templates


def synth_blobs(classes: int, per_class: int, shape=(1, 16, 16), noise_sigma: float = 0.1,
                seed: int = 0, split: str = "train") -> Dataset:
    """Class templates plus Gaussian pixel noise, clipped to [0, 1]."""
    shape = tuple(int(v) for v in shape)
    templates = blob_templates(classes, shape)
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(classes), per_class)
    images = templates[labels].astype(np.float64)
    if noise_sigma > 0:
        images = images + rng.normal(0.0, noise_sigma, size=images.shape)
    images = np.clip(images, 0.0, 1.0).astype(np.float32)
    return Dataset(images, labels, classes, split, f"blobs{classes}")


# ----------------------------------------------------------------------
# IDX / CSV codecs


def _read_idx(path, expected_magic: int) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise FormatError(f"{path}: truncated header at offset 0 ({len(raw)} bytes)")
    magic = struct.unpack(">I", raw[:4])[0]
    if magic != expected_magic:
        raise FormatError(f"{path}: bad magic 0x{magic:08x} at offset 0, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"{path}: truncated dimension header at offset 4")
    dims = struct.unpack(">" + "I" * ndim, raw[4:header])
    count = int(np.prod(dims)) if dims else 0
    if len(raw) < header + count:
        raise FormatError(f"{path}: truncated payload at offset {len(raw)}, expected {header + count} bytes")
    if len(raw) > header + count:
        raise FormatError(f"{path}: {len(raw) - header - count} trailing bytes at offset {header + count}")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=header).reshape(dims)


def load_idx(images_path, labels_path, num_classes: Optional[int] = None, split: str = "train") -> Dataset:
    """Parse an IDX image/label pair; pixels are scaled from bytes to [0, 1]."""
    imgs = _read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC)
    if imgs.shape[0] != labels.shape[0]:
        raise FormatError(f"count mismatch at offset 4: {imgs.shape[0]} images vs {labels.shape[0]} labels")
    if imgs.shape[0] == 0:
        raise FormatError("IDX files contain zero items (offset 4)")
    images = (imgs.astype(np.float32) / 255.0)[:, None, :, :]
    labels = labels.astype(np.int64)
    return Dataset(images, labels, num_classes or int(labels.max()) + 1, split, Path(images_path).stem)


def save_idx(ds: Dataset, images_path, labels_path) -> None:
    """Write a single-channel dataset as an IDX pair (pixels quantized to bytes)."""
    if ds.images.shape[1] != 1:
        raise FormatError(f"IDX images are single-channel, dataset has {ds.images.shape[1]} channels")
    n, _, h, w = ds.images.shape
    pix = np.clip(np.rint(ds.images[:, 0] * 255.0), 0, 255).astype(np.uint8)
    Path(images_path).write_bytes(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, h, w) + pix.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", IDX_LABELS_MAGIC, n) + ds.labels.astype(np.uint8).tobytes())


def load_csv(path, shape: Optional[Tuple[int, int, int]] = None, num_classes: Optional[int] = None,
             split: str = "train") -> Dataset:
    """Rows of ``label,p0,p1,...`` with byte pixels (0-255); an optional header row is skipped."""
    rows: List[List[str]] = []
    with open(path, newline="") as fh:
        for i, row in enumerate(csv.reader(fh)):
            if not row:
                continue
            if i == 0 and not row[0].strip().lstrip("-").isdigit():
                continue
            rows.append(row)
    if not rows:
        raise FormatError(f"{path}: no data rows")
    try:
        labels = np.array([int(r[0]) for r in rows], dtype=np.int64)
        pixels = np.array([[float(v) for v in r[1:]] for r in rows], dtype=np.float32)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from None
    n_pix = pixels.shape[1]
    if shape is None:
        side = int(round(math.sqrt(n_pix)))
        if side * side != n_pix:
            raise FormatError(f"{path}: {n_pix} pixels per row is not square; pass shape explicitly")
        shape = (1, side, side)
    if int(np.prod(shape)) != n_pix:
        raise FormatError(f"{path}: {n_pix} pixels per row do not match shape {shape}")
    images = (pixels / 255.0).reshape((-1,) + tuple(shape))
    return Dataset(images, labels, num_classes or int(labels.max()) + 1, split, Path(path).stem)


# ----------------------------------------------------------------------
# augmentation, noise, batching


@dataclass
class AugmentPolicy:
    pad: int = 4
    crop: Optional[Tuple[int, int]] = None
    hflip_prob: float = 0.5
    enabled: bool = True

    def validate(self, image_hw: Tuple[int, int]) -> None:
        h, w = image_hw
        ch, cw = self.crop or (h, w)
        if ch > h + 2 * self.pad or cw > w + 2 * self.pad:
            raise DataError(f"crop {ch}x{cw} exceeds padded extent {h + 2 * self.pad}x{w + 2 * self.pad}")
        if not 0.0 <= self.hflip_prob <= 1.0:
            raise DataError(f"hflip_prob must lie in [0, 1], got {self.hflip_prob}")


def augment(images: np.ndarray, policy: AugmentPolicy, seed: int, epoch: int,
            indices: Sequence[int]) -> np.ndarray:
    """Zero-pad, random crop and random horizontal flip, one generator per sample index."""
    if not policy.enabled:
        return images
    n, c, h, w = images.shape
    policy.validate((h, w))
    ch, cw = policy.crop or (h, w)
    p = policy.pad
    padded = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=images.dtype)
    padded[:, :, p:p + h, p:p + w] = images
    out = np.empty((n, c, ch, cw), dtype=images.dtype)
    for row, idx in enumerate(indices):
        rng = np.random.default_rng([seed, epoch, int(idx)])
        top = int(rng.integers(0, h + 2 * p - ch + 1))
        left = int(rng.integers(0, w + 2 * p - cw + 1))
        flip = rng.random() < policy.hflip_prob
        patch = padded[row, :, top:top + ch, left:left + cw]
        out[row] = patch[:, :, ::-1] if flip else patch
    return out


def corrupt_labels(ds: Dataset, fraction: float, seed: int) -> Dataset:
    """Reassign exactly floor(fraction * N) labels to a different class."""
    if not 0.0 <= fraction <= 1.0:
        raise DataError(f"fraction must lie in [0, 1], got {fraction}")
    n = len(ds)
    count = int(math.floor(fraction * n + 1e-9))
    if count == 0:
        return ds
    if ds.num_classes < 2:
        raise DataError("label corruption needs at least 2 classes")
    rng = np.random.default_rng(seed)
    chosen = rng.choice(n, size=count, replace=False)
    shift = rng.integers(1, ds.num_classes, size=count)
    labels = ds.labels.copy()
    labels[chosen] = (labels[chosen] + shift) % ds.num_classes
    return replace(ds, labels=labels)


def epoch_permutation(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def batches(ds_or_n, batch_size: int, seed: int, epoch: int) -> Iterator[np.ndarray]:
    """Index batches of a per-(seed, epoch) permutation; the last partial batch is kept."""
    if batch_size < 1:
        raise DataError(f"batch_size must be >= 1, got {batch_size}")
    n = ds_or_n if isinstance(ds_or_n, int) else len(ds_or_n)
    perm = epoch_permutation(n, seed, epoch)
    for start in range(0, n, batch_size):
        yield perm[start:start + batch_size]

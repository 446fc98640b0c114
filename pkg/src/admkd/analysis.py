"""Class activation maps, region masks, mIoU and curve files."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import List, Sequence, Tuple

import numpy as np

from .tensor import ShapeError

CURVE_HEADER = ("epoch", "metric", "value")
SOURCES = ("cam", "similarity", "reference")


class AnalysisError(ValueError):
    pass


@dataclass
class RegionMask:
    values: np.ndarray  # bool (H, W)
    source: str
    threshold: float

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=bool)
        if self.source not in SOURCES:
            raise AnalysisError(f"unknown mask source {self.source!r}")

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.values.shape


@dataclass(frozen=True)
class CurvePoint:
    epoch: int
    metric: str
    value: float

    def __post_init__(self):
        if self.epoch < 0:
            raise AnalysisError(f"epoch must be >= 0, got {self.epoch}")
        if not math.isfinite(self.value):
            raise AnalysisError(f"curve value for {self.metric!r} at epoch {self.epoch} is not finite")


def cam(features: np.ndarray, class_row: np.ndarray) -> np.ndarray:
    """CAM(i, j) = sum_k w_k * F_k(i, j) for features (C, H, W)."""
    f = np.asarray(features, dtype=np.float64)
    w = np.asarray(class_row, dtype=np.float64)
    if f.ndim != 3 or w.ndim != 1 or f.shape[0] != w.shape[0]:
        raise ShapeError(f"cam needs (C, H, W) features and a length-C row, got {f.shape} and {w.shape}")
    return np.tensordot(w, f, axes=(0, 0))


def threshold_mask(values: np.ndarray, rule: str = "frac-of-max", t: float = 0.5, source: str = "cam") -> RegionMask:
    """``frac-of-max``: v >= t * max(v);  ``mean-split``: v >= mean(v)."""
    v = np.asarray(values, dtype=np.float64)
    if not np.isfinite(v).all():
        raise AnalysisError("cannot threshold a map with non-finite entries")
    if rule == "frac-of-max":
        level = t * v.max()
    elif rule == "mean-split":
        level = v.mean()
    else:
        raise AnalysisError(f"unknown threshold rule {rule!r}")
    return RegionMask(v >= level, source, float(level))


def miou(a: RegionMask, b: RegionMask) -> float:
    """|a & b| / |a | b|, defined as 1.0 when both masks are empty."""
    if a.shape != b.shape:
        raise ShapeError(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = np.logical_or(a.values, b.values).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a.values, b.values).sum() / union)


def similarity_regions(s: np.ndarray) -> Tuple[RegionMask, RegionMask]:
    """Mean-split of one similarity sample (H, W) into similar and discrepancy masks."""
    similar = threshold_mask(s, "mean-split", source="similarity")
    discrepancy = RegionMask(~similar.values, "similarity", similar.threshold)
    return similar, discrepancy


# ----------------------------------------------------------------------
# curve files


def emit_curves(points: Sequence[CurvePoint], path) -> None:
    """Write ``epoch,metric,value`` rows sorted by (metric, epoch)."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(CURVE_HEADER)
            for p in sorted(points, key=lambda p: (p.metric, p.epoch)):
                writer.writerow([p.epoch, p.metric, repr(float(p.value))])
    except OSError as exc:
        raise AnalysisError(f"{path}: cannot write curves ({exc})") from None


def read_curves(path) -> List[CurvePoint]:
    """Read a curve file or a per-epoch training CSV.

    Training CSVs (one row per epoch and model) become points named
    ``<column>/<model>``; empty or non-finite cells are skipped.
    """
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise AnalysisError(f"{path}: cannot read curves ({exc})") from None
    if not rows:
        raise AnalysisError(f"{path}: empty file")
    header, body = rows[0], rows[1:]
    if tuple(header) == CURVE_HEADER:
        return [CurvePoint(int(r[0]), r[1], float(r[2])) for r in body]
    if header[:2] != ["epoch", "model"]:
        raise AnalysisError(f"{path}: unrecognized header {header}")
    points = []
    for r in body:
        epoch, model = int(r[0]), r[1]
        for col, cell in zip(header[2:], r[2:]):
            if cell == "":
                continue
            value = float(cell)
            if math.isfinite(value):
                points.append(CurvePoint(epoch, f"{col}/{model}", value))
    return points


def write_pgm(mask: RegionMask, path) -> None:
    """Binary PGM (P5, 8-bit) with 255 for set pixels."""
    h, w = mask.shape
    pix = np.where(mask.values, 255, 0).astype(np.uint8)
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + pix.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P5":
        raise AnalysisError(f"{path}: not a binary PGM")
    w, h = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)

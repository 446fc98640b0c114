"""Checkpoints as a JSON manifest plus a raw little-endian float32 blob.

``<stem>.json`` records the model spec, epoch, optimizer hyperparameters,
rng state and the (name, shape, offset, length) of every array; ``<stem>.bin``
holds the concatenated array payloads.  Offsets and lengths count float32
elements.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Mapping, Optional

import numpy as np

from .nn import Model, ModelSpec, SpecError

FORMAT_VERSION = 1
_LE_F32 = np.dtype("<f4")


class CheckpointError(RuntimeError):
    pass


@dataclass
class Checkpoint:
    manifest: dict
    arrays: Dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def spec(self) -> ModelSpec:
        return ModelSpec.from_dict(self.manifest["spec"])

    @property
    def epoch(self) -> int:
        return int(self.manifest["epoch"])

    @property
    def name(self) -> str:
        return self.manifest.get("name", self.manifest["spec"]["name"])

    @property
    def role(self) -> Optional[str]:
        return self.manifest.get("role")


def _paths(stem) -> tuple:
    stem = Path(stem)
    if stem.suffix in (".json", ".bin"):
        stem = stem.with_suffix("")
    return stem.with_name(stem.name + ".json"), stem.with_name(stem.name + ".bin")


def model_arrays(model: Model) -> Dict[str, np.ndarray]:
    arrays = {f"param/{k}": p.data for k, p in model.parameters().items()}
    arrays.update({f"buffer/{k}": v for k, v in model.buffers().items()})
    return arrays


def save_checkpoint(stem, model: Model, epoch: int, extra_arrays: Optional[Mapping[str, np.ndarray]] = None,
                    meta: Optional[dict] = None) -> Path:
    """Write ``stem.json`` and ``stem.bin``; returns the manifest path."""
    manifest_path, blob_path = _paths(stem)
    arrays = model_arrays(model)
    arrays.update(extra_arrays or {})
    entries = []
    offset = 0
    chunks = []
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr, dtype=_LE_F32)
        entries.append({"name": name, "shape": list(a.shape), "offset": offset, "length": int(a.size)})
        offset += a.size
        chunks.append(a.tobytes())
    manifest = {"format_version": FORMAT_VERSION, "spec": model.spec.to_dict(), "epoch": int(epoch)}
    manifest.update(meta or {})
    manifest["arrays"] = entries
    manifest["blob"] = blob_path.name
    manifest["blob_length"] = int(offset)
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    blob_path.write_bytes(b"".join(chunks))
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest_path


def load_checkpoint(path) -> Checkpoint:
    """Read and validate a checkpoint; every problem raises CheckpointError."""
    manifest_path, blob_path = _paths(path)
    try:
        manifest = json.loads(manifest_path.read_text())
    except FileNotFoundError:
        raise CheckpointError(f"{manifest_path}: no such checkpoint manifest") from None
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{manifest_path}: unreadable manifest ({exc})") from None
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{manifest_path}: format_version {version!r}, expected {FORMAT_VERSION}")
    for key in ("spec", "epoch", "arrays", "blob_length"):
        if key not in manifest:
            raise CheckpointError(f"{manifest_path}: manifest lacks {key!r}")
    blob_path = manifest_path.with_name(manifest.get("blob", blob_path.name))
    try:
        raw = blob_path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"{blob_path}: unreadable blob ({exc})") from None
    expected = int(manifest["blob_length"]) * _LE_F32.itemsize
    if len(raw) != expected:
        raise CheckpointError(f"{blob_path}: blob holds {len(raw)} bytes, manifest declares {expected}")
    flat = np.frombuffer(raw, dtype=_LE_F32)
    arrays = {}
    for entry in manifest["arrays"]:
        start, length = int(entry["offset"]), int(entry["length"])
        shape = tuple(entry["shape"])
        if start < 0 or start + length > flat.size or int(np.prod(shape)) != length:
            raise CheckpointError(f"{manifest_path}: array {entry['name']!r} has inconsistent extent")
        arrays[entry["name"]] = flat[start:start + length].astype(np.float32).reshape(shape)
    try:
        ModelSpec.from_dict(manifest["spec"]).validate()
    except (SpecError, TypeError, KeyError) as exc:
        raise CheckpointError(f"{manifest_path}: invalid spec ({exc})") from None
    return Checkpoint(manifest, arrays)


def restore_into(model: Model, ckpt: Checkpoint) -> None:
    """Copy parameters and buffers into ``model`` (shapes must agree)."""
    if ckpt.spec.to_dict() != model.spec.to_dict():
        raise CheckpointError(f"checkpoint spec {ckpt.spec.name!r} does not match model {model.spec.name!r}")
    for k, p in model.parameters().items():
        arr = ckpt.arrays.get(f"param/{k}")
        if arr is None or arr.shape != p.shape:
            raise CheckpointError(f"checkpoint lacks parameter {k!r} of shape {p.shape}")
        p.data = arr.copy()
    for k, buf in model.buffers().items():
        arr = ckpt.arrays.get(f"buffer/{k}")
        if arr is None or arr.shape != buf.shape:
            raise CheckpointError(f"checkpoint lacks buffer {k!r} of shape {buf.shape}")
        buf[...] = arr


def load_model(path) -> Model:
    """Rebuild a model from a checkpoint."""
    ckpt = load_checkpoint(path)
    model = Model(ckpt.spec, seed=0)
    restore_into(model, ckpt)
    return model

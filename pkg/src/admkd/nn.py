"""Layers and small staged convolutional classifiers.

A model is a stack of stages; each stage is ``blocks_per_stage`` repetitions
of conv -> [batchnorm] -> relu.  Every stage after the first opens with a
2x2 stride-2 convolution that halves the spatial extent; all other blocks
use padded 3x3 convolutions.  The output of each stage is exposed as
a feature tap.  The head is GAP followed by a linear classifier, and it can be
re-applied to re-weighted features (the attention losses rely on this).
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import asdict, dataclass
from typing import List, Optional, Tuple

import numpy as np

from . import tensor as T
from .tensor import Tensor


class SpecError(ValueError):
    """Invalid model specification."""


class InputError(ValueError):
    """Input does not match the model's declared input shape."""


class AdapterError(ValueError):
    """Adapter applied to features with the wrong channel count."""


class PairingError(ValueError):
    """Teacher/student pair has incompatible feature taps."""


@dataclass
class ModelSpec:
    name: str
    stage_widths: List[int]
    blocks_per_stage: int = 1
    input_shape: Tuple[int, int, int] = (3, 32, 32)
    num_classes: int = 10
    norm: str = "batchnorm"
    classifier_bias: bool = True

    def __post_init__(self):
        self.stage_widths = [int(w) for w in self.stage_widths]
        self.input_shape = tuple(int(v) for v in self.input_shape)
        self.validate()

    def validate(self) -> None:
        if not self.stage_widths:
            raise SpecError("stage_widths must be non-empty")
        if any(w <= 0 for w in self.stage_widths):
            raise SpecError(f"stage widths must be positive: {self.stage_widths}")
        if self.blocks_per_stage < 1:
            raise SpecError(f"blocks_per_stage must be >= 1, got {self.blocks_per_stage}")
        if len(self.input_shape) != 3 or any(v <= 0 for v in self.input_shape):
            raise SpecError(f"input_shape must be three positive extents, got {self.input_shape}")
        if self.num_classes < 1:
            raise SpecError(f"num_classes must be >= 1, got {self.num_classes}")
        if self.norm not in ("batchnorm", "none"):
            raise SpecError(f"norm must be 'batchnorm' or 'none', got {self.norm!r}")
        self.tap_shapes()

    def tap_shapes(self) -> List[Tuple[int, int, int]]:
        """(C, H, W) of every stage tap."""
        _, h, w = self.input_shape
        shapes = []
        for s, width in enumerate(self.stage_widths):
            if s > 0:
                if h < 2 or w < 2 or h % 2 or w % 2:
                    raise SpecError(f"stage {s} downsamples a {h}x{w} map; extents must be even and >= 2 "
                                    f"(input {self.input_shape}, {len(self.stage_widths)} stages)")
                h, w = h // 2, w // 2
            shapes.append((width, h, w))
        return shapes

    def parameter_count(self) -> int:
        """Analytic count of trainable scalars."""
        count = 0
        c_in = self.input_shape[0]
        for s, width in enumerate(self.stage_widths):
            for b in range(self.blocks_per_stage):
                count += width * c_in * (4 if (s > 0 and b == 0) else 9)
                count += 2 * width if self.norm == "batchnorm" else width
                c_in = width
        count += self.num_classes * c_in + (self.num_classes if self.classifier_bias else 0)
        return count

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(**d)


def preset_spec(preset: str, input_shape=(3, 32, 32), num_classes: int = 10, name: Optional[str] = None) -> ModelSpec:
    """Built-in families: ``tiny-a`` (teacher) and ``tiny-b`` (student)."""
    if preset == "tiny-a":
        return ModelSpec(name or preset, [32, 64, 128], 2, tuple(input_shape), num_classes)
    if preset == "tiny-b":
        return ModelSpec(name or preset, [16, 32, 64], 1, tuple(input_shape), num_classes)
    raise SpecError(f"unknown preset {preset!r} (expected 'tiny-a' or 'tiny-b')")


def _kaiming_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


class Conv2d:
    def __init__(self, c_in: int, c_out: int, kernel: int, stride: int = 1, pad: int = 0,
                 bias: bool = False, rng: Optional[np.random.Generator] = None):
        self.stride, self.pad = stride, pad
        fan_in = c_in * kernel * kernel
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weight = Tensor(_kaiming_uniform(rng, (c_out, c_in, kernel, kernel), fan_in), requires_grad=True)
        self.bias = Tensor(np.zeros(c_out, np.float32), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        out = T.conv2d(x, self.weight, self.stride, self.pad)
        if self.bias is not None:
            out = out + self.bias.reshape(1, -1, 1, 1)
        return out


class BatchNorm2d:
    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1):
        self.eps, self.momentum = eps, momentum
        self.gamma = Tensor(np.ones(channels, np.float32), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, np.float32), requires_grad=True)
        self.running_mean = np.zeros(channels, np.float32)
        self.running_var = np.ones(channels, np.float32)

    def __call__(self, x: Tensor, train: bool) -> Tensor:
        if not train:
            out, _, _ = T.batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var, self.eps)
            return out
        out, mu, var = T.batch_norm(x, self.gamma, self.beta, eps=self.eps)
        n = x.size // x.shape[1]
        unbiased = var * (n / max(n - 1, 1))
        m = np.float32(self.momentum)
        self.running_mean[...] = (1 - m) * self.running_mean + m * mu.astype(np.float32)
        self.running_var[...] = (1 - m) * self.running_var + m * unbiased.astype(np.float32)
        return out


class Linear:
    def __init__(self, c_in: int, c_out: int, bias: bool = True, rng: Optional[np.random.Generator] = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weight = Tensor(_kaiming_uniform(rng, (c_out, c_in), c_in), requires_grad=True)
        self.bias = Tensor(np.zeros(c_out, np.float32), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        out = T.matmul(x, T.transpose(self.weight))
        if self.bias is not None:
            out = out + self.bias
        return out


class Model:
    """Staged convnet: ``forward`` returns (stage taps, logits)."""

    def __init__(self, spec: ModelSpec, seed: int = 0):
        spec.validate()
        self.spec = spec
        rng = np.random.default_rng(seed)
        use_bn = spec.norm == "batchnorm"
        self.blocks: List[List[Tuple[Conv2d, Optional[BatchNorm2d]]]] = []
        c_in = spec.input_shape[0]
        for s, width in enumerate(spec.stage_widths):
            stage = []
            for b in range(spec.blocks_per_stage):
                if s > 0 and b == 0:
                    conv = Conv2d(c_in, width, 2, 2, 0, bias=not use_bn, rng=rng)
                else:
                    conv = Conv2d(c_in, width, 3, 1, 1, bias=not use_bn, rng=rng)
                stage.append((conv, BatchNorm2d(width) if use_bn else None))
                c_in = width
            self.blocks.append(stage)
        self.head = Linear(c_in, spec.num_classes, bias=spec.classifier_bias, rng=rng)

    # ------------------------------------------------------------------
    def parameters(self) -> "OrderedDict[str, Tensor]":
        params: "OrderedDict[str, Tensor]" = OrderedDict()
        for s, stage in enumerate(self.blocks):
            for b, (conv, bn) in enumerate(stage):
                params[f"stage{s}.block{b}.conv.weight"] = conv.weight
                if conv.bias is not None:
                    params[f"stage{s}.block{b}.conv.bias"] = conv.bias
                if bn is not None:
                    params[f"stage{s}.block{b}.bn.gamma"] = bn.gamma
                    params[f"stage{s}.block{b}.bn.beta"] = bn.beta
        params["head.weight"] = self.head.weight
        if self.head.bias is not None:
            params["head.bias"] = self.head.bias
        return params

    def buffers(self) -> "OrderedDict[str, np.ndarray]":
        bufs: "OrderedDict[str, np.ndarray]" = OrderedDict()
        for s, stage in enumerate(self.blocks):
            for b, (_, bn) in enumerate(stage):
                if bn is not None:
                    bufs[f"stage{s}.block{b}.bn.running_mean"] = bn.running_mean
                    bufs[f"stage{s}.block{b}.bn.running_var"] = bn.running_var
        return bufs

    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters().values())

    def set_trainable(self, flag: bool) -> None:
        for p in self.parameters().values():
            p.requires_grad = flag
            p.grad = None

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.grad = None

    # ------------------------------------------------------------------
    def classify(self, pooled: Tensor) -> Tensor:
        """Linear head applied to pooled (B, C_last) features."""
        return self.head(pooled)

    def forward(self, x, train: bool = False) -> Tuple[List[Tensor], Tensor]:
        x = x if isinstance(x, Tensor) else Tensor(x)
        if tuple(x.shape[1:]) != tuple(self.spec.input_shape):
            raise InputError(f"model {self.spec.name!r} expects (B, {self.spec.input_shape}), got {x.shape}")
        features = []
        h = x
        for stage in self.blocks:
            for conv, bn in stage:
                h = conv(h)
                if bn is not None:
                    h = bn(h, train)
                h = T.relu(h)
            features.append(h)
        logits = self.classify(T.gap(h))
        return features, logits

    __call__ = forward


def build_model(spec: ModelSpec, seed: int) -> Model:
    """Deterministic Kaiming-uniform initialization from ``seed``."""
    return Model(spec, seed)


class Adapter:
    """1x1 convolution mapping student channels to teacher channels."""

    def __init__(self, c_in: int, c_out: int, seed: int = 0, weight: Optional[np.ndarray] = None):
        self.c_in, self.c_out = c_in, c_out
        if weight is None:
            weight = _kaiming_uniform(np.random.default_rng(seed), (c_out, c_in, 1, 1), c_in)
        weight = np.asarray(weight, dtype=np.float32).reshape(c_out, c_in, 1, 1)
        self.weight = Tensor(weight, requires_grad=True)

    @classmethod
    def identity(cls, channels: int) -> "Adapter":
        return cls(channels, channels, weight=np.eye(channels, dtype=np.float32))

    def parameters(self) -> "OrderedDict[str, Tensor]":
        return OrderedDict(weight=self.weight)

    def __call__(self, fs: Tensor) -> Tensor:
        return adapt(self, fs)


def adapt(adapter: Adapter, fs: Tensor) -> Tensor:
    if fs.ndim != 4 or fs.shape[1] != adapter.c_in:
        raise AdapterError(f"adapter expects {adapter.c_in} input channels, got features of shape {fs.shape}")
    return T.conv2d(fs, adapter.weight, 1, 0)


def check_pairing(teacher: ModelSpec, student: ModelSpec) -> None:
    """Raise unless every stage tap has equal spatial extents."""
    t_taps, s_taps = teacher.tap_shapes(), student.tap_shapes()
    if len(t_taps) != len(s_taps):
        raise PairingError(f"stage count differs: teacher {len(t_taps)} vs student {len(s_taps)}")
    for i, (t, s) in enumerate(zip(t_taps, s_taps)):
        if t[1:] != s[1:]:
            raise PairingError(f"stage {i} spatial extents differ: teacher {t[1:]} vs student {s[1:]}")


def build_adapters(teacher: ModelSpec, student: ModelSpec, seed: int) -> List[Optional[Adapter]]:
    """One adapter per stage; ``None`` where channel counts already agree."""
    check_pairing(teacher, student)
    adapters: List[Optional[Adapter]] = []
    for i, (t, s) in enumerate(zip(teacher.tap_shapes(), student.tap_shapes())):
        adapters.append(None if t[0] == s[0] else Adapter(s[0], t[0], seed=seed * 1000 + i))
    return adapters


def apply_adapter(adapter: Optional[Adapter], fs: Tensor) -> Tensor:
    return fs if adapter is None else adapt(adapter, fs)

"""Central finite-difference gradient checking."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .tensor import DetachTape, Tensor, detach_tape, no_grad


@dataclass(frozen=True)
class GradCheckReport:
    op_name: str
    max_relative_error: float
    tolerance: float
    passed: bool


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """max_i |a_i - n_i| / max(|a_i|, |n_i|, floor)."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))


def numeric_gradient(f: Callable[[Tensor], Tensor], x: np.ndarray, eps: float) -> np.ndarray:
    """Central differences; values leaving ``detach`` stay frozen at the base point."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    tape = DetachTape()
    with no_grad(), detach_tape(tape):
        f(Tensor(x.copy()))
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            tape.rewind()
            plus = float(f(Tensor(x.copy())).data.sum())
            flat[i] = orig - eps
            tape.rewind()
            minus = float(f(Tensor(x.copy())).data.sum())
            flat[i] = orig
            gflat[i] = (plus - minus) / (2.0 * eps)
    return grad


def analytic_gradient(f: Callable[[Tensor], Tensor], x: np.ndarray) -> np.ndarray:
    xt = Tensor(np.array(x, dtype=np.float64), requires_grad=True)
    out = f(xt)
    if out.requires_grad:
        out.backward()
    return np.zeros_like(xt.data) if xt.grad is None else np.asarray(xt.grad, dtype=np.float64)


def grad_check(
    f: Callable[[Tensor], Tensor],
    x,
    eps: float = 1e-4,
    tol: float = 1e-4,
    name: str = "f",
) -> GradCheckReport:
    """Compare backprop against central differences, both in float64.

    ``f`` must map a tensor to a scalar tensor and be deterministic.
    """
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    x = x.data if isinstance(x, Tensor) else np.asarray(x)
    a = analytic_gradient(f, x)
    n = numeric_gradient(f, x, eps)
    err = relative_error(a, n)
    return GradCheckReport(name, err, tol, bool(err <= tol))

"""Central finite-difference gradient checks for tape ops."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor


def numerical_gradient(f: Callable[[], float], x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """d f / d x by central differences, perturbing ``x`` in place."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = f()
        flat[i] = orig - step
        fm = f()
        flat[i] = orig
        gf[i] = (fp - fm) / (2 * step)
    return g


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if scale == 0 else float(np.linalg.norm(a - b) / scale)


def check_gradients(
    fn: Callable[..., Tensor], inputs: Sequence[Tensor], step: float = 1e-5, weights: np.ndarray | None = None,
) -> list[float]:
    """Relative error between tape and finite-difference gradients of ``sum(w * fn(*inputs))``.

    ``weights`` defaults to a fixed random projection so every output
    element matters. Returns one error per input that requires grad.
    """
    out = fn(*inputs)
    if weights is None:
        weights = np.random.default_rng(1234).standard_normal(out.shape)
    weights = np.asarray(weights, dtype=np.float64)

    def scalar() -> float:
        return float((fn(*inputs).data.astype(np.float64) * weights).sum())

    for t in inputs:
        t.grad = None
    T.backward(out, weights.astype(out.data.dtype))
    errors = []
    for t in inputs:
        if not t.requires_grad:
            continue
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        numeric = numerical_gradient(scalar, t.data, step)
        errors.append(relative_error(analytic, numeric))
    return errors

"""Dense numeric primitives.

All functions are pure, operate on row-major numpy arrays, preserve the input
dtype (float32 for runtime, float64 for verification), and return finite
values for finite inputs. EPS is the single guard constant used wherever a
norm appears in a denominator.
"""

from __future__ import annotations

import numpy as np

from .errors import DimensionError, DomainError

EPS = 1e-8


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product of two 2-D arrays."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.ndim}-D and {b.ndim}-D")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"inner extents disagree: {a.shape} x {b.shape}")
    return np.ascontiguousarray(a @ b)


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Numerically stabilized softmax (max subtraction) along `axis`."""
    x = np.asarray(x)
    _check_axis(x, axis, "softmax")
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def logsumexp(x: np.ndarray, axis: int = -1) -> np.ndarray:
    x = np.asarray(x)
    m = np.max(x, axis=axis, keepdims=True)
    return np.squeeze(m, axis=axis) + np.log(np.sum(np.exp(x - m), axis=axis))


def sigmoid(x: np.ndarray) -> np.ndarray:
    """Logistic function, stable for large |x| (tanh form avoids overflow)."""
    x = np.asarray(x)
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def silu(x: np.ndarray) -> np.ndarray:
    """SiLU activation: x * sigmoid(x)."""
    return np.asarray(x) * sigmoid(x)


def silu_grad(x: np.ndarray) -> np.ndarray:
    """d silu(x) / dx = sigmoid(x) * (1 + x * (1 - sigmoid(x)))."""
    s = sigmoid(x)
    return s * (1.0 + np.asarray(x) * (1.0 - s))


def layer_norm(x: np.ndarray, gain: np.ndarray, bias: np.ndarray, axis: int = -1) -> np.ndarray:
    """Normalize to zero mean, unit variance along `axis`, then affine."""
    x = np.asarray(x)
    _check_axis(x, axis, "layer_norm")
    mu = np.mean(x, axis=axis, keepdims=True)
    var = np.mean((x - mu) ** 2, axis=axis, keepdims=True)
    xhat = (x - mu) / np.sqrt(var + EPS)
    return xhat * gain + bias


def l2_norm(x: np.ndarray, axis: int = -1) -> np.ndarray:
    x = np.asarray(x)
    _check_axis(x, axis, "l2_norm")
    return np.sqrt(np.sum(x * x, axis=axis))


def cosine_sim(a: np.ndarray, b: np.ndarray, axis: int = -1) -> np.ndarray:
    """Cosine similarity along `axis`; zero-norm operands yield 0 by convention.

    Denominators are guarded with max(norm, EPS) so cosine_sim(v, v) is exactly
    1 for any v with norm >= EPS.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise DimensionError(f"cosine_sim shape mismatch: {a.shape} vs {b.shape}")
    dot = np.sum(a * b, axis=axis)
    na = np.maximum(l2_norm(a, axis=axis), EPS)
    nb = np.maximum(l2_norm(b, axis=axis), EPS)
    return np.clip(dot / (na * nb), -1.0, 1.0)


def sinusoid_encoding(positions: np.ndarray, dim: int, dtype=np.float64) -> np.ndarray:
    """Sinusoidal code: first dim/2 lanes sine, last dim/2 cosine.

    Frequencies follow a geometric ladder with base 10000, so position 0 maps
    to all-zero sine lanes and all-one cosine lanes.
    """
    if dim % 2 != 0:
        raise DimensionError(f"sinusoid dim must be even, got {dim}")
    positions = np.asarray(positions, dtype=dtype)
    half = dim // 2
    freqs = np.power(10000.0, -np.arange(half, dtype=dtype) / half)
    angles = positions[..., None] * freqs
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=-1).astype(dtype)


def check_timestep_range(t: np.ndarray, total_steps: int) -> None:
    t = np.asarray(t)
    if np.any(t < 0) or np.any(t > total_steps):
        raise DomainError(f"timestep out of range [0, {total_steps}]: {t}")


def _check_axis(x: np.ndarray, axis: int, op: str) -> None:
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"{op}: axis {axis} invalid for {x.ndim}-D input")

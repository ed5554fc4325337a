"""Modality encoders: latent feature, timestep feature, token dropout, joint context."""

from __future__ import annotations

import numpy as np

from . import ops
from .errors import DimensionError
from .layers import LayerNorm, Linear, Module, ResidualSEBlock, SiLU


class LatentEncoder(Module):
    """Cascade of residual SE blocks, global average pooling, linear map to f_z.

    Default geometry: three blocks at channel widths 32 -> 64 -> 128, 3x3
    convolutions with stride 2, group normalization.
    """

    def __init__(self, rng, latent_shape: tuple[int, int, int], channels: tuple[int, ...],
                 out_dim: int, groups: int, dtype=np.float32):
        super().__init__(dtype)
        self.latent_shape = tuple(latent_shape)
        self.out_dim = out_dim
        c_prev = latent_shape[0]
        self.blocks: list[ResidualSEBlock] = []
        for i, c in enumerate(channels):
            block = ResidualSEBlock(rng, c_prev, c, stride=2, groups=groups, dtype=dtype)
            self.add_module(f"block{i}", block)
            self.blocks.append(block)
            c_prev = c
        self.head = self.add_module("head", Linear(rng, c_prev, out_dim, dtype))
        self._pool_shape = None

    def pooled(self, z: np.ndarray) -> np.ndarray:
        """Feature after the cascade and global average pooling, before the linear map."""
        if z.shape[1:] != self.latent_shape:
            raise DimensionError(f"latent shape {z.shape[1:]} != configured {self.latent_shape}")
        h = z
        for block in self.blocks:
            h = block.forward(h)
        self._pool_shape = h.shape
        return np.mean(h, axis=(2, 3))

    def forward(self, z: np.ndarray) -> np.ndarray:
        return self.head.forward(self.pooled(z))

    def backward(self, g: np.ndarray) -> np.ndarray:
        g_pool = self.head.backward(g)
        b, c, h, w = self._pool_shape
        gh = np.broadcast_to(g_pool[:, :, None, None], (b, c, h, w)) / (h * w)
        gh = np.ascontiguousarray(gh)
        for block in reversed(self.blocks):
            gh = block.backward(gh)
        return gh


class TimestepEncoder(Module):
    """Sinusoidal code of the step index, SiLU, LayerNorm."""

    def __init__(self, dim: int, total_steps: int, dtype=np.float32):
        super().__init__(dtype)
        self.dim = dim
        self.total_steps = total_steps
        self.act = self.add_module("act", SiLU(dtype))
        self.norm = self.add_module("norm", LayerNorm(dim, dtype))

    def sinusoid(self, t: np.ndarray) -> np.ndarray:
        ops.check_timestep_range(t, self.total_steps)
        return ops.sinusoid_encoding(np.asarray(t), self.dim, dtype=self.dtype)

    def forward(self, t: np.ndarray) -> np.ndarray:
        return self.norm.forward(self.act.forward(self.sinusoid(t)))

    def backward(self, g: np.ndarray) -> None:
        self.act.backward(self.norm.backward(g))
        return None  # t is an index, not a differentiable input


def token_dropout(p_emb: np.ndarray, rate: float, training: bool,
                  rng: np.random.Generator | None) -> np.ndarray:
    """Zero whole token vectors with independent Bernoulli(rate) draws.

    The mask multiplies without 1/(1-p) rescaling, and eval mode is the exact
    identity (the input array is returned unchanged).
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return p_emb
    keep = (rng.random(p_emb.shape[:-1]) >= rate).astype(p_emb.dtype)
    return p_emb * keep[..., None]


def joint_context(f_z: np.ndarray, f_t: np.ndarray,
                  expect_z: int | None = None, expect_t: int | None = None) -> np.ndarray:
    """Concatenate latent and timestep features along the feature axis."""
    if f_z.ndim != 2 or f_t.ndim != 2 or f_z.shape[0] != f_t.shape[0]:
        raise DimensionError(f"joint_context: incompatible shapes {f_z.shape}, {f_t.shape}")
    if expect_z is not None and f_z.shape[1] != expect_z:
        raise DimensionError(f"joint_context: latent feature width {f_z.shape[1]} != {expect_z}")
    if expect_t is not None and f_t.shape[1] != expect_t:
        raise DimensionError(f"joint_context: timestep feature width {f_t.shape[1]} != {expect_t}")
    return np.concatenate([f_z, f_t], axis=1)

"""Cross-attention fusion of the joint generative context with prompt tokens.

One global query per sample attends over the token sequence. Head outputs are
concatenated, projected, and layer-normalized into f_attn. Position
information is deliberately absent here, so f_attn is invariant to token
permutations (positions enter only in the guidance heads).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .errors import DimensionError, DomainError
from .layers import LayerNorm, Linear, Module


@dataclass
class FusedRepresentation:
    f_attn: np.ndarray        # (B, D)
    attn_weights: np.ndarray  # (B, H, L), each row sums to 1


class CrossAttentionFusion(Module):
    """softmax(q K^T / sqrt(d_head)) attention with a single query per sample.

    With heads=1 the scaling reduces to sqrt(D), matching the single-scale
    formulation exactly.
    """

    def __init__(self, rng, d_joint: int, d_model: int, heads: int, dtype=np.float32):
        super().__init__(dtype)
        if d_model % heads != 0:
            raise DimensionError(f"d_model {d_model} not divisible by heads {heads}")
        self.d_joint = d_joint
        self.d_model = d_model
        self.heads = heads
        self.d_head = d_model // heads
        self.w_q = self.add_module("w_q", Linear(rng, d_joint, d_model, dtype))
        # a key-projection bias shifts every score equally and cancels in the
        # softmax, so it is omitted rather than carried as dead weight
        self.w_k = self.add_module("w_k", Linear(rng, d_model, d_model, dtype, bias=False))
        self.w_v = self.add_module("w_v", Linear(rng, d_model, d_model, dtype))
        self.w_o = self.add_module("w_o", Linear(rng, d_model, d_model, dtype))
        self.norm = self.add_module("norm", LayerNorm(d_model, dtype))
        self._cache = None

    def forward(self, f_joint: np.ndarray, tokens: np.ndarray) -> FusedRepresentation:
        if tokens.ndim != 3 or tokens.shape[1] < 1:
            raise DomainError(f"tokens must be (B, L>=1, D), got {tokens.shape}")
        b, length, _ = tokens.shape
        h, dh = self.heads, self.d_head

        q = self.w_q.forward(f_joint).reshape(b, h, dh)
        k = self.w_k.forward(tokens).reshape(b, length, h, dh)
        v = self.w_v.forward(tokens).reshape(b, length, h, dh)

        scores = np.einsum("bhd,blhd->bhl", q, k, optimize=True) / np.sqrt(dh)
        weights = ops.softmax(scores, axis=-1)
        ctx = np.einsum("bhl,blhd->bhd", weights, v, optimize=True)
        out = self.norm.forward(self.w_o.forward(ctx.reshape(b, self.d_model)))

        self._cache = (q, k, v, weights, b, length)
        return FusedRepresentation(f_attn=out, attn_weights=weights)

    def backward(self, g_f_attn: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Return (grad_f_joint, grad_tokens)."""
        q, k, v, weights, b, length = self._cache
        h, dh = self.heads, self.d_head

        g_ctx = self.w_o.backward(self.norm.backward(g_f_attn)).reshape(b, h, dh)
        g_weights = np.einsum("bhd,blhd->bhl", g_ctx, v, optimize=True)
        g_v = np.einsum("bhl,bhd->blhd", weights, g_ctx, optimize=True)

        # softmax backward per (b, h) row
        dot = np.sum(g_weights * weights, axis=-1, keepdims=True)
        g_scores = weights * (g_weights - dot) / np.sqrt(dh)

        g_q = np.einsum("bhl,blhd->bhd", g_scores, k, optimize=True)
        g_k = np.einsum("bhl,bhd->blhd", g_scores, q, optimize=True)

        g_joint = self.w_q.backward(g_q.reshape(b, self.d_model))
        g_tokens = self.w_k.backward(g_k.reshape(b, length, self.d_model))
        g_tokens = g_tokens + self.w_v.backward(g_v.reshape(b, length, self.d_model))
        return g_joint, g_tokens

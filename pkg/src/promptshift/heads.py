"""Prediction heads: safety classifier, shift generator, token mask, adaptive scale."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .errors import DomainError
from .layers import Linear, LoRALinear, Module, MLP, SiLU


@dataclass
class GuidanceOutput:
    logits: np.ndarray  # (B, 2); class 1 = unsafe
    delta: np.ndarray   # (B, L, D) raw, unnormalized shift
    mask: np.ndarray    # (B, L) in (0, 1)
    alpha: np.ndarray   # (B, L, 1) in (0, 1)


def decide(logits: np.ndarray, tie_unsafe: bool = False) -> np.ndarray:
    """Argmax decision; exact ties resolve to safe (class 0) unless tie_unsafe."""
    if tie_unsafe:
        return (logits[..., 1] >= logits[..., 0]).astype(np.int64)
    return (logits[..., 1] > logits[..., 0]).astype(np.int64)


class Classifier(Module):
    """Two-hidden-layer MLP on the fused representation, two output logits."""

    def __init__(self, rng, d_in: int, hidden: int, dtype=np.float32):
        super().__init__(dtype)
        self.net = self.add_module("net", MLP(rng, [d_in, hidden, hidden, 2], dtype))

    def forward(self, f_attn: np.ndarray) -> np.ndarray:
        return self.net.forward(f_attn)

    def backward(self, g: np.ndarray) -> np.ndarray:
        return self.net.backward(g)


class DeltaHead(Module):
    """Per-token shift generator.

    The per-token feature concatenates the joint context, the fused
    representation, and the token embedding; the concat projection is factored
    into three linears summed together (identical function, cheaper because
    the first two inputs are per-sample). A low-rank adapter corrects the
    output layer additively.
    """

    def __init__(self, rng, d_joint: int, d_model: int, width: int, rank: int, dtype=np.float32):
        super().__init__(dtype)
        self.d_model = d_model
        self.proj_joint = self.add_module("proj_joint", Linear(rng, d_joint, width, dtype))
        self.proj_attn = self.add_module("proj_attn", Linear(rng, d_model, width, dtype))
        self.proj_tok = self.add_module("proj_tok", Linear(rng, d_model, width, dtype))
        self.act0 = self.add_module("act0", SiLU(dtype))
        self.lin1 = self.add_module("lin1", Linear(rng, width, width, dtype))
        self.act1 = self.add_module("act1", SiLU(dtype))
        self.out = self.add_module("out", LoRALinear(rng, width, d_model, rank, dtype))
        self._length = None

    def forward(self, f_joint: np.ndarray, f_attn: np.ndarray, tokens: np.ndarray) -> np.ndarray:
        self._length = tokens.shape[1]
        h = self.proj_tok.forward(tokens)
        h = h + self.proj_joint.forward(f_joint)[:, None, :]
        h = h + self.proj_attn.forward(f_attn)[:, None, :]
        return self.out.forward(self.act1.forward(self.lin1.forward(self.act0.forward(h))))

    def backward(self, g: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Return (grad_f_joint, grad_f_attn, grad_tokens)."""
        gh = self.act0.backward(self.lin1.backward(self.act1.backward(self.out.backward(g))))
        g_tokens = self.proj_tok.backward(gh)
        gh_sum = gh.sum(axis=1)
        g_joint = self.proj_joint.backward(gh_sum)
        g_attn = self.proj_attn.backward(gh_sum)
        return g_joint, g_attn, g_tokens


class SelfAttention(Module):
    """Single-head self-attention over the token axis."""

    def __init__(self, rng, d_in: int, d_attn: int, dtype=np.float32):
        super().__init__(dtype)
        self.d_attn = d_attn
        self.w_q = self.add_module("w_q", Linear(rng, d_in, d_attn, dtype))
        # key bias cancels in the row softmax; see CrossAttentionFusion
        self.w_k = self.add_module("w_k", Linear(rng, d_in, d_attn, dtype, bias=False))
        self.w_v = self.add_module("w_v", Linear(rng, d_in, d_attn, dtype))
        self._cache = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        q = self.w_q.forward(x)
        k = self.w_k.forward(x)
        v = self.w_v.forward(x)
        scores = np.einsum("bid,bjd->bij", q, k, optimize=True) / np.sqrt(self.d_attn)
        weights = ops.softmax(scores, axis=-1)
        out = np.einsum("bij,bjd->bid", weights, v, optimize=True)
        self._cache = (q, k, v, weights)
        return out

    def backward(self, g: np.ndarray) -> np.ndarray:
        q, k, v, weights = self._cache
        g_weights = np.einsum("bid,bjd->bij", g, v, optimize=True)
        g_v = np.einsum("bij,bid->bjd", weights, g, optimize=True)
        dot = np.sum(g_weights * weights, axis=-1, keepdims=True)
        g_scores = weights * (g_weights - dot) / np.sqrt(self.d_attn)
        g_q = np.einsum("bij,bjd->bid", g_scores, k, optimize=True)
        g_k = np.einsum("bij,bid->bjd", g_scores, q, optimize=True)
        gx = self.w_q.backward(g_q)
        gx = gx + self.w_k.backward(g_k)
        gx = gx + self.w_v.backward(g_v)
        return gx


class MaskHead(Module):
    """Self-attention over tokens, then a per-token MLP and sigmoid.

    When use_position is set, a sinusoidal position code is concatenated to
    each token before attention; disabling it makes the head exactly
    permutation-equivariant.
    """

    def __init__(self, rng, d_model: int, hidden: int, pos_dim: int,
                 use_position: bool, max_len: int, dtype=np.float32,
                 attn_dim: int | None = None):
        super().__init__(dtype)
        self.d_model = d_model
        self.pos_dim = pos_dim
        self.use_position = use_position
        d_in = d_model + (pos_dim if use_position else 0)
        attn_dim = attn_dim or d_model
        self.attn = self.add_module("attn", SelfAttention(rng, d_in, attn_dim, dtype))
        self.mlp = self.add_module("mlp", MLP(rng, [attn_dim, hidden, 1], dtype))
        self._pos_table = ops.sinusoid_encoding(np.arange(max_len), pos_dim, dtype=dtype) if use_position else None
        self._sig = None

    def forward(self, tokens: np.ndarray) -> np.ndarray:
        if tokens.shape[1] < 1:
            raise DomainError("mask head requires at least one token")
        x = tokens
        if self.use_position:
            b, length, _ = tokens.shape
            pos = np.broadcast_to(self._pos_table[None, :length, :], (b, length, self.pos_dim))
            x = np.concatenate([tokens, pos], axis=-1)
        z = self.mlp.forward(self.attn.forward(x))[..., 0]
        self._sig = ops.sigmoid(z)
        return self._sig

    def backward(self, g: np.ndarray) -> np.ndarray:
        gz = g * self._sig * (1.0 - self._sig)
        gx = self.attn.backward(self.mlp.backward(gz[..., None]))
        if self.use_position:
            gx = gx[..., : self.d_model]
        return np.ascontiguousarray(gx)


class AlphaHead(Module):
    """Per-token two-layer MLP with sigmoid, modulated by a learnable gate.

    The gate reads the token embedding concatenated with a sinusoidal position
    code, so alpha = sigmoid(mlp) * sigmoid(gate) lies strictly in (0, 1).
    """

    def __init__(self, rng, d_model: int, hidden: int, pos_dim: int, max_len: int, dtype=np.float32):
        super().__init__(dtype)
        self.d_model = d_model
        self.pos_dim = pos_dim
        self.mlp = self.add_module("mlp", MLP(rng, [d_model, hidden, 1], dtype))
        self.gate = self.add_module("gate", Linear(rng, d_model + pos_dim, 1, dtype))
        self._pos_table = ops.sinusoid_encoding(np.arange(max_len), pos_dim, dtype=dtype)
        self._a = None
        self._g = None

    def forward(self, tokens: np.ndarray) -> np.ndarray:
        b, length, _ = tokens.shape
        pos = np.broadcast_to(self._pos_table[None, :length, :], (b, length, self.pos_dim))
        self._a = ops.sigmoid(self.mlp.forward(tokens))
        self._g = ops.sigmoid(self.gate.forward(np.concatenate([tokens, pos], axis=-1)))
        return self._a * self._g

    def backward(self, g: np.ndarray) -> np.ndarray:
        a, gt = self._a, self._g
        g_a = g * gt * a * (1.0 - a)
        g_gate = g * a * gt * (1.0 - gt)
        gx = self.mlp.backward(g_a)
        gx = gx + self.gate.backward(g_gate)[..., : self.d_model]
        return np.ascontiguousarray(gx)

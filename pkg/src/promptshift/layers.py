"""Building blocks with hand-derived forward/backward pairs.

Every layer caches what its backward pass needs during forward, accumulates
parameter gradients into Param.grad on backward, and returns the gradient
with respect to its inputs. Parameters enumerate in registration order
(module declaration order, then field order), which is the frozen order used
by checkpoints and gradient checks.
"""

from __future__ import annotations

import numpy as np

from . import ops
from .errors import DimensionError


class Param:
    __slots__ = ("name", "value", "grad")

    def __init__(self, name: str, value: np.ndarray):
        self.name = name
        self.value = value
        self.grad = np.zeros_like(value)

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def __repr__(self) -> str:
        return f"Param({self.name}, shape={self.value.shape})"


class Module:
    """Base class holding parameters and children in a stable order."""

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self._entries: list[tuple[str, object]] = []

    def add_param(self, name: str, value: np.ndarray) -> Param:
        p = Param(name, np.ascontiguousarray(value, dtype=self.dtype))
        self._entries.append((name, p))
        return p

    def add_module(self, name: str, module: "Module") -> "Module":
        self._entries.append((name, module))
        return module

    def parameters(self) -> list[Param]:
        out: list[Param] = []
        for name, entry in self._entries:
            if isinstance(entry, Param):
                out.append(entry)
            else:
                for child in entry.parameters():
                    out.append(child)
        return out

    def named_parameters(self, prefix: str = "") -> list[tuple[str, Param]]:
        out: list[tuple[str, Param]] = []
        for name, entry in self._entries:
            full = f"{prefix}{name}"
            if isinstance(entry, Param):
                out.append((full, entry))
            else:
                out.extend(entry.named_parameters(prefix=full + "."))
        return out

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()


def he_init(rng: np.random.Generator, shape: tuple, fan_in: int, dtype) -> np.ndarray:
    scale = np.sqrt(2.0 / max(fan_in, 1))
    return (rng.standard_normal(shape) * scale).astype(dtype)


class Linear(Module):
    def __init__(self, rng, d_in: int, d_out: int, dtype=np.float32, bias: bool = True):
        super().__init__(dtype)
        self.d_in = d_in
        self.d_out = d_out
        self.w = self.add_param("w", he_init(rng, (d_out, d_in), d_in, dtype))
        self.b = self.add_param("b", np.zeros(d_out, dtype=dtype)) if bias else None
        self._x = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.shape[-1] != self.d_in:
            raise DimensionError(f"Linear expects width {self.d_in}, got {x.shape[-1]}")
        self._x = x
        out = x @ self.w.value.T
        if self.b is not None:
            out += self.b.value
        return out

    def backward(self, g: np.ndarray) -> np.ndarray:
        x2 = self._x.reshape(-1, self.d_in)
        g2 = g.reshape(-1, self.d_out)
        self.w.grad += g2.T @ x2
        if self.b is not None:
            self.b.grad += g2.sum(axis=0)
        return g @ self.w.value


class LoRALinear(Module):
    """Linear layer with an additive low-rank weight correction A @ B.T.

    A is random, B starts at zero, so the correction contributes exactly
    nothing at initialization and training breaks symmetry through B.
    """

    def __init__(self, rng, d_in: int, d_out: int, rank: int, dtype=np.float32):
        super().__init__(dtype)
        self.d_in = d_in
        self.d_out = d_out
        self.rank = rank
        self.w = self.add_param("w", he_init(rng, (d_out, d_in), d_in, dtype))
        self.b = self.add_param("b", np.zeros(d_out, dtype=dtype))
        self.lora_a = self.add_param("lora_a", he_init(rng, (d_out, rank), rank, dtype))
        self.lora_b = self.add_param("lora_b", np.zeros((d_in, rank), dtype=dtype))
        self._x = None
        self._xb = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._x = x
        self._xb = x @ self.lora_b.value
        return x @ self.w.value.T + self.b.value + self._xb @ self.lora_a.value.T

    def backward(self, g: np.ndarray) -> np.ndarray:
        x2 = self._x.reshape(-1, self.d_in)
        g2 = g.reshape(-1, self.d_out)
        xb2 = self._xb.reshape(-1, self.rank)
        self.w.grad += g2.T @ x2
        self.b.grad += g2.sum(axis=0)
        self.lora_a.grad += g2.T @ xb2
        ga = g2 @ self.lora_a.value
        self.lora_b.grad += x2.T @ ga
        return g @ self.w.value + (g @ self.lora_a.value) @ self.lora_b.value.T


class LayerNorm(Module):
    def __init__(self, dim: int, dtype=np.float32):
        super().__init__(dtype)
        self.dim = dim
        self.gain = self.add_param("gain", np.ones(dim, dtype=dtype))
        self.bias = self.add_param("bias", np.zeros(dim, dtype=dtype))
        self._xhat = None
        self._inv_std = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        mu = np.mean(x, axis=-1, keepdims=True)
        var = np.mean((x - mu) ** 2, axis=-1, keepdims=True)
        self._inv_std = 1.0 / np.sqrt(var + ops.EPS)
        self._xhat = (x - mu) * self._inv_std
        return self._xhat * self.gain.value + self.bias.value

    def backward(self, g: np.ndarray) -> np.ndarray:
        xhat = self._xhat
        reduce_axes = tuple(range(g.ndim - 1))
        self.gain.grad += np.sum(g * xhat, axis=reduce_axes)
        self.bias.grad += np.sum(g, axis=reduce_axes)
        gh = g * self.gain.value
        mean_gh = np.mean(gh, axis=-1, keepdims=True)
        mean_ghx = np.mean(gh * xhat, axis=-1, keepdims=True)
        return (gh - mean_gh - xhat * mean_ghx) * self._inv_std


class GroupNorm(Module):
    """Group normalization over (channel group, H, W) with per-channel affine."""

    def __init__(self, channels: int, groups: int, dtype=np.float32):
        super().__init__(dtype)
        if channels % groups != 0:
            raise DimensionError(f"channels {channels} not divisible by groups {groups}")
        self.channels = channels
        self.groups = groups
        self.gain = self.add_param("gain", np.ones(channels, dtype=dtype))
        self.bias = self.add_param("bias", np.zeros(channels, dtype=dtype))
        self._xhat = None
        self._inv_std = None
        self._shape = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        b, c, h, w = x.shape
        self._shape = (b, c, h, w)
        xg = x.reshape(b, self.groups, -1)
        mu = np.mean(xg, axis=2, keepdims=True)
        var = np.mean((xg - mu) ** 2, axis=2, keepdims=True)
        self._inv_std = 1.0 / np.sqrt(var + ops.EPS)
        xhat = ((xg - mu) * self._inv_std).reshape(b, c, h, w)
        self._xhat = xhat
        return xhat * self.gain.value[None, :, None, None] + self.bias.value[None, :, None, None]

    def backward(self, g: np.ndarray) -> np.ndarray:
        b, c, h, w = self._shape
        xhat = self._xhat
        self.gain.grad += np.sum(g * xhat, axis=(0, 2, 3))
        self.bias.grad += np.sum(g, axis=(0, 2, 3))
        gh = (g * self.gain.value[None, :, None, None]).reshape(b, self.groups, -1)
        xh = xhat.reshape(b, self.groups, -1)
        mean_gh = np.mean(gh, axis=2, keepdims=True)
        mean_ghx = np.mean(gh * xh, axis=2, keepdims=True)
        gx = (gh - mean_gh - xh * mean_ghx) * self._inv_std
        return gx.reshape(b, c, h, w)


class SiLU(Module):
    def __init__(self, dtype=np.float32):
        super().__init__(dtype)
        self._x = None
        self._sig = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._x = x
        self._sig = ops.sigmoid(x)
        return x * self._sig

    def backward(self, g: np.ndarray) -> np.ndarray:
        s = self._sig
        return g * (s * (1.0 + self._x * (1.0 - s)))


class Conv2d(Module):
    """3x3 convolution with padding 1, implemented via im2col matmul."""

    def __init__(self, rng, c_in: int, c_out: int, stride: int = 1, dtype=np.float32):
        super().__init__(dtype)
        self.c_in = c_in
        self.c_out = c_out
        self.stride = stride
        self.k = 3
        fan_in = c_in * self.k * self.k
        self.w = self.add_param("w", he_init(rng, (c_out, fan_in), fan_in, dtype))
        self.b = self.add_param("b", np.zeros(c_out, dtype=dtype))
        self._cols = None
        self._x_shape = None

    def _im2col(self, x: np.ndarray) -> tuple[np.ndarray, int, int]:
        """Extract 3x3 patches as rows of a (B * P, 9 * C) matrix for one GEMM."""
        b, c, h, w = x.shape
        s = self.k // 2
        xp = np.pad(x, ((0, 0), (0, 0), (s, s), (s, s)))
        h_out = (h + 2 * s - self.k) // self.stride + 1
        w_out = (w + 2 * s - self.k) // self.stride + 1
        p = h_out * w_out
        cols = np.empty((b, p, self.k * self.k, c), dtype=x.dtype)
        idx = 0
        for di in range(self.k):
            for dj in range(self.k):
                patch = xp[:, :, di : di + h_out * self.stride : self.stride,
                           dj : dj + w_out * self.stride : self.stride]
                cols[:, :, idx, :] = patch.reshape(b, c, p).transpose(0, 2, 1)
                idx += 1
        return cols.reshape(b * p, self.k * self.k * c), h_out, w_out

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.shape[1] != self.c_in:
            raise DimensionError(f"Conv2d expects {self.c_in} channels, got {x.shape[1]}")
        self._x_shape = x.shape
        cols, h_out, w_out = self._im2col(x)
        self._cols = cols
        # weight layout matches im2col rows: index = (ki*k + kj)*c_in + c
        out = cols @ self.w.value.T + self.b.value
        b = x.shape[0]
        return out.reshape(b, h_out * w_out, self.c_out).transpose(0, 2, 1).reshape(
            b, self.c_out, h_out, w_out)

    def backward(self, g: np.ndarray) -> np.ndarray:
        b, c, h, w = self._x_shape
        h_out, w_out = g.shape[2], g.shape[3]
        p = h_out * w_out
        g2 = np.ascontiguousarray(g.reshape(b, self.c_out, p).transpose(0, 2, 1)).reshape(
            b * p, self.c_out)
        self.w.grad += g2.T @ self._cols
        self.b.grad += g2.sum(axis=0)
        gcols = (g2 @ self.w.value).reshape(b, p, self.k * self.k, c)
        # col2im scatter-add
        s = self.k // 2
        gxp = np.zeros((b, c, h + 2 * s, w + 2 * s), dtype=g.dtype)
        idx = 0
        for di in range(self.k):
            for dj in range(self.k):
                patch = gcols[:, :, idx, :].transpose(0, 2, 1).reshape(b, c, h_out, w_out)
                gxp[:, :, di : di + h_out * self.stride : self.stride,
                    dj : dj + w_out * self.stride : self.stride] += patch
                idx += 1
        return gxp[:, :, s : s + h, s : s + w]


class SEGate(Module):
    """Squeeze-and-excitation channel gate.

    Global average pool -> linear to C/reduction -> SiLU -> linear to C ->
    sigmoid -> channel-wise multiply.
    """

    def __init__(self, rng, channels: int, reduction: int = 4, dtype=np.float32):
        super().__init__(dtype)
        hidden = max(channels // reduction, 1)
        self.fc1 = self.add_module("fc1", Linear(rng, channels, hidden, dtype))
        self.act = self.add_module("act", SiLU(dtype))
        self.fc2 = self.add_module("fc2", Linear(rng, hidden, channels, dtype))
        self._x = None
        self._gate = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._x = x
        pooled = np.mean(x, axis=(2, 3))
        z = self.fc2.forward(self.act.forward(self.fc1.forward(pooled)))
        self._gate = ops.sigmoid(z)
        return x * self._gate[:, :, None, None]

    def backward(self, g: np.ndarray) -> np.ndarray:
        gate = self._gate
        gx = g * gate[:, :, None, None]
        g_gate = np.sum(g * self._x, axis=(2, 3))
        gz = g_gate * gate * (1.0 - gate)
        g_pooled = self.fc1.backward(self.act.backward(self.fc2.backward(gz)))
        hw = self._x.shape[2] * self._x.shape[3]
        gx += g_pooled[:, :, None, None] / hw
        return gx


class ResidualSEBlock(Module):
    """conv -> group norm -> SiLU -> conv -> SE gate -> residual add.

    The shortcut is a strided 1x1-equivalent linear channel map so shapes
    match when the block downsamples.
    """

    def __init__(self, rng, c_in: int, c_out: int, stride: int, groups: int, dtype=np.float32):
        super().__init__(dtype)
        self.stride = stride
        self.conv_a = self.add_module("conv_a", Conv2d(rng, c_in, c_out, stride, dtype))
        self.norm = self.add_module("norm", GroupNorm(c_out, groups, dtype))
        self.act = self.add_module("act", SiLU(dtype))
        self.conv_b = self.add_module("conv_b", Conv2d(rng, c_out, c_out, 1, dtype))
        self.se = self.add_module("se", SEGate(rng, c_out, dtype=dtype))
        self.proj = self.add_param("proj", he_init(rng, (c_out, c_in), c_in, dtype))
        self._x_sub = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        h = self.se.forward(self.conv_b.forward(self.act.forward(self.norm.forward(self.conv_a.forward(x)))))
        x_sub = x[:, :, :: self.stride, :: self.stride]
        self._x_sub = x_sub
        shortcut = np.tensordot(x_sub, self.proj.value, axes=([1], [1]))  # (B, h, w, C_out)
        return h + np.moveaxis(shortcut, 3, 1)

    def backward(self, g: np.ndarray) -> np.ndarray:
        gx = self.conv_a.backward(self.norm.backward(self.act.backward(self.conv_b.backward(self.se.backward(g)))))
        self.proj.grad += np.tensordot(g, self._x_sub, axes=([0, 2, 3], [0, 2, 3]))
        g_sub = np.moveaxis(np.tensordot(g, self.proj.value, axes=([1], [0])), 3, 1)
        gx[:, :, :: self.stride, :: self.stride] += g_sub
        return gx


class MLP(Module):
    """Stack of Linear layers with SiLU between them (none after the last)."""

    def __init__(self, rng, widths: list[int], dtype=np.float32):
        super().__init__(dtype)
        self.layers: list[Module] = []
        for i in range(len(widths) - 1):
            lin = Linear(rng, widths[i], widths[i + 1], dtype)
            self.add_module(f"lin{i}", lin)
            self.layers.append(lin)
            if i < len(widths) - 2:
                act = SiLU(dtype)
                self.add_module(f"act{i}", act)
                self.layers.append(act)

    def forward(self, x: np.ndarray) -> np.ndarray:
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, g: np.ndarray) -> np.ndarray:
        for layer in reversed(self.layers):
            g = layer.backward(g)
        return g

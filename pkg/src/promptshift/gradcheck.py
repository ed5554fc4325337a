"""Finite-difference gradient checking oracle.

The analytic gradients under test come from the hand-derived backward passes;
the oracle is a central difference computed by perturbing each parameter
entry, so it shares no code path with the gradients it verifies.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import GradCheckAborted
from .layers import Param

GRAD_TOL = 1e-4


def grad_check(f: Callable[[], float], params: Sequence[Param], eps: float = 1e-5,
               max_entries: int | None = None) -> float:
    """Return the max relative error between analytic and central-difference grads.

    `f` is a forward-only scalar function of the current parameter values.
    Each Param.grad must already hold the analytic gradient of `f`. The
    relative error per entry is |g_a - g_fd| / max(|g_a|, |g_fd|, 1e-8), so an
    unused parameter (both gradients zero) scores exactly 0. With max_entries
    set, each parameter is swept on a deterministic stride so the total number
    of probed entries stays near the cap.
    """
    total = sum(p.value.size for p in params)
    stride = 1 if max_entries is None else max(1, total // max(max_entries, 1))
    worst = 0.0
    for p in params:
        if p.value.dtype != np.float64:
            raise GradCheckAborted(f"grad_check requires float64 params, {p.name} is {p.value.dtype}")
        flat = p.value.reshape(-1)
        gflat = p.grad.reshape(-1)
        for i in range(0, flat.size, stride):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = float(f())
            flat[i] = orig - eps
            f_minus = float(f())
            flat[i] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise GradCheckAborted(
                    f"non-finite loss while perturbing {p.name}[{i}]: f+={f_plus}, f-={f_minus}"
                )
            g_fd = (f_plus - f_minus) / (2.0 * eps)
            g_a = float(gflat[i])
            rel = abs(g_a - g_fd) / max(abs(g_a), abs(g_fd), 1e-8)
            if rel > worst:
                worst = rel
    return worst


# Scale applied to check losses: the relative accuracy of live gradients is
# scale-invariant, but numerically dead directions (true gradient far below
# the 1e-8 guard floor) would otherwise compare finite-difference rounding
# noise against the floor. Scaling the loss down pushes both gradients of a
# dead direction under the floor, where the guard forgives them.
CHECK_SCALE = 1e-3


def check_block(block, inputs: tuple, rng: np.random.Generator, eps: float = 1e-5,
                max_entries: int | None = None) -> float:
    """Gradient-check one forward/backward block against a random projection loss.

    The scalar loss is <r, block(inputs)> for a fixed random r, which exercises
    every output coordinate. Returns the max relative error over the block's
    parameters.
    """
    out = block.forward(*inputs)
    r = rng.standard_normal(out.shape) * CHECK_SCALE
    block.zero_grad()
    block.forward(*inputs)
    block.backward(r)

    def f() -> float:
        return float(np.sum(block.forward(*inputs) * r))

    return grad_check(f, block.parameters(), eps=eps, max_entries=max_entries)

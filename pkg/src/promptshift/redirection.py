"""Token-level redirection arithmetic, pseudo-mask labeling, baseline strategies.

Training form (redirect): the mask filters the raw shift before per-token
normalization, so the applied direction is the unit vector of delta * mask.
Inference form (redirect_from_base): the shift is normalized first and the
soft mask scales the normalized direction afterward; both forms scale by the
per-token reference norm of the prompt embedding.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .errors import ConfigError, DimensionError

BASELINE_STRATEGIES = ("direct_add", "pair_diff", "pair_diff_scaled", "pair_diff_masked")
FIXED_SCALES = (1.0, 1.5, 2.0, 3.0)


@dataclass
class RedirectionResult:
    p_hat: np.ndarray            # (B, L, D)
    applied_shift: np.ndarray    # (B, L, D); p_hat == p_emb + applied_shift exactly
    per_token_norms: np.ndarray  # (B, L) reference norms used


def _as_col(x: np.ndarray, b: int, length: int, name: str) -> np.ndarray:
    x = np.asarray(x)
    if x.shape == (b, length):
        return x[..., None]
    if x.shape == (b, length, 1):
        return x
    raise DimensionError(f"{name} must be (B, L) or (B, L, 1), got {x.shape}")


def redirect(p_emb: np.ndarray, delta: np.ndarray, mask: np.ndarray, alpha: np.ndarray,
             alpha_scale: float = 1.0, ref_norm: np.ndarray | None = None) -> RedirectionResult:
    """Apply the masked, normalized, norm-scaled token shift to the embedding."""
    if p_emb.shape != delta.shape:
        raise DimensionError(f"p_emb {p_emb.shape} and delta {delta.shape} disagree")
    if alpha_scale < 0:
        raise ConfigError(f"alpha_scale must be nonnegative, got {alpha_scale}")
    b, length, _ = p_emb.shape
    m = _as_col(mask, b, length, "mask")
    a = _as_col(alpha, b, length, "alpha")
    if ref_norm is None:
        n = ops.l2_norm(p_emb, axis=-1)[..., None]
    else:
        n = _as_col(ref_norm, b, length, "ref_norm")

    filtered = delta * m
    s = ops.l2_norm(filtered, axis=-1)[..., None]
    unit = filtered / (s + ops.EPS)
    shift = alpha_scale * a * unit * n
    return RedirectionResult(p_hat=p_emb + shift, applied_shift=shift,
                             per_token_norms=n[..., 0])


def redirect_training_cache(p_emb, delta, mask, alpha):
    """Forward pass of the training-form redirect keeping what backward needs."""
    b, length, _ = p_emb.shape
    m = _as_col(mask, b, length, "mask")
    a = _as_col(alpha, b, length, "alpha")
    n = ops.l2_norm(p_emb, axis=-1)[..., None]
    filtered = delta * m
    s = ops.l2_norm(filtered, axis=-1)[..., None]
    unit = filtered / (s + ops.EPS)
    p_hat = p_emb + a * unit * n
    return p_hat, (delta, m, a, n, filtered, s, unit)


def redirect_backward(cache, g_p_hat: np.ndarray):
    """Gradients of the training-form redirect w.r.t. (delta, mask, alpha).

    The reference norm depends only on p_emb, which carries no gradient here.
    """
    delta, m, a, n, filtered, s, unit = cache
    g_alpha = np.sum(g_p_hat * unit * n, axis=-1, keepdims=True)
    g_unit = g_p_hat * a * n
    dot = np.sum(g_unit * filtered, axis=-1, keepdims=True)
    denom = s * (s + ops.EPS) ** 2
    coeff = np.where(s > 1e-30, dot / np.where(s > 1e-30, denom, 1.0), 0.0)
    g_filtered = g_unit / (s + ops.EPS) - filtered * coeff
    g_delta = g_filtered * m
    g_mask = np.sum(g_filtered * delta, axis=-1)
    return g_delta, g_mask, g_alpha


def redirect_from_base(base_p_emb: np.ndarray, delta: np.ndarray, mask: np.ndarray,
                       alpha: np.ndarray, alpha_scale: float, ref_norm: np.ndarray,
                       hard_mask: bool = False) -> np.ndarray:
    """Inference-form redirect: normalize the raw shift, then mask and scale.

    The shift always applies to the base embedding, so repeated interventions
    never accumulate.
    """
    b, length, _ = base_p_emb.shape
    m = _as_col(mask, b, length, "mask")
    if hard_mask:
        m = (m >= 0.5).astype(base_p_emb.dtype)
    a = _as_col(alpha, b, length, "alpha")
    n = _as_col(ref_norm, b, length, "ref_norm")
    s = ops.l2_norm(delta, axis=-1)[..., None]
    unit = delta / (s + ops.EPS)
    return base_p_emb + alpha_scale * a * (m * unit) * n


def build_pseudo_mask(emb_safe: np.ndarray, emb_unsafe: np.ndarray, tau: float = 0.2) -> np.ndarray:
    """Binary mask flagging tokens whose paired embeddings differ by more than tau.

    A zero-norm token vector on either side gives cosine 0 by the guard
    convention, hence 1 - 0 = 1 > tau and the position is flagged.
    """
    if emb_safe.shape != emb_unsafe.shape:
        raise DimensionError(f"pair shapes disagree: {emb_safe.shape} vs {emb_unsafe.shape}")
    cos = ops.cosine_sim(emb_safe, emb_unsafe, axis=-1)
    return (1.0 - cos > tau).astype(np.float64)


def baseline_redirect(strategy: str, p_emb: np.ndarray, emb_safe: np.ndarray,
                      emb_unsafe: np.ndarray, alpha_fixed: float = 1.0, tau: float = 0.2,
                      safe_prototype: np.ndarray | None = None) -> np.ndarray:
    """The four fixed redirection strategies used as comparison points.

    direct_add adds a prototype safe embedding; pair_diff adds the paired
    vector difference; pair_diff_scaled multiplies that difference by a fixed
    scale; pair_diff_masked zeroes the shift outside pseudo-mask positions.
    """
    if strategy not in BASELINE_STRATEGIES:
        raise ConfigError(f"unknown strategy {strategy!r}; expected one of {BASELINE_STRATEGIES}")
    if strategy == "direct_add":
        if safe_prototype is None:
            raise ConfigError("direct_add requires a safe prototype embedding")
        return p_emb + safe_prototype
    diff = emb_safe - emb_unsafe
    if strategy == "pair_diff":
        return p_emb + diff
    if alpha_fixed not in FIXED_SCALES:
        raise ConfigError(f"alpha_fixed must be one of {FIXED_SCALES}, got {alpha_fixed}")
    if strategy == "pair_diff_scaled":
        return p_emb + alpha_fixed * diff
    mask = build_pseudo_mask(emb_safe, emb_unsafe, tau)
    return p_emb + alpha_fixed * diff * mask[..., None]

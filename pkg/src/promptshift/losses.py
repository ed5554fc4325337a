"""The training objective: five weighted terms plus an L2 penalty on the shift.

Each loss returns its scalar value together with gradients for the arrays it
consumes, so the training loop can route them through the model's backward
pass. Safe items supervise only the classifier; the redirection terms are
computed over the unsafe subset of the batch.
"""

from __future__ import annotations

import numpy as np

from . import ops
from .config import LossWeights
from .redirection import redirect_backward, redirect_training_cache

_CLAMP = 1e-7


def loss_cls(logits: np.ndarray, labels: np.ndarray, weights: LossWeights):
    """Label-smoothed cross entropy plus a confidence penalty (negative entropy)."""
    b = logits.shape[0]
    eps = weights.smoothing_eps
    onehot = np.zeros_like(logits)
    onehot[np.arange(b), labels.astype(int)] = 1.0
    y_smooth = (1.0 - eps) * onehot + eps / 2.0

    shifted = logits - np.max(logits, axis=1, keepdims=True)
    log_p = shifted - np.log(np.sum(np.exp(shifted), axis=1, keepdims=True))
    p = np.exp(log_p)

    ce = -np.sum(y_smooth * log_p) / b
    neg_entropy = np.sum(p * log_p, axis=1)
    penalty = weights.conf_penalty_w * np.mean(neg_entropy)
    value = ce + penalty

    d_logits = (p - y_smooth) / b
    d_logits += weights.conf_penalty_w * p * (log_p - neg_entropy[:, None]) / b
    return value, d_logits


def loss_mse(delta: np.ndarray, emb_safe: np.ndarray, emb_unsafe: np.ndarray,
             mask_star: np.ndarray | None = None):
    """Squared error between the predicted shift and the paired embedding shift.

    With mask_star given, the mean is restricted to pseudo-masked tokens; an
    empty mask contributes zero.
    """
    diff = delta - (emb_safe - emb_unsafe)
    if mask_star is None:
        n = diff.size
        value = float(np.sum(diff * diff) / n)
        return value, 2.0 * diff / n
    w = mask_star[..., None]
    n = float(np.sum(mask_star)) * delta.shape[-1]
    if n == 0:
        return 0.0, np.zeros_like(delta)
    value = float(np.sum(w * diff * diff) / n)
    return value, 2.0 * w * diff / n


def loss_cos(delta: np.ndarray, emb_safe: np.ndarray, emb_unsafe: np.ndarray):
    """One minus the mean per-sample cosine, each sample flattened over L x D."""
    b = delta.shape[0]
    a = delta.reshape(b, -1)
    target = (emb_safe - emb_unsafe).reshape(b, -1)
    na = np.maximum(np.sqrt(np.sum(a * a, axis=1)), ops.EPS)
    nb = np.maximum(np.sqrt(np.sum(target * target, axis=1)), ops.EPS)
    dot = np.sum(a * target, axis=1)
    c = dot / (na * nb)
    value = float(1.0 - np.mean(c))

    active = (np.sqrt(np.sum(a * a, axis=1)) > ops.EPS)[:, None]
    dc_da = target / (na * nb)[:, None] - np.where(active, c[:, None] * a / (na ** 2)[:, None], 0.0)
    d_delta = (-dc_da / b).reshape(delta.shape)
    return value, d_delta


def loss_mask(mask_pred: np.ndarray, mask_star: np.ndarray):
    """Mean binary cross-entropy with probability clamping at 1e-7."""
    pc = np.clip(mask_pred, _CLAMP, 1.0 - _CLAMP)
    n = mask_pred.size
    value = float(-np.sum(mask_star * np.log(pc) + (1.0 - mask_star) * np.log(1.0 - pc)) / n)
    inside = (mask_pred > _CLAMP) & (mask_pred < 1.0 - _CLAMP)
    d = np.where(inside, (pc - mask_star) / (pc * (1.0 - pc)) / n, 0.0)
    return value, d


def loss_alpha(p_emb: np.ndarray, delta: np.ndarray, mask: np.ndarray, alpha: np.ndarray,
               emb_safe: np.ndarray):
    """Squared deviation of the redirected embedding from the safe reference.

    The gradient flows jointly through delta, mask, and alpha via the
    training-form redirect.
    """
    p_hat, cache = redirect_training_cache(p_emb, delta, mask, alpha)
    diff = p_hat - emb_safe
    n = diff.size
    value = float(np.sum(diff * diff) / n)
    g_p_hat = 2.0 * diff / n
    g_delta, g_mask, g_alpha = redirect_backward(cache, g_p_hat)
    return value, g_delta, g_mask, g_alpha


def delta_l2(delta: np.ndarray):
    n = delta.size
    value = float(np.sum(delta * delta) / n)
    return value, 2.0 * delta / n


def total_loss(labels, p_emb, emb_safe, emb_unsafe, m_star, outputs, weights: LossWeights,
               mse_masked: bool = True):
    """Weighted sum of the five terms plus the shift L2 penalty.

    Returns (total, breakdown, grads) where breakdown holds each weighted
    contribution and sums exactly to total, and grads carries d_logits,
    d_delta, d_mask, d_alpha for the model backward pass.
    """
    logits, delta, mask, alpha = outputs.logits, outputs.delta, outputs.mask, outputs.alpha
    cls_value, d_logits = loss_cls(logits, labels, weights)

    d_delta = np.zeros_like(delta)
    d_mask = np.zeros_like(mask)
    d_alpha = np.zeros_like(alpha)
    unsafe = np.flatnonzero(labels == 1)

    mse_v = cos_v = mask_v = alpha_v = reg_v = 0.0
    if unsafe.size > 0:
        du = delta[unsafe]
        su, uu = emb_safe[unsafe], emb_unsafe[unsafe]
        mu = m_star[unsafe]

        if weights.lambda_mse > 0:
            mse_v, g = loss_mse(du, su, uu, mask_star=mu if mse_masked else None)
            d_delta[unsafe] += weights.lambda_mse * g
        if weights.lambda_cos > 0:
            cos_v, g = loss_cos(du, su, uu)
            d_delta[unsafe] += weights.lambda_cos * g
        if weights.lambda_mask > 0:
            mask_v, g = loss_mask(mask[unsafe], mu)
            d_mask[unsafe] += weights.lambda_mask * g
        if weights.lambda_alpha > 0:
            alpha_v, gd, gm, ga = loss_alpha(p_emb[unsafe], du, mask[unsafe], alpha[unsafe], su)
            d_delta[unsafe] += weights.lambda_alpha * gd
            d_mask[unsafe] += weights.lambda_alpha * gm
            d_alpha[unsafe] += weights.lambda_alpha * ga
        if weights.l2_delta_w > 0:
            reg_v, g = delta_l2(du)
            d_delta[unsafe] += weights.l2_delta_w * g

    breakdown = {
        "cls": weights.lambda_cls * cls_value,
        "mse": weights.lambda_mse * mse_v,
        "cos": weights.lambda_cos * cos_v,
        "mask": weights.lambda_mask * mask_v,
        "alpha": weights.lambda_alpha * alpha_v,
        "reg": weights.l2_delta_w * reg_v,
    }
    total = sum(breakdown.values())
    breakdown["total"] = total
    grads = {
        "d_logits": weights.lambda_cls * d_logits,
        "d_delta": d_delta,
        "d_mask": d_mask,
        "d_alpha": d_alpha,
    }
    return total, breakdown, grads

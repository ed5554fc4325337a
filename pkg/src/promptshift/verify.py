"""Finite-difference verification sweep over every encoder and head.

Runs at 64-bit on a reduced-width configuration that keeps the interface
dimensions of the desk setup (embedding width 64, 8 tokens, 4x8x8 latent)
while shrinking internal widths so the full central-difference sweep stays
under the runtime budget. Each block is checked against a random-projection
scalar loss; a composite check runs the finite-difference oracle through the
whole model and training objective.
"""

from __future__ import annotations

import numpy as np

from .config import AblationFlags, LossWeights, ModelConfig
from .gradcheck import GRAD_TOL, check_block, grad_check
from .losses import total_loss
from .model import RedirectorModel
from .redirection import build_pseudo_mask


def reduced_config() -> ModelConfig:
    return ModelConfig(
        embed_dim=64,
        latent_shape=(4, 8, 8),
        total_steps=50,
        latent_channels=(4, 6, 8),
        gn_groups=2,
        latent_feat=48,
        timestep_feat=16,
        heads=4,
        classifier_hidden=32,
        delta_width=32,
        adapter_rank=4,
        mask_hidden=16,
        mask_attn_dim=16,
        alpha_hidden=16,
        pos_dim=8,
        dropout=0.0,
        max_len=16,
        precision="float64",
    )


def _perturb_inert_params(model: RedirectorModel, rng: np.random.Generator) -> None:
    # move gains/biases off their identity init so their gradients are generic,
    # and give the low-rank adapter a nonzero B so its A matrix is exercised
    for _, p in model.named_parameters():
        if p.name in ("gain", "bias", "b"):
            p.value += 0.05 * rng.standard_normal(p.value.shape)
        if p.name == "lora_b":
            p.value += 0.05 * rng.standard_normal(p.value.shape)


def gradcheck_model(cfg: ModelConfig | None = None, eps: float = 1e-4, seed: int = 0,
                    batch: int = 2, length: int = 8) -> dict[str, float]:
    """Per-block and composite max relative errors of analytic vs FD gradients.

    The sweep step defaults to 1e-4 rather than the oracle's 1e-5 default:
    central differences on an O(1) loss bottom out near 1e-11 absolute, which
    for parameters with gradients around 1e-7 already exceeds the 1e-4
    relative tolerance at the smaller step. Truncation error at 1e-4 remains
    orders of magnitude below the tolerance for these smooth blocks.
    """
    cfg = cfg or reduced_config()
    if cfg.precision != "float64":
        raise ValueError("gradient checks require a float64 configuration")
    rng = np.random.default_rng(seed)
    model = RedirectorModel(cfg, rng)
    _perturb_inert_params(model, rng)

    z = rng.standard_normal((batch, *cfg.latent_shape))
    t = rng.integers(1, cfg.total_steps + 1, size=batch)
    tokens = rng.standard_normal((batch, length, cfg.embed_dim)) * 0.5
    f_joint = rng.standard_normal((batch, cfg.joint_dim()))
    f_attn = rng.standard_normal((batch, cfg.embed_dim))

    results: dict[str, float] = {}
    results["latent_encoder"] = check_block(model.latent_encoder, (z,), rng, eps=eps)
    results["timestep_encoder"] = check_block(model.timestep_encoder, (t,), rng, eps=eps)

    fusion = model.fusion
    from .gradcheck import CHECK_SCALE
    r = rng.standard_normal((batch, cfg.embed_dim)) * CHECK_SCALE
    fusion.zero_grad()
    fusion.forward(f_joint, tokens)
    fusion.backward(r)
    results["fusion"] = grad_check(
        lambda: float(np.sum(fusion.forward(f_joint, tokens).f_attn * r)),
        fusion.parameters(), eps=eps)

    results["classifier"] = check_block(model.classifier, (f_attn,), rng, eps=eps)
    results["delta_head"] = check_block(model.delta_head, (f_joint, f_attn, tokens), rng, eps=eps)
    results["mask_head"] = check_block(model.mask_head, (tokens,), rng, eps=eps)
    results["alpha_head"] = check_block(model.alpha_head, (tokens,), rng, eps=eps)
    results["composite_loss"] = composite_loss_check(model, rng, eps=eps,
                                                     batch=1, length=length)
    return results


def composite_loss_check(model: RedirectorModel, rng: np.random.Generator,
                         eps: float = 1e-4, batch: int = 2, length: int = 8,
                         max_entries: int | None = 8000) -> float:
    """FD check of the full training objective through the whole model.

    The per-block sweeps are exhaustive; this composite validates the
    inter-block gradient routing, for which a deterministic strided subset of
    entries suffices (a routing error shows up on a large share of entries).
    """
    from .gradcheck import CHECK_SCALE

    cfg = model.cfg
    z = rng.standard_normal((batch, *cfg.latent_shape))
    t = rng.integers(1, cfg.total_steps + 1, size=batch)
    labels = np.array([1] * (batch - batch // 2) + [0] * (batch // 2))
    emb_safe = rng.standard_normal((batch, length, cfg.embed_dim)) * 0.5
    emb_unsafe = emb_safe + 0.8 * rng.standard_normal((batch, length, cfg.embed_dim)) * (
        rng.random((batch, length, 1)) < 0.4)
    p_emb = np.where(labels[:, None, None] == 1, emb_unsafe, emb_safe)
    m_star = build_pseudo_mask(emb_safe, emb_unsafe) * (labels[:, None] == 1)
    weights = LossWeights()

    def forward_value() -> float:
        state = model.forward(z, t, p_emb, training=False)
        value, _, _ = total_loss(labels, p_emb, emb_safe, emb_unsafe, m_star,
                                 state.output, weights)
        return float(value) * CHECK_SCALE

    state = model.forward(z, t, p_emb, training=False)
    _, _, grads = total_loss(labels, p_emb, emb_safe, emb_unsafe, m_star,
                             state.output, weights)
    model.zero_grad()
    model.backward(grads["d_logits"] * CHECK_SCALE, grads["d_delta"] * CHECK_SCALE,
                   grads["d_mask"] * CHECK_SCALE, grads["d_alpha"] * CHECK_SCALE)
    return grad_check(forward_value, model.parameters(), eps=eps, max_entries=max_entries)


def format_report(results: dict[str, float]) -> str:
    lines = []
    for name, err in results.items():
        status = "ok" if err <= GRAD_TOL else "FAIL"
        lines.append(f"{name:20s} max_rel_err={err:.3e}  [{status}]")
    return "\n".join(lines)

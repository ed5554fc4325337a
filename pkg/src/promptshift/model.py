"""Full redirector: encoders, cross-attention fusion, and the four heads.

Ablation flags substitute a modality's feature rather than rewiring the
graph: no_latent and no_timestep feed zeros (their encoders are skipped
entirely, so their parameters see no gradient), and no_prompt replaces token
content with fixed unit-norm positional placeholders so the detector sees no
prompt information while latent information still flows through the
attention weights.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .config import AblationFlags, ModelConfig
from .encoders import LatentEncoder, TimestepEncoder, joint_context, token_dropout
from .errors import DimensionError
from .fusion import CrossAttentionFusion, FusedRepresentation
from .heads import AlphaHead, Classifier, DeltaHead, GuidanceOutput, MaskHead, decide
from .layers import Module


@dataclass
class ForwardState:
    output: GuidanceOutput
    fused: FusedRepresentation
    f_joint: np.ndarray
    batch_size: int
    length: int


class RedirectorModel(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator,
                 ablations: AblationFlags | None = None):
        cfg.validate()
        dtype = np.float32 if cfg.precision == "float32" else np.float64
        super().__init__(dtype)
        self.cfg = cfg
        self.ablations = ablations or AblationFlags()
        d = cfg.embed_dim
        self.latent_encoder = self.add_module(
            "latent_encoder",
            LatentEncoder(rng, cfg.latent_shape, cfg.latent_channels, cfg.latent_feat,
                          cfg.gn_groups, dtype))
        self.timestep_encoder = self.add_module(
            "timestep_encoder", TimestepEncoder(cfg.timestep_feat, cfg.total_steps, dtype))
        self.fusion = self.add_module(
            "fusion", CrossAttentionFusion(rng, cfg.joint_dim(), d, cfg.heads, dtype))
        self.classifier = self.add_module(
            "classifier", Classifier(rng, d, cfg.classifier_hidden, dtype))
        self.delta_head = self.add_module(
            "delta_head", DeltaHead(rng, cfg.joint_dim(), d, cfg.delta_width,
                                    cfg.adapter_rank, dtype))
        self.mask_head = self.add_module(
            "mask_head", MaskHead(rng, d, cfg.mask_hidden, cfg.pos_dim,
                                  cfg.mask_position, cfg.max_len, dtype,
                                  attn_dim=cfg.mask_attn_dim))
        self.alpha_head = self.add_module(
            "alpha_head", AlphaHead(rng, d, cfg.alpha_hidden, cfg.pos_dim, cfg.max_len, dtype))

        # content-free placeholders used when the prompt modality is ablated
        codes = ops.sinusoid_encoding(np.arange(cfg.max_len), d, dtype=dtype)
        self._placeholders = codes / np.linalg.norm(codes, axis=-1, keepdims=True)
        self._mask_const = None
        self._alpha_const = None

    def forward(self, z: np.ndarray, t: np.ndarray, tokens: np.ndarray,
                training: bool = False, rng: np.random.Generator | None = None) -> ForwardState:
        cfg = self.cfg
        if tokens.ndim != 3 or tokens.shape[-1] != cfg.embed_dim:
            raise DimensionError(f"tokens must be (B, L, {cfg.embed_dim}), got {tokens.shape}")
        b, length, d = tokens.shape
        a = self.ablations

        if a.no_prompt:
            tokens = np.broadcast_to(self._placeholders[None, :length, :], (b, length, d))
            tokens = np.ascontiguousarray(tokens)

        if a.no_latent:
            f_z = np.zeros((b, cfg.latent_feat), dtype=self.dtype)
        else:
            f_z = self.latent_encoder.forward(z.astype(self.dtype, copy=False))
        if a.no_timestep:
            f_t = np.zeros((b, cfg.timestep_feat), dtype=self.dtype)
        else:
            f_t = self.timestep_encoder.forward(t)
        f_joint = joint_context(f_z, f_t, cfg.latent_feat, cfg.timestep_feat)

        dropped = token_dropout(tokens, cfg.dropout, training, rng)
        fused = self.fusion.forward(f_joint, dropped)

        logits = self.classifier.forward(fused.f_attn)
        delta = self.delta_head.forward(f_joint, fused.f_attn, tokens)
        if a.no_mask:
            mask = np.ones((b, length), dtype=self.dtype)
        else:
            mask = self.mask_head.forward(tokens)
        if a.no_alpha:
            alpha = np.ones((b, length, 1), dtype=self.dtype)
        else:
            alpha = self.alpha_head.forward(tokens)

        out = GuidanceOutput(logits=logits, delta=delta, mask=mask, alpha=alpha)
        return ForwardState(output=out, fused=fused, f_joint=f_joint,
                            batch_size=b, length=length)

    def backward(self, d_logits: np.ndarray, d_delta: np.ndarray,
                 d_mask: np.ndarray, d_alpha: np.ndarray) -> None:
        a = self.ablations
        g_attn = self.classifier.backward(d_logits)
        g_joint_d, g_attn_d, _ = self.delta_head.backward(d_delta)
        g_attn = g_attn + g_attn_d
        if not a.no_mask:
            self.mask_head.backward(d_mask)
        if not a.no_alpha:
            self.alpha_head.backward(d_alpha)
        g_joint_f, _ = self.fusion.backward(g_attn)
        g_joint = g_joint_f + g_joint_d
        cfg = self.cfg
        if not a.no_latent:
            self.latent_encoder.backward(np.ascontiguousarray(g_joint[:, : cfg.latent_feat]))
        if not a.no_timestep:
            self.timestep_encoder.backward(np.ascontiguousarray(g_joint[:, cfg.latent_feat :]))

    def decide(self, logits: np.ndarray) -> np.ndarray:
        return decide(logits, tie_unsafe=self.cfg.tie_unsafe)

import numpy as np
import pytest

from promptshift.config import AblationFlags, ModelConfig
from promptshift.errors import DimensionError
from promptshift.gradcheck import GRAD_TOL
from promptshift.model import RedirectorModel
from promptshift.verify import composite_loss_check, gradcheck_model


def tiny_cfg(**kw):
    defaults = dict(embed_dim=16, latent_shape=(2, 4, 4), latent_channels=(3, 4), gn_groups=1,
                    latent_feat=12, timestep_feat=8, heads=2, classifier_hidden=8,
                    delta_width=16, adapter_rank=2, mask_hidden=8, mask_attn_dim=8,
                    alpha_hidden=8, pos_dim=4, dropout=0.0, max_len=8, precision="float64")
    defaults.update(kw)
    return ModelConfig(**defaults)


def make_inputs(cfg, b=3, length=5, seed=0):
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((b, *cfg.latent_shape))
    t = rng.integers(1, cfg.total_steps + 1, size=b)
    tokens = rng.standard_normal((b, length, cfg.embed_dim))
    return z, t, tokens


class TestForward:
    def test_output_shapes_and_ranges(self):
        cfg = tiny_cfg()
        model = RedirectorModel(cfg, np.random.default_rng(1))
        z, t, tokens = make_inputs(cfg)
        out = model.forward(z, t, tokens).output
        assert out.logits.shape == (3, 2)
        assert out.delta.shape == (3, 5, 16)
        assert out.mask.shape == (3, 5)
        assert out.alpha.shape == (3, 5, 1)
        assert np.all(np.isfinite(out.logits))
        assert np.all((out.mask > 0) & (out.mask < 1))
        assert np.all((out.alpha > 0) & (out.alpha < 1))

    def test_wrong_token_width_rejected(self):
        cfg = tiny_cfg()
        model = RedirectorModel(cfg, np.random.default_rng(1))
        z, t, _ = make_inputs(cfg)
        with pytest.raises(DimensionError):
            model.forward(z, t, np.zeros((3, 5, 8)))

    def test_eval_mode_deterministic_despite_dropout_config(self):
        cfg = tiny_cfg(dropout=0.4)
        model = RedirectorModel(cfg, np.random.default_rng(1))
        z, t, tokens = make_inputs(cfg)
        o1 = model.forward(z, t, tokens, training=False).output
        o2 = model.forward(z, t, tokens, training=False).output
        assert np.array_equal(o1.logits, o2.logits)

    def test_training_dropout_changes_fusion_path(self):
        cfg = tiny_cfg(dropout=0.5)
        model = RedirectorModel(cfg, np.random.default_rng(1))
        z, t, tokens = make_inputs(cfg)
        rng = np.random.default_rng(2)
        o1 = model.forward(z, t, tokens, training=True, rng=rng).output
        o2 = model.forward(z, t, tokens, training=True, rng=rng).output
        assert not np.array_equal(o1.logits, o2.logits)


class TestAblations:
    def test_no_mask_yields_constant_ones(self):
        cfg = tiny_cfg()
        model = RedirectorModel(cfg, np.random.default_rng(1), AblationFlags(no_mask=True))
        z, t, tokens = make_inputs(cfg)
        out = model.forward(z, t, tokens).output
        assert np.all(out.mask == 1.0)

    def test_no_alpha_yields_constant_ones(self):
        cfg = tiny_cfg()
        model = RedirectorModel(cfg, np.random.default_rng(1), AblationFlags(no_alpha=True))
        z, t, tokens = make_inputs(cfg)
        out = model.forward(z, t, tokens).output
        assert np.all(out.alpha == 1.0)

    def test_no_prompt_placeholders_are_unit_norm(self):
        cfg = tiny_cfg()
        model = RedirectorModel(cfg, np.random.default_rng(1), AblationFlags(no_prompt=True))
        norms = np.linalg.norm(model._placeholders, axis=-1)
        assert np.allclose(norms, 1.0, atol=1e-12)


class TestGradientRouting:
    def test_full_sweep_at_tiny_config(self):
        results = gradcheck_model(tiny_cfg(), length=4)
        for name, err in results.items():
            assert err <= GRAD_TOL, (name, err)

    def test_composite_under_input_ablations(self):
        # gradient routing must stay correct when modalities are substituted
        for flags in (AblationFlags(no_latent=True), AblationFlags(no_prompt=True),
                      AblationFlags(no_timestep=True)):
            cfg = tiny_cfg()
            rng = np.random.default_rng(5)
            model = RedirectorModel(cfg, rng, flags)
            err = composite_loss_check(model, rng, length=4, max_entries=1200)
            assert err <= GRAD_TOL, flags.active()


class TestDecide:
    def test_tie_unsafe_config(self):
        cfg = tiny_cfg(tie_unsafe=True)
        model = RedirectorModel(cfg, np.random.default_rng(1))
        tied = np.array([[0.5, 0.5]])
        assert model.decide(tied)[0] == 1
        cfg2 = tiny_cfg(tie_unsafe=False)
        model2 = RedirectorModel(cfg2, np.random.default_rng(1))
        assert model2.decide(tied)[0] == 0

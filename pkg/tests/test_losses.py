import math

import numpy as np
import pytest

from promptshift.config import LossWeights
from promptshift.gradcheck import GRAD_TOL, grad_check
from promptshift.heads import GuidanceOutput
from promptshift.layers import Param
from promptshift.losses import (
    delta_l2,
    loss_alpha,
    loss_cls,
    loss_cos,
    loss_mask,
    loss_mse,
    total_loss,
)


def loop_mse(delta, safe, unsafe):
    b, length, d = delta.shape
    acc = 0.0
    for i in range(b):
        for l in range(length):
            for k in range(d):
                diff = delta[i, l, k] - (safe[i, l, k] - unsafe[i, l, k])
                acc += diff * diff
    return acc / (b * length * d)


def loop_bce(pred, target):
    b, length = pred.shape
    acc = 0.0
    for i in range(b):
        for l in range(length):
            p = min(max(pred[i, l], 1e-7), 1 - 1e-7)
            acc -= target[i, l] * math.log(p) + (1 - target[i, l]) * math.log(1 - p)
    return acc / (b * length)


class TestClsLoss:
    def test_smoothed_target_values(self):
        w = LossWeights(smoothing_eps=0.05, conf_penalty_w=0.0)
        # label 1 smooths to [0.025, 0.975]; a near-delta prediction on class 1
        # then pays only the smoothed cross term
        logits = np.array([[0.0, 200.0]])
        value, _ = loss_cls(logits, np.array([1]), w)
        assert value == pytest.approx(0.025 * 200.0, rel=1e-6)

    def test_uniform_logits_ln2(self):
        w = LossWeights(smoothing_eps=0.0, conf_penalty_w=0.0)
        for label in (0, 1):
            value, _ = loss_cls(np.array([[0.0, 0.0]]), np.array([label]), w)
            assert value == pytest.approx(math.log(2.0), abs=1e-12)

    def test_confidence_penalty_minimal_at_uniform(self):
        w = LossWeights(smoothing_eps=0.0, conf_penalty_w=1.0)
        uniform, _ = loss_cls(np.array([[0.0, 0.0]]), np.array([0]), w)
        w0 = LossWeights(smoothing_eps=0.0, conf_penalty_w=0.0)
        peaked_pen = loss_cls(np.array([[3.0, 0.0]]), np.array([0]), w)[0] - \
            loss_cls(np.array([[3.0, 0.0]]), np.array([0]), w0)[0]
        uniform_pen = uniform - math.log(2.0)
        assert uniform_pen == pytest.approx(-math.log(2.0), abs=1e-12)
        assert peaked_pen > uniform_pen

    def test_gradient(self):
        rng = np.random.default_rng(0)
        w = LossWeights(smoothing_eps=0.05, conf_penalty_w=0.01)
        labels = np.array([0, 1, 1, 0])
        holder = Param("logits", rng.standard_normal((4, 2)))

        def run():
            return loss_cls(holder.value, labels, w)[0]

        _, grad = loss_cls(holder.value, labels, w)
        holder.grad[...] = grad
        assert grad_check(run, [holder]) <= GRAD_TOL


class TestMseLoss:
    def test_exact_match_zero(self):
        rng = np.random.default_rng(1)
        safe = rng.standard_normal((2, 3, 4))
        unsafe = rng.standard_normal((2, 3, 4))
        value, _ = loss_mse(safe - unsafe, safe, unsafe)
        assert value == 0.0

    def test_constant_offset_one(self):
        rng = np.random.default_rng(2)
        safe = rng.standard_normal((2, 3, 4))
        unsafe = rng.standard_normal((2, 3, 4))
        value, _ = loss_mse(safe - unsafe + 1.0, safe, unsafe)
        assert value == pytest.approx(1.0, abs=1e-12)

    def test_against_loop_oracle(self):
        rng = np.random.default_rng(3)
        delta = rng.standard_normal((3, 4, 5))
        safe = rng.standard_normal((3, 4, 5))
        unsafe = rng.standard_normal((3, 4, 5))
        value, _ = loss_mse(delta, safe, unsafe)
        assert abs(value - loop_mse(delta, safe, unsafe)) <= 1e-12

    def test_empty_mask_contributes_zero(self):
        rng = np.random.default_rng(4)
        delta = rng.standard_normal((2, 3, 4))
        value, grad = loss_mse(delta, delta, np.zeros_like(delta), mask_star=np.zeros((2, 3)))
        assert value == 0.0
        assert np.all(grad == 0.0)

    def test_masked_restriction(self):
        rng = np.random.default_rng(5)
        safe = rng.standard_normal((1, 2, 4))
        unsafe = rng.standard_normal((1, 2, 4))
        delta = safe - unsafe
        delta[0, 1] += 3.0  # error only at the unmasked token
        m = np.array([[1.0, 0.0]])
        value, grad = loss_mse(delta, safe, unsafe, mask_star=m)
        assert value == 0.0
        assert np.all(grad[0, 1] == 0.0)

    def test_gradient(self):
        rng = np.random.default_rng(6)
        safe = rng.standard_normal((2, 3, 4))
        unsafe = rng.standard_normal((2, 3, 4))
        m = (rng.random((2, 3)) > 0.4).astype(float)
        holder = Param("delta", rng.standard_normal((2, 3, 4)))

        def run():
            return loss_mse(holder.value, safe, unsafe, mask_star=m)[0]

        holder.grad[...] = loss_mse(holder.value, safe, unsafe, mask_star=m)[1]
        assert grad_check(run, [holder]) <= GRAD_TOL


class TestCosLoss:
    def test_positive_scaling_gives_zero(self):
        rng = np.random.default_rng(7)
        safe = rng.standard_normal((2, 3, 4))
        unsafe = rng.standard_normal((2, 3, 4))
        value, _ = loss_cos(2.7 * (safe - unsafe), safe, unsafe)
        assert value == pytest.approx(0.0, abs=1e-12)

    def test_negated_shift_gives_two(self):
        rng = np.random.default_rng(8)
        safe = rng.standard_normal((2, 3, 4))
        unsafe = rng.standard_normal((2, 3, 4))
        value, _ = loss_cos(-(safe - unsafe), safe, unsafe)
        assert value == pytest.approx(2.0, abs=1e-12)

    def test_orthogonal_gives_one(self):
        safe = np.zeros((1, 1, 2))
        unsafe = np.zeros((1, 1, 2))
        safe[0, 0, 0] = 1.0
        delta = np.zeros((1, 1, 2))
        delta[0, 0, 1] = 1.0
        value, _ = loss_cos(delta, safe, unsafe)
        assert value == pytest.approx(1.0, abs=1e-12)

    def test_gradient(self):
        rng = np.random.default_rng(9)
        safe = rng.standard_normal((3, 2, 4))
        unsafe = rng.standard_normal((3, 2, 4))
        holder = Param("delta", rng.standard_normal((3, 2, 4)))

        def run():
            return loss_cos(holder.value, safe, unsafe)[0]

        holder.grad[...] = loss_cos(holder.value, safe, unsafe)[1]
        assert grad_check(run, [holder]) <= GRAD_TOL


class TestMaskLoss:
    def test_perfect_prediction_tiny(self):
        target = np.array([[1.0, 0.0, 1.0]])
        value, _ = loss_mask(target.copy(), target)
        assert value <= 1e-6

    def test_half_everywhere_ln2(self):
        target = np.array([[1.0, 0.0]])
        value, _ = loss_mask(np.full((1, 2), 0.5), target)
        assert value == pytest.approx(math.log(2.0), abs=1e-12)

    def test_against_loop_oracle(self):
        rng = np.random.default_rng(10)
        pred = rng.random((3, 5))
        target = (rng.random((3, 5)) > 0.5).astype(float)
        value, _ = loss_mask(pred, target)
        assert abs(value - loop_bce(pred, target)) <= 1e-12

    def test_gradient(self):
        rng = np.random.default_rng(11)
        target = (rng.random((2, 4)) > 0.5).astype(float)
        holder = Param("pred", rng.random((2, 4)) * 0.8 + 0.1)

        def run():
            return loss_mask(holder.value, target)[0]

        holder.grad[...] = loss_mask(holder.value, target)[1]
        assert grad_check(run, [holder]) <= GRAD_TOL


class TestAlphaLoss:
    def test_redirected_equals_safe_gives_zero(self):
        rng = np.random.default_rng(12)
        p = rng.standard_normal((2, 3, 4))
        value, *_ = loss_alpha(p, rng.standard_normal((2, 3, 4)), np.ones((2, 3)),
                               np.zeros((2, 3, 1)), p)
        assert value == 0.0

    def test_constant_offset_squared(self):
        rng = np.random.default_rng(13)
        p = rng.standard_normal((2, 3, 4))
        safe = p - 2.0
        value, *_ = loss_alpha(p, rng.standard_normal((2, 3, 4)), np.ones((2, 3)),
                               np.zeros((2, 3, 1)), safe)
        assert value == pytest.approx(4.0, abs=1e-12)

    def test_joint_gradient_through_redirect(self):
        rng = np.random.default_rng(14)
        p = rng.standard_normal((2, 3, 4))
        safe = rng.standard_normal((2, 3, 4))
        hd = Param("delta", rng.standard_normal((2, 3, 4)))
        hm = Param("mask", rng.random((2, 3)) * 0.7 + 0.3)
        ha = Param("alpha", rng.random((2, 3, 1)))

        def run():
            return loss_alpha(p, hd.value, hm.value, ha.value, safe)[0]

        _, gd, gm, ga = loss_alpha(p, hd.value, hm.value, ha.value, safe)
        hd.grad[...] = gd
        hm.grad[...] = gm
        ha.grad[...] = ga
        assert grad_check(run, [hd, ha]) <= GRAD_TOL
        # the mask's gradient through this loss is guard-scale by construction
        # (uniform per-token scaling cancels in the normalization); see
        # test_redirection for the same bound
        assert grad_check(run, [hm], eps=1e-4) <= 2e-2


def crafted_unit_batch():
    """A batch on which every unweighted loss term equals exactly 1.

    One unsafe item, L=1, D=2. Logits chosen so smoothed CE is 1; delta is the
    true shift plus 1 (mse 1); the shift target for cosine is orthogonalized by
    construction below; mask prediction e^-1 against target 1 (bce 1); alpha 0
    makes the redirected embedding equal p_emb = safe + 1 (alpha loss 1).
    """
    labels = np.array([1])
    emb_safe = np.array([[[3.0, -1.0]]])
    emb_unsafe = np.array([[[1.0, 1.0]]])  # shift = [2, -2]
    p_emb = emb_safe + 1.0
    delta = (emb_safe - emb_unsafe) + 1.0  # mse == 1; delta = [3, -1]
    m_star = np.ones((1, 1))

    # cosine: solve nothing, instead pick delta orthogonal for the cos check
    return labels, p_emb, emb_safe, emb_unsafe, m_star, delta


class TestTotalLoss:
    def test_all_weights_zero(self):
        labels, p, safe, unsafe, m_star, delta = crafted_unit_batch()
        out = GuidanceOutput(logits=np.array([[0.0, 0.0]]), delta=delta,
                             mask=np.full((1, 1), 0.5), alpha=np.zeros((1, 1, 1)))
        w = LossWeights(lambda_cls=0, lambda_mse=0, lambda_cos=0, lambda_mask=0,
                        lambda_alpha=0, conf_penalty_w=0, l2_delta_w=0)
        total, breakdown, _ = total_loss(labels, p, safe, unsafe, m_star, out, w)
        assert total == 0.0

    def test_default_weight_arithmetic(self):
        labels, p, safe, unsafe, m_star, _ = crafted_unit_batch()
        shift = safe - unsafe  # [2, -2]
        delta_orth = np.array([[[2.0, 2.0]]]) + shift  # hmm: build via terms below

        # force each term to 1 independently:
        #   cls: logits [0, z] with label 1 and eps=0.05 solves to loss 1
        #   mse handled by +1 offset; cos by an orthogonal delta is separate,
        # so here mse and cos cannot both be 1 with one delta; craft per-term
        # weights instead: enable one term at a time and sum manually.
        out_delta_mse = GuidanceOutput(logits=np.array([[0.0, 0.0]]),
                                       delta=shift + 1.0,
                                       mask=np.full((1, 1), math.exp(-1.0)),
                                       alpha=np.zeros((1, 1, 1)))
        w = LossWeights(lambda_cls=0.0, lambda_mse=0.5, lambda_cos=0.0,
                        lambda_mask=0.1, lambda_alpha=1.0,
                        smoothing_eps=0.05, conf_penalty_w=0.0, l2_delta_w=0.0)
        total, breakdown, _ = total_loss(labels, p, safe, unsafe, m_star, out_delta_mse, w)
        # mse == 1, mask bce == 1, alpha == 1 (p_emb = safe + 1, alpha = 0)
        assert breakdown["mse"] == pytest.approx(0.5, abs=1e-12)
        assert breakdown["mask"] == pytest.approx(0.1, abs=1e-12)
        assert breakdown["alpha"] == pytest.approx(1.0, abs=1e-12)
        assert total == pytest.approx(1.6, abs=1e-12)

        orth = np.array([[[2.0, 2.0]]])  # orthogonal to shift [2, -2]: cos loss 1
        out_cos = GuidanceOutput(logits=np.array([[0.0, 0.0]]), delta=orth,
                                 mask=np.full((1, 1), 0.5), alpha=np.zeros((1, 1, 1)))
        w2 = LossWeights(lambda_cls=1.0, lambda_mse=0.0, lambda_cos=0.1,
                         lambda_mask=0.0, lambda_alpha=0.0,
                         smoothing_eps=0.0, conf_penalty_w=0.0, l2_delta_w=0.0)
        total2, breakdown2, _ = total_loss(labels, p, safe, unsafe, m_star, out_cos, w2)
        assert breakdown2["cos"] == pytest.approx(0.1, abs=1e-12)
        assert breakdown2["cls"] == pytest.approx(math.log(2.0), abs=1e-12)
        assert total2 == pytest.approx(math.log(2.0) + 0.1, abs=1e-12)

    def test_breakdown_sums_to_total(self):
        rng = np.random.default_rng(15)
        b, length, d = 4, 3, 6
        labels = np.array([0, 1, 1, 0])
        p = rng.standard_normal((b, length, d))
        safe = rng.standard_normal((b, length, d))
        unsafe = rng.standard_normal((b, length, d))
        m_star = (rng.random((b, length)) > 0.5).astype(float)
        out = GuidanceOutput(logits=rng.standard_normal((b, 2)),
                             delta=rng.standard_normal((b, length, d)),
                             mask=rng.random((b, length)) * 0.9 + 0.05,
                             alpha=rng.random((b, length, 1)))
        total, breakdown, _ = total_loss(labels, p, safe, unsafe, m_star, out, LossWeights())
        parts = sum(v for k, v in breakdown.items() if k != "total")
        assert abs(parts - total) <= 1e-12
        assert breakdown["total"] == total

    def test_all_safe_batch_has_only_cls(self):
        rng = np.random.default_rng(16)
        labels = np.zeros(3, dtype=int)
        p = rng.standard_normal((3, 2, 4))
        out = GuidanceOutput(logits=rng.standard_normal((3, 2)),
                             delta=rng.standard_normal((3, 2, 4)),
                             mask=rng.random((3, 2)),
                             alpha=rng.random((3, 2, 1)))
        total, breakdown, grads = total_loss(labels, p, p, p, np.zeros((3, 2)), out, LossWeights())
        assert breakdown["mse"] == 0.0 and breakdown["alpha"] == 0.0
        assert np.all(grads["d_delta"] == 0.0)
        assert np.all(grads["d_mask"] == 0.0)

    def test_losses_nonnegative_random(self):
        rng = np.random.default_rng(17)
        for _ in range(20):
            b, length, d = 3, 2, 4
            labels = rng.integers(0, 2, b)
            p = rng.standard_normal((b, length, d))
            safe = rng.standard_normal((b, length, d))
            unsafe = rng.standard_normal((b, length, d))
            m_star = (rng.random((b, length)) > 0.5).astype(float)
            out = GuidanceOutput(logits=rng.standard_normal((b, 2)),
                                 delta=rng.standard_normal((b, length, d)),
                                 mask=rng.random((b, length)) * 0.98 + 0.01,
                                 alpha=rng.random((b, length, 1)))
            total, breakdown, _ = total_loss(labels, p, safe, unsafe, m_star, out, LossWeights())
            assert all(v >= 0.0 for v in breakdown.values())


def test_delta_l2():
    rng = np.random.default_rng(18)
    d = rng.standard_normal((2, 3, 4))
    value, grad = delta_l2(d)
    assert value == pytest.approx(np.mean(d * d))
    assert np.allclose(grad, 2 * d / d.size)

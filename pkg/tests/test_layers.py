import numpy as np
import pytest

from promptshift.gradcheck import GRAD_TOL, check_block, grad_check
from promptshift.layers import (
    MLP,
    Conv2d,
    GroupNorm,
    LayerNorm,
    Linear,
    LoRALinear,
    Param,
    ResidualSEBlock,
    SEGate,
    SiLU,
)


def make_rng():
    return np.random.default_rng(42)


@pytest.mark.parametrize(
    "builder,input_shape",
    [
        (lambda rng: Linear(rng, 5, 4, np.float64), (3, 5)),
        (lambda rng: LoRALinear(rng, 5, 4, 2, np.float64), (3, 5)),
        (lambda rng: LayerNorm(6, np.float64), (3, 6)),
        (lambda rng: GroupNorm(6, 3, np.float64), (2, 6, 3, 3)),
        (lambda rng: SiLU(np.float64), (4, 5)),
        (lambda rng: Conv2d(rng, 3, 4, 1, np.float64), (2, 3, 4, 4)),
        (lambda rng: Conv2d(rng, 3, 4, 2, np.float64), (2, 3, 4, 4)),
        (lambda rng: SEGate(rng, 4, 2, np.float64), (2, 4, 3, 3)),
        (lambda rng: ResidualSEBlock(rng, 3, 5, 2, 1, np.float64), (2, 3, 4, 4)),
        (lambda rng: MLP(rng, [5, 7, 3], np.float64), (4, 5)),
    ],
)
def test_parameter_gradients(builder, input_shape):
    rng = make_rng()
    block = builder(rng)
    x = rng.standard_normal(input_shape)
    # perturb affine params away from the identity so their gradients are generic
    for p in block.parameters():
        if p.name in ("gain", "bias", "b"):
            p.value += 0.05 * rng.standard_normal(p.value.shape)
    assert check_block(block, (x,), rng) <= GRAD_TOL


@pytest.mark.parametrize(
    "builder,input_shape",
    [
        (lambda rng: Linear(rng, 5, 4, np.float64), (3, 5)),
        (lambda rng: LoRALinear(rng, 5, 4, 2, np.float64), (3, 5)),
        (lambda rng: LayerNorm(6, np.float64), (3, 6)),
        (lambda rng: GroupNorm(6, 3, np.float64), (2, 6, 3, 3)),
        (lambda rng: Conv2d(rng, 3, 4, 2, np.float64), (2, 3, 4, 4)),
        (lambda rng: SEGate(rng, 4, 2, np.float64), (2, 4, 3, 3)),
        (lambda rng: ResidualSEBlock(rng, 3, 5, 2, 1, np.float64), (2, 3, 4, 4)),
        (lambda rng: MLP(rng, [5, 7, 3], np.float64), (4, 5)),
    ],
)
def test_input_gradients(builder, input_shape):
    rng = make_rng()
    block = builder(rng)
    x = rng.standard_normal(input_shape)
    r = rng.standard_normal(block.forward(x).shape)
    block.zero_grad()
    block.forward(x)
    gx = block.backward(r)

    holder = Param("x", x.copy())
    holder.grad[...] = gx

    def f():
        return float(np.sum(block.forward(holder.value) * r))

    assert grad_check(f, [holder]) <= GRAD_TOL


def test_lora_zero_at_init():
    rng = make_rng()
    lora = LoRALinear(rng, 6, 4, 3, np.float64)
    plain_out = lora._x = None
    x = rng.standard_normal((5, 6))
    out = lora.forward(x)
    base = x @ lora.w.value.T + lora.b.value
    assert np.array_equal(out, base)
    assert np.all(lora.lora_b.value == 0.0)


def test_lora_nonzero_after_b_update():
    rng = make_rng()
    lora = LoRALinear(rng, 6, 4, 3, np.float64)
    x = rng.standard_normal((5, 6))
    lora.lora_b.value += 0.1
    out = lora.forward(x)
    base = x @ lora.w.value.T + lora.b.value
    assert not np.allclose(out, base)


def test_parameter_enumeration_order_is_stable():
    rng = make_rng()
    a = ResidualSEBlock(rng, 3, 5, 2, 1, np.float64)
    b = ResidualSEBlock(make_rng(), 3, 5, 2, 1, np.float64)
    names_a = [n for n, _ in a.named_parameters()]
    names_b = [n for n, _ in b.named_parameters()]
    assert names_a == names_b
    assert names_a[0].startswith("conv_a")


def test_conv_matches_direct_convolution():
    rng = make_rng()
    conv = Conv2d(rng, 2, 3, 1, np.float64)
    x = rng.standard_normal((1, 2, 5, 5))
    out = conv.forward(x)
    # direct sliding-window oracle
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    w = conv.w.value.reshape(3, 3, 3, 2)  # (c_out, ki, kj, c_in) per im2col layout
    expected = np.zeros_like(out)
    for co in range(3):
        for i in range(5):
            for j in range(5):
                acc = 0.0
                for ki in range(3):
                    for kj in range(3):
                        for ci in range(2):
                            acc += w[co, ki, kj, ci] * xp[0, ci, i + ki, j + kj]
                expected[0, co, i, j] = acc + conv.b.value[co]
    assert np.max(np.abs(out - expected)) <= 1e-12

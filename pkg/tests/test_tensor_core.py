import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from scipy.signal import correlate2d

from mdpnet import tensor_core as tc
from fd import fd_relative_error


def np_bilinear(img, out_h, out_w):
    """Half-pixel-centre bilinear resize of a 2-D array, written out directly."""
    h, w = img.shape
    out = np.zeros((out_h, out_w))
    for i in range(out_h):
        y = max((i + 0.5) * h / out_h - 0.5, 0.0)
        y0 = min(int(np.floor(y)), h - 1)
        y1 = min(y0 + 1, h - 1)
        wy = y - y0
        for j in range(out_w):
            x = max((j + 0.5) * w / out_w - 0.5, 0.0)
            x0 = min(int(np.floor(x)), w - 1)
            x1 = min(x0 + 1, w - 1)
            wx = x - x0
            out[i, j] = ((1 - wy) * ((1 - wx) * img[y0, x0] + wx * img[y0, x1])
                         + wy * ((1 - wx) * img[y1, x0] + wx * img[y1, x1]))
    return out


def test_conv2d_matches_scipy_correlation(rng):
    x = rng.normal(size=(3, 7, 6))
    k = rng.normal(size=(2, 3, 3, 5))
    b = rng.normal(size=2)
    out = tc.conv2d(torch.tensor(x), torch.tensor(k), torch.tensor(b)).numpy()
    expected = np.stack([sum(correlate2d(x[c], k[o, c], mode="same") for c in range(3)) + b[o] for o in range(2)])
    np.testing.assert_allclose(out, expected, atol=1e-12)


def test_conv2d_rejects_even_kernel_and_channel_mismatch():
    with pytest.raises(tc.ShapeError):
        tc.conv2d(torch.zeros(1, 4, 4), torch.zeros(1, 1, 2, 2))
    with pytest.raises(tc.ShapeError):
        tc.conv2d(torch.zeros(2, 4, 4), torch.zeros(1, 3, 3, 3))


def test_avg_pool_block_means(rng):
    x = rng.normal(size=(2, 3, 6, 9))
    out = tc.avg_pool2d(torch.tensor(x), 3).numpy()
    np.testing.assert_allclose(out, x.reshape(2, 3, 2, 3, 3, 3).mean(axis=(3, 5)), atol=1e-12)
    with pytest.raises(tc.ShapeError):
        tc.avg_pool2d(torch.zeros(1, 5, 6), 2)


@pytest.mark.parametrize("shape,target", [((3, 4), (6, 8)), ((2, 5), (7, 11)), ((4, 4), (4, 4))])
def test_upsample_bilinear_matches_direct_formula(rng, shape, target):
    img = rng.normal(size=shape)
    out = tc.upsample_bilinear(torch.tensor(img)[None], *target)[0].numpy()
    np.testing.assert_allclose(out, np_bilinear(img, *target), atol=1e-12)


def test_upsample_refuses_downsampling():
    with pytest.raises(tc.ShapeError):
        tc.upsample_bilinear(torch.zeros(1, 4, 4), 2, 4)


def test_group_norm_statistics(rng):
    x = rng.normal(3.0, 2.0, size=(2, 4, 5, 5))
    gain, shift = rng.normal(size=4), rng.normal(size=4)
    out = tc.group_norm(torch.tensor(x), 2, torch.tensor(gain), torch.tensor(shift)).numpy()
    g = x.reshape(2, 2, -1)
    norm = ((g - g.mean(-1, keepdims=True)) / np.sqrt(g.var(-1, keepdims=True) + 1e-5)).reshape(x.shape)
    np.testing.assert_allclose(out, norm * gain[:, None, None] + shift[:, None, None], atol=1e-10)
    with pytest.raises(tc.ShapeError):
        tc.group_norm(torch.zeros(3, 2, 2), 2)


def test_attention_matches_numpy_softmax(rng):
    q, k, v = rng.normal(size=(4, 8)), rng.normal(size=(6, 8)), rng.normal(size=(6, 3))
    logits = q @ k.T / math.sqrt(8)
    w = np.exp(logits - logits.max(1, keepdims=True))
    w /= w.sum(1, keepdims=True)
    out = tc.scaled_dot_attention(torch.tensor(q), torch.tensor(k), torch.tensor(v)).numpy()
    np.testing.assert_allclose(out, w @ v, atol=1e-12)
    with pytest.raises(tc.ShapeError):
        tc.attention_weights(torch.zeros(2, 3), torch.zeros(2, 4))


def test_linear_and_silu(rng):
    x, w, b = rng.normal(size=(5, 3)), rng.normal(size=(2, 3)), rng.normal(size=2)
    np.testing.assert_allclose(tc.linear(torch.tensor(x), torch.tensor(w), torch.tensor(b)).numpy(),
                               x @ w.T + b, atol=1e-12)
    np.testing.assert_allclose(tc.silu(torch.tensor(x)).numpy(), x / (1 + np.exp(-x)), atol=1e-12)
    with pytest.raises(tc.ShapeError):
        tc.linear(torch.zeros(2, 4), torch.zeros(2, 3))


def test_backward_zero_for_unreachable_and_scalar_only():
    a = torch.tensor([1.0, 2.0], requires_grad=True)
    b = torch.tensor([3.0], requires_grad=True)
    ga, gb = tc.backward((a ** 2).sum(), [a, b])
    assert torch.equal(ga, torch.tensor([2.0, 4.0]))
    assert torch.equal(gb, torch.zeros(1))
    with pytest.raises(tc.ShapeError):
        tc.backward(a * 2, [a])


OPS = {
    "conv2d": lambda x, p: tc.conv2d(x, p.reshape(2, 3, 1, 1).repeat(1, 1, 3, 3)),
    "avg_pool": lambda x, p: tc.avg_pool2d(x, 2) * p.sum(),
    "upsample": lambda x, p: tc.upsample_bilinear(x, 7, 9) * p.mean(),
    "group_norm": lambda x, p: tc.group_norm(x, 3, p[0], p[1]),
    "silu": lambda x, p: tc.silu(x * p.sum()),
    "attention": lambda x, p: tc.scaled_dot_attention(x[0], x[1] * p.mean(), x[2]),
    "linear": lambda x, p: tc.linear(x, p.reshape(-1)[:6].reshape(1, 6), p[0, :1]),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients_match_central_differences(name):
    gen = torch.Generator().manual_seed(3)
    x = torch.randn(3, 4, 6, generator=gen, dtype=torch.float64).requires_grad_()
    p = torch.randn(2, 3, generator=gen, dtype=torch.float64).requires_grad_()

    def loss():
        out = OPS[name](x, p)
        w = torch.randn(out.shape, generator=torch.Generator().manual_seed(9), dtype=out.dtype)
        return (out * w).sum()

    assert fd_relative_error(loss, [x, p]) <= 1e-3


def test_adam_matches_hand_computation():
    p = torch.tensor([1.0, -2.0], dtype=torch.float64)
    state = tc.AdamState.for_params([p], lr=0.1)
    m = v = np.zeros(2)
    ref = p.numpy().copy()
    for t, g in enumerate([np.array([0.5, -1.0]), np.array([0.2, 0.3])], start=1):
        tc.adam_step([p], [torch.tensor(g)], state)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref = ref - 0.1 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        np.testing.assert_allclose(p.numpy(), ref, rtol=1e-12)
    assert state.step == 2


def test_adam_shape_mismatch():
    with pytest.raises(tc.ShapeError):
        tc.adam_step([torch.zeros(2)], [torch.zeros(3)], tc.AdamState())


def test_init_is_seeded_and_bounded():
    def make():
        return tc.init_module_(torch.nn.Sequential(tc.Linear(9, 4), tc.GroupNorm(4)), seed=5)

    a, b = make(), make()
    for (name, pa), pb in zip(a.named_parameters(), b.parameters()):
        assert torch.equal(pa, pb)
    assert a[0].weight.abs().max() <= 1 / 3
    assert torch.equal(a[0].bias, torch.zeros(4))
    assert torch.equal(a[1].gain, torch.ones(4)) and torch.equal(a[1].shift, torch.zeros(4))
    c = tc.init_module_(torch.nn.Sequential(tc.Linear(9, 4), tc.GroupNorm(4)), seed=6)
    assert not torch.equal(a[0].weight, c[0].weight)


@settings(max_examples=25, deadline=None)
@given(h=st.integers(1, 6), w=st.integers(1, 6), f=st.integers(1, 3))
def test_pool_then_upsample_preserves_mean(h, w, f):
    x = torch.rand(1, 2, h * f, w * f, dtype=torch.float64)
    pooled = tc.avg_pool2d(x, f)
    assert torch.allclose(pooled.mean(dim=(-1, -2)), x.mean(dim=(-1, -2)))
    up = tc.upsample_bilinear(pooled, h * f, w * f)
    assert up.shape == x.shape
    assert up.max() <= pooled.max() + 1e-12 and up.min() >= pooled.min() - 1e-12

import numpy as np
import pytest

from mammoseg.autodiff import Parameter, Tensor, backward
from mammoseg.autodiff import functional as F
from mammoseg.autodiff.gradcheck import (LAYER_SUITES, check_gradients, numerical_gradient,
                                         relative_error, run_layer_suites)
from mammoseg.autodiff.nn import BatchNorm2d, Conv2d, Dense
from mammoseg.autodiff.optim import Adam, RMSProp


def naive_conv(x, w, stride, pad):
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for b in range(n):
        for f in range(o):
            for i in range(ho):
                for j in range(wo):
                    patch = xp[b, :, i * stride : i * stride + k, j * stride : j * stride + k]
                    out[b, f, i, j] = np.sum(patch * w[f])
    return out


def naive_conv_transpose(x, w, stride, pad):
    # scatter form: every input pixel stamps a weighted kernel into the output
    n, c, h, wd = x.shape
    _, o, k, _ = w.shape
    full = np.zeros((n, o, (h - 1) * stride + k, (wd - 1) * stride + k))
    for b in range(n):
        for ci in range(c):
            for i in range(h):
                for j in range(wd):
                    full[b, :, i * stride : i * stride + k, j * stride : j * stride + k] += x[b, ci, i, j] * w[ci]
    return full[:, :, pad : full.shape[2] - pad, pad : full.shape[3] - pad]


@pytest.mark.parametrize("stride,pad,k", [(1, 0, 3), (2, 1, 4), (1, 1, 4), (1, 4, 9)])
def test_conv2d_matches_loop_oracle(stride, pad, k):
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 3, 10, 10))
    w = rng.normal(size=(4, 3, k, k))
    out = F.conv2d(Tensor(x), Tensor(w), stride=stride, padding=pad).data
    np.testing.assert_allclose(out, naive_conv(x, w, stride, pad), atol=1e-10)


def test_conv2d_examples():
    out = F.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.full((1, 1, 1, 1), 2.0))).data
    np.testing.assert_array_equal(out, np.full((1, 1, 3, 3), 2.0))
    assert F.conv_output_size(256, 4, 2, 1) == 128
    chain = [256]
    for s in (2, 2, 2, 1, 1):
        chain.append(F.conv_output_size(chain[-1], 4, s, 1))
    assert chain == [256, 128, 64, 32, 31, 30]


def test_conv_transpose_matches_scatter_oracle():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(2, 3, 5, 5))
    w = rng.normal(size=(3, 2, 4, 4))
    out = F.conv_transpose2d(Tensor(x), Tensor(w), stride=2, padding=1).data
    assert out.shape == (2, 2, 10, 10)
    np.testing.assert_allclose(out, naive_conv_transpose(x, w, 2, 1), atol=1e-10)
    one = F.conv_transpose2d(Tensor(np.ones((1, 1, 1, 1))), Tensor(np.ones((1, 1, 4, 4))), stride=2, padding=1)
    np.testing.assert_array_equal(one.data, np.ones((1, 1, 2, 2)))
    assert F.conv_transpose_output_size(2, 4, 2, 1) == 4


def test_batchnorm_examples():
    bn = BatchNorm2d(1, dtype=np.float64)
    out = bn(Tensor(np.full((2, 1, 3, 3), 7.0))).data
    np.testing.assert_allclose(out, 0.0, atol=1e-12)
    x = np.array([1.0, 3.0]).reshape(2, 1, 1, 1)
    np.testing.assert_allclose(bn(Tensor(x)).data.ravel(), [-1, 1], atol=1e-5)
    bn2 = BatchNorm2d(1, dtype=np.float64)
    bn2.weight.data[:] = 2.0
    bn2.bias.data[:] = 3.0
    bn2.eval()
    assert bn2(Tensor(np.ones((1, 1, 1, 1)))).data.item() == pytest.approx(5.0, abs=1e-4)


def test_softmax_and_activations():
    np.testing.assert_allclose(F.softmax_rows(Tensor(np.zeros((1, 4)))).data, 0.25)
    rows = F.softmax_rows(Tensor(np.array([[1000.0, 0, -1000, 3]]))).data
    assert np.isfinite(rows).all() and rows.sum() == pytest.approx(1.0)
    x = np.array([-2.0, 0.5])
    np.testing.assert_allclose(F.leaky_relu(Tensor(x), 0.2).data, [-0.4, 0.5])
    np.testing.assert_allclose(F.relu(Tensor(x)).data, [0, 0.5])


def test_maxpool_and_dropout():
    x = np.random.default_rng(0).normal(size=(1, 2, 64, 64))
    out = F.maxpool2d(Tensor(x), 4, 4).data
    assert out.shape == (1, 2, 16, 16)
    np.testing.assert_array_equal(out, x.reshape(1, 2, 16, 4, 16, 4).max(axis=(3, 5)))
    np.testing.assert_array_equal(F.maxpool2d(Tensor(np.full((1, 1, 8, 8), 3.0))).data, 3.0)
    np.testing.assert_array_equal(F.dropout(Tensor(x), 0.0, np.random.default_rng(0)).data, x)
    np.testing.assert_array_equal(F.dropout(Tensor(x), 0.5, None, active=False).data, x)


def test_dense_identity_and_shape():
    x = np.random.default_rng(0).normal(size=(5, 3))
    out = F.dense(Tensor(x), Tensor(np.eye(3)), Tensor(np.zeros(3))).data
    np.testing.assert_array_equal(out, x)
    layer = Dense(256, 128)
    assert layer(Tensor(np.zeros((16, 256), np.float32))).shape == (16, 128)


def test_quadratic_gradient_and_accumulation():
    p = Parameter(np.array([1.0, -2.0, 3.0]))
    backward((p * p).sum())
    np.testing.assert_allclose(p.grad, 2 * p.data)
    backward((p * p).sum())
    np.testing.assert_allclose(p.grad, 4 * p.data)
    p.zero_grad()
    assert not np.any(p.grad)


def test_broadcast_gradients_reduce_to_shape():
    a = Parameter(np.ones((2, 3)))
    b = Parameter(np.ones(3))
    backward((a * b + b).sum())
    assert b.grad.shape == (3,)
    np.testing.assert_allclose(b.grad, [4.0, 4.0, 4.0])


def test_relative_error_and_numeric_gradient():
    arr = np.array([0.3, -1.2])
    num = numerical_gradient(lambda: float(np.sum(arr ** 3)), arr)
    np.testing.assert_allclose(num, 3 * arr ** 2, rtol=1e-7)
    assert relative_error(np.array([1.0, 2.0]), np.array([1.0, np.nan])) == 0.0


def test_skip_kinks_requires_probes():
    p = Parameter(np.zeros(3))
    with pytest.raises(ValueError):
        # every probe straddles the relu kink at zero
        check_gradients(lambda: F.relu(p).sum(), [p], skip_kinks=True)


def test_every_layer_suite_passes():
    results = run_layer_suites(seeds=range(3))
    assert {r.name for r in results} == set(LAYER_SUITES)
    for r in results:
        assert r.passed, (r.name, r.max_rel_error)


def test_adam_first_step_and_zero_gradient():
    p = Parameter(np.array([1.0, -1.0]))
    opt = Adam([p], lr=0.1, beta1=0.5, beta2=0.999)
    p.grad = np.array([3.0, -0.5])
    opt.step()
    # bias-corrected first step moves each coordinate by lr * sign(g)
    np.testing.assert_allclose(p.data, [0.9, -0.9], atol=1e-6)
    before = p.data.copy()
    p.grad = np.zeros(2)
    opt.step()
    assert np.all(np.abs(p.data - before) <= np.abs(before))


def test_rmsprop_matches_hand_update():
    p = Parameter(np.array([2.0]))
    opt = RMSProp([p], lr=0.01, alpha=0.9, momentum=0.9, eps=1e-7)
    g = 4.0
    p.grad = np.array([g])
    opt.step()
    v = 0.1 * g * g
    step = 0.01 * g / np.sqrt(v + 1e-7)
    assert p.data[0] == pytest.approx(2.0 - step, rel=1e-9)
    p.grad = np.array([g])
    opt.step()
    v2 = 0.9 * v + 0.1 * g * g
    step2 = 0.9 * step + 0.01 * g / np.sqrt(v2 + 1e-7)
    assert p.data[0] == pytest.approx(2.0 - step - step2, rel=1e-9)
    # eps floors the denominator: a zero history cannot blow the step up
    q = Parameter(np.array([0.0]))
    opt = RMSProp([q], lr=1.0, alpha=0.0, momentum=0.0, eps=1e-6)
    q.grad = np.array([1e-9])
    opt.step()
    assert abs(q.data[0]) <= 1e-9 / np.sqrt(1e-6) * 1.0001


def test_conv_module_counts():
    assert Conv2d(1, 64, 9, 1, 4, bias=False).num_parameters() == 64 * 81
    assert Conv2d(3, 8, 4, 2, 1).num_parameters() == 8 * 3 * 16 + 8

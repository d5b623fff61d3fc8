import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from simamnet.layers import (BatchNormParams, Conv2dParams, LinearParams, batchnorm, conv2d,
                             conv_out_extent, global_avg_pool, linear, maxpool2,
                             softmax_cross_entropy)
from simamnet.oracles import naive_conv2d
from simamnet.tensor import Tensor, TensorError, backward, grad_check, reduce


def _conv(w, b=None, stride=1, pad=0):
    return Conv2dParams(Tensor(np.asarray(w, dtype=np.float64), requires_grad=True),
                        None if b is None else Tensor(np.asarray(b, dtype=np.float64)),
                        stride, pad)


def test_conv_identity_kernel(rng):
    x = rng.standard_normal((2, 3, 5, 5))
    w = np.eye(3).reshape(3, 3, 1, 1)
    assert np.array_equal(conv2d(Tensor(x), _conv(w, np.zeros(3))).data, x)


def test_conv_all_ones():
    out = conv2d(Tensor(np.ones((1, 1, 3, 3))), _conv(np.ones((1, 1, 3, 3))))
    assert out.data.reshape(-1).tolist() == [9.0]


def test_conv_output_extent():
    assert conv_out_extent(8, 3, 2, 1) == 4
    out = conv2d(Tensor(np.ones((1, 1, 8, 8))), _conv(np.ones((2, 1, 3, 3)), stride=2, pad=1))
    assert out.shape == (1, 2, 4, 4)


def test_conv_errors():
    with pytest.raises(TensorError):
        conv2d(Tensor(np.ones((1, 2, 4, 4))), _conv(np.ones((1, 3, 3, 3))))
    with pytest.raises(TensorError):
        conv2d(Tensor(np.ones((1, 1, 2, 2))), _conv(np.ones((1, 1, 3, 3))))


@given(st.integers(1, 3), st.integers(1, 2), st.integers(0, 2), st.integers(4, 7),
       st.integers(0, 2 ** 31 - 1))
def test_conv_matches_naive_loops(k, s, pad, size, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 2, size, size + 1))
    w = rng.standard_normal((3, 2, k, k))
    b = rng.standard_normal(3)
    out = conv2d(Tensor(x), _conv(w, b, s, pad)).data
    np.testing.assert_allclose(out, naive_conv2d(x, w, b, s, pad), rtol=0, atol=1e-12)


def test_conv_large_input_uses_blocked_path(rng):
    # big enough for the row-blocked im2col path
    x = rng.standard_normal((2, 32, 24, 24))
    p = Conv2dParams.init(32, 8, 3, rng, pad=1)
    ref = naive_conv2d(x[:1, :, :6, :6], p.weight.data, None, 1, 1)
    out = conv2d(Tensor(x[:1, :, :6, :6]), p).data
    np.testing.assert_allclose(out, ref, atol=1e-12)
    big = conv2d(Tensor(x), p).data
    small = np.concatenate([conv2d(Tensor(x[i:i + 1]), p).data for i in range(2)])
    np.testing.assert_allclose(big, small, atol=1e-12)
    assert grad_check(lambda t, w: conv2d(t, Conv2dParams(w, None, 1, 1)),
                      [Tensor(x[:1, :, :12, :12]), p.weight], max_coords=30) < 1e-4


@pytest.mark.parametrize("k, s, pad", [(1, 1, 0), (1, 2, 0), (3, 1, 1), (3, 2, 1), (7, 2, 3)])
def test_conv_grad(k, s, pad, rng):
    x = Tensor(rng.standard_normal((2, 3, 9, 9)))
    p = Conv2dParams.init(3, 2, k, rng, stride=s, pad=pad, bias=True)
    f = lambda t, w, b: conv2d(t, Conv2dParams(w, b, s, pad))
    assert grad_check(f, [x, p.weight, Tensor(rng.standard_normal(2))]) < 1e-4


def test_conv_init_is_kaiming_uniform(rng):
    p = Conv2dParams.init(16, 32, 3, rng)
    bound = math.sqrt(6 / (16 * 9))
    assert np.abs(p.weight.data).max() <= bound
    assert p.bias is None


def test_batchnorm_constant_input_gives_beta():
    p = BatchNormParams.init(2)
    p.beta = Tensor(np.array([0.3, -1.2]), requires_grad=True)
    x = np.ones((2, 2, 3, 3)) * np.array([5.0, -2.0])[None, :, None, None]
    out = batchnorm(Tensor(x), p, "train").data
    assert np.allclose(out[:, 0], 0.3, atol=1e-12) and np.allclose(out[:, 1], -1.2, atol=1e-12)


def test_batchnorm_infer_identity(rng):
    p = BatchNormParams.init(3, eps=1e-12)
    x = rng.standard_normal((2, 3, 4, 4))
    np.testing.assert_allclose(batchnorm(Tensor(x), p, "infer").data, x, atol=1e-10)


def test_batchnorm_two_values():
    p = BatchNormParams.init(1, eps=1e-300)
    out = batchnorm(Tensor(np.array([1.0, 3.0]).reshape(1, 1, 1, 2)), p, "train")
    assert out.data.reshape(-1).tolist() == [-1.0, 1.0]


def test_batchnorm_rejects_single_element_and_bad_eps():
    with pytest.raises(TensorError):
        batchnorm(Tensor(np.ones((1, 1, 1, 1))), BatchNormParams.init(1), "train")
    with pytest.raises(TensorError):
        BatchNormParams.init(1, eps=0.0)


def test_batchnorm_train_statistics(rng):
    p = BatchNormParams.init(3)
    p.beta = Tensor(np.array([0.5, -1.0, 2.0]), requires_grad=True)
    x = rng.standard_normal((4, 3, 5, 5)) * 3 + 1
    out = batchnorm(Tensor(x), p, "train").data
    np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), p.beta.data, atol=1e-12)
    var = x.var(axis=(0, 2, 3))
    np.testing.assert_allclose(out.var(axis=(0, 2, 3)), var / (var + p.eps), atol=1e-6)


def test_batchnorm_running_stats_update(rng):
    p = BatchNormParams.init(2)
    x = rng.standard_normal((3, 2, 4, 4)) + 2
    batchnorm(Tensor(x), p, "train")
    m = 3 * 16
    np.testing.assert_allclose(p.running_mean.data, 0.1 * x.mean(axis=(0, 2, 3)))
    np.testing.assert_allclose(p.running_var.data,
                               0.9 + 0.1 * x.var(axis=(0, 2, 3)) * m / (m - 1))


def test_batchnorm_grad(rng):
    x = Tensor(rng.standard_normal((2, 3, 4, 4)))
    g = Tensor(rng.uniform(0.5, 1.5, 3))
    b = Tensor(rng.standard_normal(3))
    rm, rv = Tensor(np.zeros(3)), Tensor(np.ones(3))
    f = lambda t, gg, bb: batchnorm(t, BatchNormParams(gg, bb, rm, rv), "train")
    assert grad_check(f, [x, g, b]) < 1e-4
    fi = lambda t, gg, bb: batchnorm(t, BatchNormParams(gg, bb, rm, rv), "infer")
    assert grad_check(fi, [x, g, b]) < 1e-4


def test_maxpool_examples():
    assert maxpool2(Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))).data.item() == 4
    c = maxpool2(Tensor(np.full((1, 2, 4, 6), 1.5)))
    assert c.shape == (1, 2, 2, 3) and np.all(c.data == 1.5)
    x = Tensor(np.full((1, 1, 2, 2), 5.0), requires_grad=True)
    out = maxpool2(x)
    assert out.data.item() == 5
    backward(reduce("sum", out))
    assert x.grad.reshape(-1).tolist() == [1, 0, 0, 0]
    with pytest.raises(TensorError):
        maxpool2(Tensor(np.ones((1, 1, 3, 4))))


def test_maxpool_grad(rng):
    x = rng.permutation(96).reshape(2, 3, 4, 4) * 0.01
    assert grad_check(maxpool2, [Tensor(x)]) < 1e-4


def test_global_avg_pool_examples(rng):
    assert np.all(global_avg_pool(Tensor(np.full((2, 3, 4, 4), 3.0))).data == 3)
    assert global_avg_pool(Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))).data.item() == 2.5
    x = rng.standard_normal((2, 3, 1, 1))
    assert np.array_equal(global_avg_pool(Tensor(x)).data, x[:, :, 0, 0])
    assert grad_check(global_avg_pool, [Tensor(rng.standard_normal((2, 3, 3, 2)))]) < 1e-4


def test_linear_examples(rng):
    x = rng.standard_normal((3, 4))
    eye = LinearParams(Tensor(np.eye(4)), Tensor(np.zeros(4)))
    assert np.array_equal(linear(Tensor(x), eye).data, x)
    p = LinearParams(Tensor(np.array([[1.0, 1.0]])), Tensor(np.array([0.5])))
    assert linear(Tensor(np.array([[1.0, 2.0]])), p).data.tolist() == [[3.5]]
    with pytest.raises(TensorError):
        linear(Tensor(np.ones((1, 3))), p)


def test_linear_grad(rng):
    f = lambda t, w, b: linear(t, LinearParams(w, b))
    assert grad_check(f, [Tensor(rng.standard_normal((4, 5))), Tensor(rng.standard_normal((3, 5))),
                          Tensor(rng.standard_normal(3))]) < 1e-4


def test_softmax_cross_entropy_examples():
    assert softmax_cross_entropy(Tensor(np.zeros((2, 3))), [0, 2]).item() == \
        pytest.approx(math.log(3), abs=1e-12)
    big = softmax_cross_entropy(Tensor(np.array([[1000.0, 0.0, 0.0]])), [0])
    assert big.item() == pytest.approx(0.0, abs=1e-12)
    two = softmax_cross_entropy(Tensor(np.array([[0.0, math.log(3)]])), [0])
    assert two.item() == pytest.approx(math.log(4), abs=1e-12)
    with pytest.raises(TensorError):
        softmax_cross_entropy(Tensor(np.zeros((1, 3))), [3])


def test_softmax_cross_entropy_grad(rng):
    z = Tensor(rng.standard_normal((5, 3)), requires_grad=True)
    labels = [0, 1, 2, 2, 1]
    backward(softmax_cross_entropy(z, labels))
    np.testing.assert_allclose(z.grad.sum(axis=1), 0, atol=1e-15)
    assert grad_check(lambda t: softmax_cross_entropy(t, labels),
                      [Tensor(rng.standard_normal((5, 3)))]) < 1e-4

import threading

import numpy as np
import pytest

from lfrclab import tensor as T
from lfrclab.errors import DimensionError, InputError
from lfrclab.tensor import Tensor

from conftest import check_grad, rel_err


def t64(x, grad=False):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=grad)


def test_default_dtype_is_float32():
    assert Tensor([1.0, 2.0]).dtype == np.float32
    assert Tensor(np.zeros(3)).dtype == np.float64


def test_matmul_values_and_shape_errors():
    a = t64([[1, 2], [3, 4]])
    b = t64([[5], [6]])
    np.testing.assert_array_equal(T.matmul(a, b).data, [[17], [39]])
    with pytest.raises(DimensionError):
        T.matmul(a, t64([[1, 2, 3]]))
    with pytest.raises(DimensionError):
        T.matmul(t64([1, 2]), b)


def test_matmul_grad_matches_finite_differences():
    rng = np.random.default_rng(0)
    err = check_grad(lambda ts: T.sum(T.matmul(ts[0], ts[1])), [rng.normal(size=(3, 4)), rng.normal(size=(4, 2))])
    assert err < 1e-6


def test_add_bias_broadcast_only():
    x = t64(np.ones((2, 3)))
    np.testing.assert_array_equal(T.add(x, t64([1, 2, 3])).data, [[2, 3, 4]] * 2)
    with pytest.raises(DimensionError):
        T.add(x, t64([1, 2]))
    with pytest.raises(DimensionError):
        T.add(x, t64(np.ones((3, 2))))
    with pytest.raises(DimensionError):
        T.add(x, t64(np.ones((2, 1))))


def test_bias_gradient_sums_over_batch():
    x = t64(np.ones((4, 3)), grad=True)
    b = t64(np.zeros(3), grad=True)
    gx, gb = T.grad(T.sum(T.add(x, b)), [x, b])
    np.testing.assert_array_equal(gb, [4, 4, 4])
    np.testing.assert_array_equal(gx, np.ones((4, 3)))


def test_relu_derivative_at_zero_is_zero():
    x = t64([-1.0, 0.0, 2.0], grad=True)
    (g,) = T.grad(T.sum(T.relu(x)), [x])
    np.testing.assert_array_equal(g, [0.0, 0.0, 1.0])


def test_abs_derivative_at_zero_is_zero():
    x = t64([-3.0, 0.0, 2.0], grad=True)
    (g,) = T.grad(T.sum(T.absolute(x)), [x])
    np.testing.assert_array_equal(g, [-1.0, 0.0, 1.0])


def test_conv2d_against_naive_loops():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(2, 3, 6, 5))
    w = rng.normal(size=(4, 3, 3, 3))
    b = rng.normal(size=4)
    for stride, pad in [(1, 0), (1, 1), (2, 1), (2, 0)]:
        got = T.conv2d(t64(x), t64(w), t64(b), stride=stride, padding=pad).data
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        ho = (xp.shape[2] - 3) // stride + 1
        wo = (xp.shape[3] - 3) // stride + 1
        ref = np.zeros((2, 4, ho, wo))
        for n in range(2):
            for o in range(4):
                for i in range(ho):
                    for j in range(wo):
                        patch = xp[n, :, i * stride:i * stride + 3, j * stride:j * stride + 3]
                        ref[n, o, i, j] = np.sum(patch * w[o]) + b[o]
        np.testing.assert_allclose(got, ref, rtol=1e-12, atol=1e-12)


def test_conv2d_identity_kernel():
    x = np.arange(9.0).reshape(1, 1, 3, 3)
    w = np.zeros((1, 1, 3, 3))
    w[0, 0, 1, 1] = 1.0
    np.testing.assert_array_equal(T.conv2d(t64(x), t64(w), padding=1).data, x)


def test_conv2d_grad_small_input():
    rng = np.random.default_rng(2)
    f = lambda ts: T.sum(T.square(T.conv2d(ts[0], ts[1], ts[2], stride=1, padding=1)))
    err = check_grad(f, [rng.normal(size=(1, 2, 5, 5)), rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3)])
    assert err < 1e-6


def test_conv2d_shape_errors():
    with pytest.raises(DimensionError):
        T.conv2d(t64(np.zeros((1, 2, 5, 5))), t64(np.zeros((3, 1, 3, 3))))
    with pytest.raises(DimensionError):
        T.conv2d(t64(np.zeros((1, 1, 2, 2))), t64(np.zeros((1, 1, 3, 3))))
    with pytest.raises(DimensionError):
        T.conv2d(t64(np.zeros((2, 5, 5))), t64(np.zeros((1, 1, 3, 3))))


def test_avg_pool_values_and_divisibility():
    x = np.arange(16.0).reshape(1, 1, 4, 4)
    out = T.avg_pool2d(t64(x), 2).data
    np.testing.assert_array_equal(out[0, 0], [[2.5, 4.5], [10.5, 12.5]])
    with pytest.raises(DimensionError):
        T.avg_pool2d(t64(np.zeros((1, 1, 5, 4))), 2)


def test_cross_entropy_uniform_logits_is_log_k():
    loss = T.softmax_cross_entropy(t64(np.zeros((3, 5))), np.array([0, 1, 4]))
    assert abs(loss.item() - np.log(5)) < 1e-15


def test_cross_entropy_is_stable_for_huge_logits():
    logits = t64([[1000.0, 0.0], [0.0, -1000.0]])
    loss = T.softmax_cross_entropy(logits, np.array([0, 0]))
    assert np.isfinite(loss.item())
    assert abs(loss.item() - 0.0) < 1e-12


def test_cross_entropy_rejects_bad_labels():
    with pytest.raises(InputError):
        T.softmax_cross_entropy(t64(np.zeros((2, 3))), np.array([0, 3]))
    with pytest.raises(DimensionError):
        T.softmax_cross_entropy(t64(np.zeros((2, 3))), np.array([0]))


def test_cross_entropy_matches_mpmath():
    mpmath = pytest.importorskip("mpmath")
    mpmath.mp.dps = 50
    rng = np.random.default_rng(3)
    logits = rng.normal(scale=4, size=(6, 5))
    labels = rng.integers(0, 5, size=6)
    ref = mpmath.mpf(0)
    for row, y in zip(logits, labels):
        z = [mpmath.mpf(float(v)) for v in row]
        ref += mpmath.log(sum(mpmath.exp(v) for v in z)) - z[y]
    ref /= len(labels)
    got = T.softmax_cross_entropy(t64(logits), labels).item()
    assert abs(got - float(ref)) < 1e-12


def test_backward_accumulates_into_leaves():
    x = t64([1.0, 2.0], grad=True)
    T.backward(T.sum(T.mul(x, x)))
    np.testing.assert_array_equal(x.grad, [2.0, 4.0])


def test_backward_needs_scalar():
    with pytest.raises(InputError):
        T.backward(T.mul(t64([1.0, 2.0], grad=True), 2.0))


def test_diamond_graph_gradient():
    # x feeds two branches that join again
    x = t64([3.0], grad=True)
    y = T.add(T.mul(x, x), T.scale(x, 5.0))
    (g,) = T.grad(T.sum(y), [x])
    assert g[0] == 11.0


def test_deep_chain_does_not_hit_recursion_limit():
    x = t64([1.0], grad=True)
    y = x
    for _ in range(5000):
        y = T.scale(y, 1.0)
    (g,) = T.grad(T.sum(y), [x])
    assert g[0] == 1.0


def test_grad_of_unreachable_target_is_zero():
    x = t64([1.0], grad=True)
    z = t64([2.0], grad=True)
    gx, gz = T.grad(T.sum(T.scale(x, 2.0)), [x, z])
    assert gx[0] == 2.0 and gz[0] == 0.0


def test_no_grad_records_nothing():
    x = t64([1.0], grad=True)
    with T.no_grad():
        y = T.scale(x, 2.0)
    assert not y.requires_grad and y._parents == ()
    assert T.grad_enabled()


def test_no_grad_is_thread_local():
    seen = []

    def worker():
        seen.append(T.grad_enabled())

    with T.no_grad():
        th = threading.Thread(target=worker)
        th.start()
        th.join()
    assert seen == [True]


def test_operations_keep_finite_values():
    rng = np.random.default_rng(4)
    x = t64(rng.normal(size=(4, 3)), grad=True)
    w = t64(rng.normal(size=(3, 2)), grad=True)
    out = T.softmax_cross_entropy(T.relu(T.matmul(x, w)), np.array([0, 1, 0, 1]))
    grads = T.grad(out, [x, w])
    assert np.isfinite(out.item()) and all(np.all(np.isfinite(g)) for g in grads)


def test_finite_difference_oracle_on_known_function():
    x = np.array([0.5, -1.0, 2.0])
    fd = T.finite_difference_grad(lambda t: T.sum(T.mul(t, T.mul(t, t))), x)
    np.testing.assert_allclose(fd, 3 * x ** 2, rtol=1e-8)
    with pytest.raises(InputError):
        T.finite_difference_grad(lambda t: T.sum(t), x, h=0.0)


def test_mean_over_axes():
    x = t64(np.arange(24.0).reshape(2, 3, 2, 2), grad=True)
    m = T.mean(x, axis=(2, 3))
    np.testing.assert_array_equal(m.data, np.arange(24.0).reshape(2, 3, 4).mean(axis=2))
    (g,) = T.grad(T.sum(m), [x])
    np.testing.assert_allclose(g, np.full((2, 3, 2, 2), 0.25))


def test_astype_round_trip_gradient():
    x = Tensor(np.ones(3, dtype=np.float32), requires_grad=True)
    y = T.astype(x, np.float64)
    assert y.dtype == np.float64
    (g,) = T.grad(T.sum(y), [x])
    assert g.dtype == np.float32


def test_rel_err_helper():
    assert rel_err([1.0, 0.0], [1.0, 0.0]) == 0.0
    assert rel_err([0.0], [0.0]) == 0.0

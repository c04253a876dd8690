import numpy as np
import pytest

import numerics as nm
from errors import NonDeterministicError, NonFiniteError, ShapeError


def _check(fn, params, tolerance=1e-6):
    report = nm.gradient_check(fn, params, epsilon=1e-5, tolerance=tolerance, floor=1e-3)
    assert report.passed, report.per_parameter
    return report


def _weighted(out, rng):
    # random projection so no gradient cancels by symmetry
    w = rng.standard_normal(out.shape)
    return (out * w).sum()


def test_broadcast_arithmetic_gradients(rng):
    a = nm.Parameter(rng.standard_normal((3, 4)))
    b = nm.Parameter(rng.standard_normal((4,)))
    c = nm.Parameter(rng.uniform(1.0, 2.0, (3, 1)))
    w = rng.standard_normal((3, 4))
    _check(lambda: ((a + b) * c / c.sum() - b * a + (a - c) / (b * b + 1.0) * w).sum(),
           {"a": a, "b": b, "c": c})


def test_unary_gradients(rng):
    x = nm.Parameter(rng.uniform(0.5, 2.0, (2, 5)))
    w = rng.standard_normal((2, 5))
    _check(lambda: (nm.exp(x) * w + nm.log(x) + nm.sqrt(x) * w + nm.gelu(x - 1.0) * w).sum(), {"x": x})


def test_matmul_batched_gradients(rng):
    a = nm.Parameter(rng.standard_normal((2, 3, 4)))
    b = nm.Parameter(rng.standard_normal((4, 5)))
    _check(lambda: _weighted(nm.matmul(a, b), np.random.default_rng(0)), {"a": a, "b": b})


def test_matmul_rejects_mismatched_shapes():
    with pytest.raises(ShapeError):
        nm.matmul(np.ones((2, 3)), np.ones((4, 2)))
    with pytest.raises(ShapeError):
        nm.matmul(np.ones(3), np.ones((3, 2)))


def test_softmax_family_gradients(rng):
    x = nm.Parameter(rng.standard_normal((3, 6)))
    _check(lambda: _weighted(nm.softmax(x, axis=1), np.random.default_rng(1)), {"x": x})
    _check(lambda: _weighted(nm.log_softmax(x, axis=1), np.random.default_rng(2)), {"x": x})


def test_softmax_rows_sum_to_one(rng):
    p = nm.softmax(rng.standard_normal((5, 7)) * 30.0, axis=-1)
    np.testing.assert_allclose(p.values.sum(axis=-1), 1.0, atol=1e-12)


def test_softmax_rejects_non_finite():
    with pytest.raises(NonFiniteError):
        nm.softmax(np.array([1.0, np.inf]))
    with pytest.raises(NonFiniteError):
        nm.log_softmax(np.array([[np.nan, 0.0]]))


def test_layer_norm_and_batch_norm_gradients(rng):
    x = nm.Parameter(rng.standard_normal((4, 6)))
    gamma = nm.Parameter(rng.uniform(0.5, 1.5, 6))
    beta = nm.Parameter(rng.standard_normal(6))
    _check(lambda: _weighted(nm.layer_norm(x, gamma, beta), np.random.default_rng(3)),
           {"x": x, "gamma": gamma, "beta": beta})
    mean, var = np.zeros(6), np.ones(6)
    _check(lambda: _weighted(nm.batch_norm(x, gamma, beta, mean, var, training=True), np.random.default_rng(4)),
           {"x": x, "gamma": gamma, "beta": beta})


def test_batch_norm_running_statistics(rng):
    x = rng.standard_normal((8, 3))
    mean, var = np.zeros(3), np.ones(3)
    nm.batch_norm(x, np.ones(3), np.zeros(3), mean, var, training=True, momentum=0.1)
    np.testing.assert_allclose(mean, 0.1 * x.mean(axis=0), atol=1e-12)
    np.testing.assert_allclose(var, 0.9 + 0.1 * x.var(axis=0, ddof=1), atol=1e-12)
    out = nm.batch_norm(x, np.ones(3), np.zeros(3), mean, var, training=False)
    np.testing.assert_allclose(out.values, (x - mean) / np.sqrt(var + 1e-5), atol=1e-12)
    with pytest.raises(ShapeError):
        nm.batch_norm(x[:1], np.ones(3), np.zeros(3), mean, var, training=True)


def test_norm_gradient_and_origin(rng):
    x = nm.Parameter(rng.standard_normal((4, 3)))
    _check(lambda: _weighted(nm.norm(x, axis=1), np.random.default_rng(5)), {"x": x})
    z = nm.Parameter(np.zeros((1, 3)))
    nm.norm(z, axis=1).sum().backward()
    np.testing.assert_array_equal(z.grad, 0.0)


def test_sqrt_derivative_at_zero_is_zero():
    x = nm.Parameter(np.array([0.0, 4.0]))
    nm.sqrt(x).sum().backward()
    np.testing.assert_allclose(x.grad, [0.0, 0.25])


def test_indexing_concat_stack_gradients(rng):
    x = nm.Parameter(rng.standard_normal((4, 5, 3)))
    y = nm.Parameter(rng.standard_normal((4, 2, 3)))
    rows = np.array([0, 2, 2, 3])

    def fn():
        gathered = x[rows][:, 1:4, :]
        joined = nm.concat([gathered, y], axis=1)
        stacked = nm.stack([joined, joined * 2.0], axis=-1)
        return _weighted(stacked.transpose(3, 0, 2, 1).reshape(2, -1), np.random.default_rng(6))
    _check(fn, {"x": x, "y": y})


def test_repeated_gather_accumulates():
    x = nm.Parameter(np.arange(3.0))
    x[np.array([1, 1, 2])].sum().backward()
    np.testing.assert_array_equal(x.grad, [0.0, 2.0, 1.0])


def test_conv2d_matches_direct_loops(rng):
    x = rng.standard_normal((2, 1, 5, 4))
    w = rng.standard_normal((3, 1, 3, 3))
    b = rng.standard_normal(3)
    out = nm.conv2d(x, w, b, padding=(1, 1)).values
    padded = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    expected = np.zeros((2, 3, 5, 4))
    for n in range(2):
        for o in range(3):
            for i in range(5):
                for j in range(4):
                    expected[n, o, i, j] = (padded[n, :, i:i + 3, j:j + 3] * w[o]).sum() + b[o]
    np.testing.assert_allclose(out, expected, atol=1e-12)


def test_convolution_gradients(rng):
    x = nm.Parameter(rng.standard_normal((2, 1, 4, 5)))
    w2 = nm.Parameter(rng.standard_normal((2, 1, 3, 3)))
    w1 = nm.Parameter(rng.standard_normal((1, 2, 3)))
    b1 = nm.Parameter(rng.standard_normal(1))

    def fn():
        h = nm.conv2d(x, w2, padding=(0, 1))  # (2, 2, 2, 5)
        return _weighted(nm.conv1d(h.mean(axis=2), w1, b1, padding=1), np.random.default_rng(7))
    _check(fn, {"x": x, "w2": w2, "w1": w1, "b1": b1})


def test_gradients_accumulate_until_zeroed():
    x = nm.Parameter(np.array([1.0, 2.0]))
    (x * 3.0).sum().backward()
    (x * 3.0).sum().backward()
    np.testing.assert_array_equal(x.grad, [6.0, 6.0])
    x.zero_grad()
    assert x.grad is None


def test_dropout_rate_zero_is_identity(rng):
    x = nm.Tensor(rng.standard_normal(5))
    assert nm.dropout(x, 0.0, rng) is x
    assert nm.dropout(x, 0.5, rng, training=False) is x


def test_gradient_check_flags_wrong_gradient():
    x = nm.Parameter(np.array([1.0, -2.0]))

    def wrong():
        # claims d/dx x^2 = x
        return nm._result((x.values ** 2).sum(), (x,), lambda g: (g * x.values,))
    report = nm.gradient_check(wrong, {"x": x}, tolerance=1e-6)
    assert not report.passed
    assert report.max_rel_error == pytest.approx(0.5, rel=1e-6)


def test_gradient_check_rejects_nondeterministic_function(rng):
    x = nm.Parameter(np.ones(2))
    with pytest.raises(NonDeterministicError):
        nm.gradient_check(lambda: (x * rng.standard_normal(2)).sum(), {"x": x})


def test_gradient_check_validates_epsilon():
    x = nm.Parameter(np.ones(2))
    with pytest.raises(ValueError):
        nm.gradient_check(lambda: x.sum(), {"x": x}, epsilon=0.1)


def test_float32_default_dtype():
    nm.set_default_dtype("float32")
    assert nm.Tensor([1.0, 2.0]).values.dtype == np.float32
    nm.set_default_dtype("float64")
    with pytest.raises(ValueError):
        nm.set_default_dtype("float16")

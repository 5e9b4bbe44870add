"""Autodiff core: forward values against hand oracles, gradients against
central differences, and the stability/determinism contracts."""

import math

import numpy as np
import pytest

from moelab.errors import ConfigError
from moelab.gradcheck import finite_difference_check
from moelab.rng import Rng
from moelab.tensor import (
    Tensor,
    add,
    clamp_min,
    concat,
    dense,
    exp,
    gelu,
    layernorm,
    log,
    matmul,
    mul,
    normal_cdf,
    power,
    reshape,
    softmax,
    take_cols,
    take_rows,
    tile_rows,
    tmean,
    transpose,
    tsum,
)


def test_dense_hand_example():
    x = Tensor(np.array([[1.0, 1.0]]))
    w = Tensor(np.array([[3.0, 4.0], [6.0, 8.0]]))
    out = dense(x, w)
    np.testing.assert_array_equal(out.data, [[9.0, 12.0]])


def test_dense_identity_weight():
    x = Tensor(np.arange(6.0).reshape(2, 3))
    w = Tensor(np.eye(3))
    b = Tensor(np.zeros(3))
    np.testing.assert_array_equal(dense(x, w, b).data, x.data)


def test_dense_zero_weight_gives_bias():
    x = Tensor(np.random.default_rng(0).normal(size=(4, 3)))
    w = Tensor(np.zeros((3, 5)))
    b = Tensor(np.array([1.0, 2.0, 3.0, 4.0, 5.0]))
    out = dense(x, w, b)
    for row in out.data:
        np.testing.assert_array_equal(row, b.data)


def test_dense_batch_concat_exact():
    # row independence: concatenating batches must not change any row
    gen = np.random.default_rng(1)
    xa, xb = gen.normal(size=(3, 4)), gen.normal(size=(5, 4))
    w = Tensor(gen.normal(size=(4, 2)))
    b = Tensor(gen.normal(size=2))
    out_a = dense(Tensor(xa), w, b).data
    out_b = dense(Tensor(xb), w, b).data
    out_ab = dense(Tensor(np.concatenate([xa, xb])), w, b).data
    np.testing.assert_array_equal(out_ab, np.concatenate([out_a, out_b]))


def test_softmax_uniform():
    out = softmax(Tensor(np.zeros((1, 3))))
    np.testing.assert_allclose(out.data, 1.0 / 3.0, atol=1e-15)


def test_softmax_hand_example():
    out = softmax(Tensor(np.array([[2.0, 1.0, 0.0]])))
    np.testing.assert_allclose(out.data, [[0.66524, 0.24473, 0.09003]],
                               atol=1e-4)


def test_softmax_single_element_row():
    for x in (-50.0, 0.0, 3.2, 700.0):
        out = softmax(Tensor(np.array([[x]])))
        np.testing.assert_array_equal(out.data, [[1.0]])


def test_softmax_rows_sum_to_one():
    gen = np.random.default_rng(2)
    z = gen.normal(scale=30.0, size=(50, 7))
    out = softmax(Tensor(z)).data
    assert np.all(out >= 0)
    np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-12)


def test_softmax_shift_invariance():
    gen = np.random.default_rng(3)
    z = gen.normal(size=(20, 5))
    base = softmax(Tensor(z)).data
    shifted = softmax(Tensor(z + 123.456)).data
    np.testing.assert_allclose(shifted, base, atol=1e-12)


def test_softmax_large_logits_stable():
    out = softmax(Tensor(np.array([[1000.0, 999.0, 0.0]]))).data
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out.sum(), 1.0, atol=1e-12)


def test_gaussian_noise_deterministic():
    a = Rng(7).stream("route", 0, 0).normal(size=(4, 5))
    b = Rng(7).stream("route", 0, 0).normal(size=(4, 5))
    np.testing.assert_array_equal(a, b)


def test_gaussian_noise_moments():
    x = Rng(11).stream("noise").normal(size=100000)
    assert abs(x.mean()) < 0.02
    assert abs(x.var() - 1.0) < 0.05


def test_gaussian_noise_empty_shape():
    x = Rng(0).stream("noise").normal(size=0)
    assert x.shape == (0,)


class TestGradients:
    """Every backward rule against central differences on small shapes."""

    def _check(self, f, params, tol=1e-4):
        err = finite_difference_check(f, params)
        assert err < tol, f"max rel err {err:.3e}"

    def test_dense_grad(self):
        gen = np.random.default_rng(10)
        x = Tensor(gen.normal(size=(3, 4)), requires_grad=True)
        w = Tensor(gen.normal(size=(4, 2)), requires_grad=True)
        b = Tensor(gen.normal(size=2), requires_grad=True)
        self._check(lambda: tsum(dense(x, w, b)), [x, w, b], tol=1e-6)

    def test_constant_grad_is_zero(self):
        x = Tensor(np.ones((2, 2)), requires_grad=True)
        out = tsum(mul(x, Tensor(np.zeros((2, 2)))))
        out.backward()
        np.testing.assert_array_equal(x.grad, 0.0)

    def test_nll_two_class_head(self):
        gen = np.random.default_rng(12)
        x = Tensor(gen.normal(size=(4, 3)), requires_grad=True)
        w = Tensor(gen.normal(size=(3, 2)), requires_grad=True)

        def f():
            probs = softmax(dense(x, w))
            picked = take_cols(probs, np.array([0, 1, 1, 0]))
            return mul(tsum(log(picked)), Tensor(-0.25))

        self._check(f, [x, w], tol=1e-5)

    @pytest.mark.parametrize("op", ["add", "mul", "matmul", "power", "exp",
                                    "log", "clamp", "gelu", "cdf", "ln",
                                    "softmax", "mean", "reshape", "transpose",
                                    "concat", "tile", "take_rows",
                                    "take_cols"])
    def test_each_op(self, op):
        gen = np.random.default_rng(hash(op) % 2**32)
        a = Tensor(gen.normal(size=(3, 4)), requires_grad=True)
        b = Tensor(gen.normal(size=(3, 4)), requires_grad=True)
        c = Tensor(gen.normal(size=(4, 2)), requires_grad=True)
        pos = Tensor(np.abs(gen.normal(size=(3, 4))) + 0.5,
                     requires_grad=True)
        # fixed multipliers: closures must be deterministic across calls
        m43 = Tensor(gen.normal(size=(4, 3)))
        m64 = Tensor(gen.normal(size=(6, 4)))
        fns = {
            "add": (lambda: tsum(add(a, b)), [a, b]),
            "mul": (lambda: tsum(mul(a, b)), [a, b]),
            "matmul": (lambda: tsum(matmul(a, c)), [a, c]),
            "power": (lambda: tsum(power(pos, 2.5)), [pos]),
            "exp": (lambda: tsum(exp(a)), [a]),
            "log": (lambda: tsum(log(pos)), [pos]),
            "clamp": (lambda: tsum(clamp_min(mul(a, a), 0.5)), [a]),
            "gelu": (lambda: tsum(gelu(a)), [a]),
            "cdf": (lambda: tsum(normal_cdf(a)), [a]),
            "ln": (lambda: tsum(layernorm(
                a, Tensor(np.ones(4), requires_grad=True),
                Tensor(np.zeros(4), requires_grad=True))), [a]),
            "softmax": (lambda: tsum(mul(softmax(a), b)), [a, b]),
            "mean": (lambda: tmean(mul(a, a)), [a]),
            "reshape": (lambda: tsum(mul(reshape(a, (4, 3)),
                                         reshape(b, (4, 3)))), [a, b]),
            "transpose": (lambda: tsum(mul(transpose(a, (1, 0)), m43)), [a]),
            "concat": (lambda: tsum(mul(concat([a, b], axis=0), m64)),
                       [a, b]),
            "tile": (lambda: tsum(mul(tile_rows(a, 2), m64)), [a]),
            "take_rows": (lambda: tsum(take_rows(a, np.array([2, 0]))),
                          [a]),
            "take_cols": (lambda: tsum(take_cols(a, np.array([1, 3, 0]))),
                          [a]),
        }
        f, params = fns[op]
        self._check(f, params)


def test_layernorm_rows_standardized():
    gen = np.random.default_rng(20)
    x = Tensor(gen.normal(loc=3.0, scale=5.0, size=(6, 8)))
    out = layernorm(x, Tensor(np.ones(8)), Tensor(np.zeros(8))).data
    np.testing.assert_allclose(out.mean(axis=1), 0.0, atol=1e-12)
    np.testing.assert_allclose(out.var(axis=1), 1.0, atol=1e-3)


def test_softmax_empty_last_axis_rejected():
    with pytest.raises((ConfigError, ValueError)):
        softmax(Tensor(np.zeros((2, 0))))


def test_finite_difference_check_reports_nonfinite():
    from moelab.errors import EvaluationError

    x = Tensor(np.ones((2, 2)), requires_grad=True)

    def f():
        return tsum(log(add(x, Tensor(-10.0))))

    with pytest.raises(EvaluationError):
        finite_difference_check(f, [x])

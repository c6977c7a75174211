import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ctxblock import autograd as ag
from ctxblock.numerics import (
    NumericError,
    ParamSet,
    check_finite,
    ffn,
    grad_check,
    layer_norm,
    masked_softmax_rows,
    matmul,
)


def loop_matmul(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            s = 0.0
            for k in range(a.shape[1]):
                s += a[i, k] * b[k, j]
            out[i, j] = s
    return out


class TestMatmul:
    def test_identity(self):
        m = np.arange(12.0).reshape(3, 4)
        np.testing.assert_array_equal(matmul(np.eye(3), m), m)

    def test_scalar(self):
        assert matmul(np.array([[2.0]]), np.array([[3.0]]))[0, 0] == 6.0

    def test_against_loops(self):
        rng = np.random.default_rng(0)
        a, b = rng.standard_normal((4, 3)), rng.standard_normal((3, 2))
        np.testing.assert_allclose(matmul(a, b), loop_matmul(a, b), rtol=0, atol=1e-12)

    def test_mismatch(self):
        with pytest.raises(ValueError, match="mismatch"):
            matmul(np.ones((2, 3)), np.ones((2, 3)))


class TestMaskedSoftmax:
    def test_symmetric(self):
        np.testing.assert_array_equal(masked_softmax_rows(np.zeros((1, 2)), np.ones((1, 2), bool)), [[0.5, 0.5]])

    @pytest.mark.parametrize("a,b", [(0.0, 0.0), (-3.0, 50.0), (1e3, -1e3)])
    def test_single_admissible(self, a, b):
        p = masked_softmax_rows(np.array([[a, b]]), np.array([[True, False]]))
        np.testing.assert_array_equal(p, [[1.0, 0.0]])

    def test_against_direct_exp(self):
        row = np.array([1.0, 2.0, 3.0])
        e = [math.exp(v) for v in row]
        expected = [v / sum(e) for v in e]
        np.testing.assert_allclose(masked_softmax_rows(row[None]), [expected], rtol=0, atol=1e-12)

    def test_fully_masked_row_rejected(self):
        with pytest.raises(ValueError, match="no admissible key"):
            masked_softmax_rows(np.zeros((2, 3)), np.array([[1, 0, 0], [0, 0, 0]], bool))

    @settings(max_examples=200, deadline=None)
    @given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**31 - 1), st.floats(-50, 50))
    def test_invariants(self, rows, cols, seed, shift):
        rng = np.random.default_rng(seed)
        s = rng.standard_normal((rows, cols)) * 5
        mask = rng.random((rows, cols)) < 0.6
        mask[np.arange(rows), rng.integers(0, cols, rows)] = True
        p = masked_softmax_rows(s, mask)
        assert np.all(p[~mask] == 0.0)
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)
        np.testing.assert_allclose(masked_softmax_rows(s + shift, mask), p, atol=1e-10)


class TestLayerNorm:
    def test_constant_row(self):
        out = layer_norm(np.full((1, 5), 3.3), np.ones(5), np.zeros(5))
        np.testing.assert_allclose(out, 0.0, atol=1e-12)

    def test_already_normal(self):
        out = layer_norm(np.array([[1.0, -1.0]]), np.ones(2), np.zeros(2))
        np.testing.assert_allclose(out, [[1.0, -1.0]], atol=1e-10)

    def test_moments(self):
        x = np.random.default_rng(3).standard_normal((1, 17)) * 4 + 2
        out = layer_norm(x, np.ones(17), np.zeros(17))
        assert abs(out.mean()) <= 1e-10
        assert abs(out.var() - 1.0) <= 1e-6

    def test_per_frame_permutation(self):
        rng = np.random.default_rng(4)
        x, g, b = rng.standard_normal((6, 8)), rng.standard_normal(8), rng.standard_normal(8)
        perm = rng.permutation(6)
        np.testing.assert_array_equal(layer_norm(x[perm], g, b), layer_norm(x, g, b)[perm])

    def test_shape_check(self):
        with pytest.raises(ValueError):
            layer_norm(np.ones((2, 3)), np.ones(4), np.zeros(3))


class TestFFN:
    def setup_method(self):
        rng = np.random.default_rng(5)
        self.w1, self.v1 = rng.standard_normal((4, 6)), rng.standard_normal(6)
        self.w2, self.v2 = rng.standard_normal((6, 4)), rng.standard_normal(4)

    def test_zero(self):
        out = ffn(np.zeros((3, 4)), self.w1, np.zeros(6), self.w2, np.zeros(4))
        np.testing.assert_array_equal(out, 0.0)

    def test_dead_relu(self):
        out = ffn(np.zeros((3, 4)), self.w1, -np.ones(6), self.w2, self.v2)
        np.testing.assert_array_equal(out, np.broadcast_to(self.v2, (3, 4)))

    def test_against_scalar_loops(self):
        x = np.random.default_rng(6).standard_normal((3, 4))
        expected = np.zeros((3, 4))
        for t in range(3):
            hidden = [max(0.0, sum(x[t, i] * self.w1[i, j] for i in range(4)) + self.v1[j]) for j in range(6)]
            for o in range(4):
                expected[t, o] = sum(hidden[j] * self.w2[j, o] for j in range(6)) + self.v2[o]
        np.testing.assert_allclose(ffn(x, self.w1, self.v1, self.w2, self.v2), expected, atol=1e-12)

    def test_position_wise(self):
        x = np.random.default_rng(7).standard_normal((5, 4))
        y = x.copy()
        y[2] = 0.0
        a, b = ffn(x, self.w1, self.v1, self.w2, self.v2), ffn(y, self.w1, self.v1, self.w2, self.v2)
        np.testing.assert_array_equal(np.delete(a, 2, axis=0), np.delete(b, 2, axis=0))

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            ffn(np.zeros((2, 5)), self.w1, self.v1, self.w2, self.v2)


def test_paramset_is_immutable():
    p = ParamSet({"a": np.zeros(3)})
    with pytest.raises(ValueError):
        p["a"][0] = 1.0
    q = p.replace(a=np.ones(3))
    assert p["a"][0] == 0.0 and q["a"][0] == 1.0
    assert list(p.merged({"b": np.ones(2)})) == ["a", "b"]


def test_check_finite():
    with pytest.raises(NumericError):
        check_finite(np.array([1.0, np.nan]))


# ---------------------------------------------------------------------------
# gradient checks through the autograd engine
# ---------------------------------------------------------------------------


def _grads(loss_builder):
    def grad_fn(inputs):
        ts = {k: ag.Tensor(v.copy(), requires_grad=True) for k, v in inputs.items()}
        loss_builder(ts).backward()
        return {k: t.grad for k, t in ts.items()}

    def loss_fn(inputs):
        return float(loss_builder({k: ag.Tensor(v) for k, v in inputs.items()}).data)

    return loss_fn, grad_fn


def _weighted(out, seed=0):
    # fixed random projection keeps the loss sensitive to every output entry
    w = np.random.default_rng(seed).standard_normal(out.shape)
    return ag.sum(out * w)


def test_grad_linear_layer():
    rng = np.random.default_rng(10)
    inputs = {"x": rng.standard_normal((4, 3)), "w": rng.standard_normal((3, 5)), "b": rng.standard_normal(5)}
    loss_fn, grad_fn = _grads(lambda t: _weighted(t["x"] @ t["w"] + t["b"]))
    rep = grad_check(loss_fn, grad_fn, inputs, eps=1e-5)
    assert rep.max_rel_error <= 1e-7, rep


def test_grad_masked_softmax_sum():
    rng = np.random.default_rng(11)
    mask = rng.random((4, 5)) < 0.6
    mask[:, 0] = True
    loss_fn, grad_fn = _grads(lambda t: _weighted(ag.masked_softmax(t["s"], mask)))
    rep = grad_check(loss_fn, grad_fn, {"s": rng.standard_normal((4, 5))})
    assert rep.max_rel_error <= 1e-6, rep


def test_grad_layer_norm_and_ffn():
    rng = np.random.default_rng(12)
    inputs = {
        "x": rng.standard_normal((3, 6)), "g": rng.standard_normal(6), "b": rng.standard_normal(6),
        "w1": rng.standard_normal((6, 8)), "v1": rng.standard_normal(8),
        "w2": rng.standard_normal((8, 6)), "v2": rng.standard_normal(6),
    }

    def build(t):
        h = ag.layer_norm(t["x"], t["g"], t["b"])
        return _weighted(ag.relu(h @ t["w1"] + t["v1"]) @ t["w2"] + t["v2"])

    loss_fn, grad_fn = _grads(build)
    rep = grad_check(loss_fn, grad_fn, inputs)
    assert rep.max_rel_error <= 1e-6, rep


def test_grad_shape_ops():
    rng = np.random.default_rng(13)

    def build(t):
        a = ag.pad(t["a"], [(1, 0), (0, 2)])
        b = ag.concat([a, t["b"]], axis=0)
        c = ag.take(b, np.array([0, 2, 2, 4]), axis=0).reshape(2, 2, 5)
        d = ag.swapaxes(c, 0, 2)[1:3]
        return _weighted(d) + ag.sum(ag.max(t["b"], axis=0)) + ag.mean(t["a"])

    inputs = {"a": rng.standard_normal((3, 3)), "b": rng.standard_normal((2, 5))}
    loss_fn, grad_fn = _grads(build)
    assert grad_check(loss_fn, grad_fn, inputs).max_rel_error <= 1e-7


def test_grad_cross_entropy():
    rng = np.random.default_rng(14)
    labels = rng.integers(0, 4, size=(2, 5))
    loss_fn, grad_fn = _grads(lambda t: ag.softmax_cross_entropy(t["z"], labels))
    assert grad_check(loss_fn, grad_fn, {"z": rng.standard_normal((2, 5, 4))}).max_rel_error <= 1e-7


def test_grad_check_detects_wrong_gradient():
    loss_fn = lambda inp: float((inp["x"] ** 2).sum())  # noqa: E731
    wrong = lambda inp: {"x": 3 * inp["x"]}  # noqa: E731
    rep = grad_check(loss_fn, wrong, {"x": np.array([1.0, 2.0])})
    assert rep.max_rel_error > 0.1


def test_grad_check_rejects_nonfinite():
    with pytest.raises(NumericError):
        grad_check(lambda inp: float("nan"), lambda inp: {"x": np.zeros(1)}, {"x": np.zeros(1)})

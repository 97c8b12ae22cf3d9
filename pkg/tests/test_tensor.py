import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from bctn import tensor as T
from bctn.tensor import Tensor


def naive_matmul(a, b):
    m, k = len(a), len(a[0])
    n = len(b[0])
    out = [[0.0] * n for _ in range(m)]
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for t in range(k):
                acc += float(a[i][t]) * float(b[t][j])
            out[i][j] = acc
    return out


class TestMatmul:
    def test_identity(self):
        A = np.array([[1.5, -2.0], [0.25, 4.0]])
        assert np.array_equal(T.matmul(T.tensor(np.eye(2)), T.tensor(A)).data, A.astype(np.float32))

    def test_hand_case(self):
        out = T.matmul(T.tensor([[1, 2], [3, 4]]), T.tensor([[1], [1]]))
        assert out.data.tolist() == [[3.0], [7.0]]

    def test_against_triple_loop(self):
        rng = np.random.default_rng(0)
        a = rng.standard_normal((3, 4))
        b = rng.standard_normal((4, 2))
        out = T.matmul(T.tensor(a), T.tensor(b)).data
        np.testing.assert_allclose(out, naive_matmul(a.astype(np.float32), b.astype(np.float32)), atol=1e-6)

    def test_inner_mismatch(self):
        with pytest.raises(T.ShapeMismatch):
            T.matmul(T.zeros((2, 3)), T.zeros((2, 3)))

    def test_gradients(self):
        a = T.tensor([[1.0, 2.0], [3.0, 4.0]], requires_grad=True)
        b = T.tensor([[0.5], [-1.0]], requires_grad=True)
        T.backward(T.sum(T.matmul(a, b)))
        np.testing.assert_allclose(a.grad, [[0.5, -1.0], [0.5, -1.0]])
        np.testing.assert_allclose(b.grad, [[4.0], [6.0]])


class TestElementwise:
    def test_sigmoid_zero(self):
        assert T.sigmoid(T.tensor([0.0])).data[0] == 0.5

    def test_sigmoid_extremes_finite(self):
        s = T.sigmoid(T.tensor([-1000.0, 1000.0])).data
        assert np.all(np.isfinite(s)) and s[0] >= 0.0 and s[1] <= 1.0

    def test_relu(self):
        assert T.relu(T.tensor([-3.0, 3.0])).data.tolist() == [0.0, 3.0]

    def test_mul_ones(self):
        x = np.array([1.0, -2.0, 3.5], dtype=np.float32)
        assert np.array_equal(T.mul(T.tensor(x), T.ones(3)).data, x)

    def test_shape_mismatch(self):
        for op in (T.add, T.sub, T.mul):
            with pytest.raises(T.ShapeMismatch):
                op(T.zeros(3), T.zeros(4))

    def test_no_implicit_broadcast(self):
        with pytest.raises(T.ShapeMismatch):
            T.add(T.zeros((2, 3)), T.zeros(3))

    def test_add_and_mul_grads(self):
        a = T.tensor([1.0, 2.0], requires_grad=True)
        b = T.tensor([3.0, -4.0], requires_grad=True)
        T.backward(T.sum(T.add(a, b)))
        assert a.grad.tolist() == [1.0, 1.0] and b.grad.tolist() == [1.0, 1.0]
        a.grad = b.grad = None
        T.backward(T.sum(T.mul(a, b)))
        assert a.grad.tolist() == [3.0, -4.0] and b.grad.tolist() == [1.0, 2.0]


class TestSoftmax:
    def test_zeros_uniform(self):
        np.testing.assert_allclose(T.softmax(T.tensor([0.0, 0.0])).data, [0.5, 0.5])

    def test_large_values_no_overflow(self):
        np.testing.assert_allclose(T.softmax(T.tensor([1000.0, 1000.0])).data, [0.5, 0.5])

    def test_closed_form_ratio(self):
        # e^0 : e^{ln 3} = 1 : 3
        np.testing.assert_allclose(T.softmax(T.tensor([0.0, math.log(3.0)])).data, [0.25, 0.75], atol=1e-6)

    def test_empty(self):
        with pytest.raises(T.EmptyInput):
            T.softmax(T.tensor(np.zeros(0)))

    def test_mask_zeroes_entries(self):
        p = T.softmax(T.tensor([1.0, 2.0, 3.0]), mask=np.array([True, False, True])).data
        assert p[1] == 0.0
        assert abs(p.sum() - 1.0) < 1e-6

    @given(hnp.arrays(np.float64, st.integers(1, 40),
                      elements=st.floats(-1e4, 1e4, allow_nan=False, allow_infinity=False)))
    @settings(max_examples=200, deadline=None)
    def test_simplex_property(self, x):
        p = T.softmax(T.tensor(x)).data
        assert np.all(p >= 0)
        assert abs(float(p.sum()) - 1.0) <= 1e-6


class TestShapes:
    def test_repeat_columns(self):
        out = T.repeat_columns(T.tensor([1.0, 2.0]), 3).data
        assert out.tolist() == [[1, 1, 1], [2, 2, 2]]

    def test_max_pool_one_row(self):
        row = np.array([[0.5, -1.0, 2.0]], dtype=np.float32)
        assert np.array_equal(T.max_pool_rows(T.tensor(row)).data, row[0])

    def test_max_pool(self):
        assert T.max_pool_rows(T.tensor([[1.0, 5.0], [4.0, 2.0]])).data.tolist() == [4.0, 5.0]

    def test_max_pool_tie_goes_to_lowest_index(self):
        x = T.tensor([[3.0, 1.0], [3.0, 2.0]], requires_grad=True)
        T.backward(T.sum(T.max_pool_rows(x)))
        assert x.grad.tolist() == [[1.0, 0.0], [0.0, 1.0]]

    def test_repeat_columns_grad_sums(self):
        v = T.tensor([1.0, 2.0], requires_grad=True)
        T.backward(T.sum(T.repeat_columns(v, 4)))
        assert v.grad.tolist() == [4.0, 4.0]

    def test_concat_split_grads(self):
        a = T.tensor([[1.0, 2.0]], requires_grad=True)
        b = T.tensor([[3.0, 4.0], [5.0, 6.0]], requires_grad=True)
        c = T.concat([a, b], axis=0)
        assert c.shape == (3, 2)
        T.backward(T.sum(T.mul(c, T.tensor([[1, 1], [2, 2], [3, 3]]))))
        assert a.grad.tolist() == [[1, 1]] and b.grad.tolist() == [[2, 2], [3, 3]]

    def test_expand_requires_unit_axes(self):
        with pytest.raises(T.ShapeMismatch):
            T.expand(T.zeros((2, 3)), (2, 4))


class TestBackward:
    def test_sum_grad_is_ones(self):
        x = T.tensor([1.0, -2.0, 3.0], requires_grad=True)
        T.backward(T.sum(x))
        assert x.grad.tolist() == [1.0, 1.0, 1.0]

    def test_square(self):
        x = T.tensor(3.0, requires_grad=True)
        T.backward(T.mul(x, x))
        assert float(x.grad) == 6.0

    def test_accumulates_across_uses(self):
        x = T.tensor([2.0], requires_grad=True)
        y = T.add(T.mul(x, x), T.scale(x, 3.0))
        T.backward(T.sum(y))
        assert x.grad.tolist() == [7.0]

    def test_not_scalar(self):
        with pytest.raises(T.NotScalar):
            T.backward(T.tensor([1.0, 2.0], requires_grad=True))

    def test_detached(self):
        with pytest.raises(T.DetachedGraph):
            T.backward(T.sum(T.tensor([1.0, 2.0])))

    def test_no_grad_builds_no_graph(self):
        x = T.tensor([1.0], requires_grad=True)
        with T.no_grad():
            y = T.sum(T.mul(x, x))
        assert not y.requires_grad

    def test_layer_norm_grad(self):
        rng = np.random.default_rng(3)
        with T.precision(np.float64):
            x = T.tensor(rng.standard_normal((3, 5)), requires_grad=True)
            g = T.tensor(rng.standard_normal(5), requires_grad=True)
            b = T.tensor(rng.standard_normal(5), requires_grad=True)
            w = T.tensor(rng.standard_normal((3, 5)))
            res = T.grad_check(lambda: T.sum(T.mul(T.layer_norm(x, g, b), w)), {"x": x, "g": g, "b": b})
        assert res.max_rel_error < 1e-6


class TestGradCheck:
    def test_square(self):
        with T.precision(np.float64):
            x = T.tensor([3.0], requires_grad=True)
            res = T.grad_check(lambda: T.sum(T.mul(x, x)), {"x": x})
        assert res.max_rel_error < 1e-6 and res.n_checked == 1

    def test_softmax_cross_entropy(self):
        rng = np.random.default_rng(1)
        with T.precision(np.float64):
            logits = T.tensor(rng.standard_normal(7), requires_grad=True)

            def f():
                p = T.softmax(logits)
                return T.neg(T.log(T.index(p, 2)))

            res = T.grad_check(f, {"logits": logits})
        assert res.max_rel_error < 1e-4
        assert res.n_checked == 7

    def test_relu_at_kink_is_skipped(self):
        x = T.tensor([0.0, 1.0], requires_grad=True)
        res = T.grad_check(lambda: T.sum(T.relu(x)), {"x": x})
        assert res.n_skipped_kink == 1
        assert res.n_checked == 1

    def test_small_gradients_skipped(self):
        x = T.tensor([1.0, 2.0], requires_grad=True)
        w = T.tensor([0.0, 1.0])
        with T.precision(np.float64):
            res = T.grad_check(lambda: T.sum(T.mul(x, w)), {"x": x})
        assert res.n_skipped_small == 1


@given(st.integers(0, 10_000))
@settings(max_examples=50, deadline=None)
def test_forward_outputs_finite_in_box(seed):
    rng = np.random.default_rng(seed)
    x = T.tensor(rng.uniform(-10, 10, (4, 6)))
    w = T.tensor(rng.uniform(-10, 10, (6, 6)))
    y = T.layer_norm(T.relu(T.matmul(x, w)), T.ones(6), T.zeros(6))
    p = T.softmax(T.sigmoid(y), axis=-1)
    assert np.all(np.isfinite(y.data)) and np.all(np.isfinite(p.data))

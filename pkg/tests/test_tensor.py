"""Tensor op semantics and gradient checks against central finite differences."""

import numpy as np
import pytest

from exitlab import tensor as T


def fd_gradient(fn, params, eps=1e-4):
    """Independent oracle: central finite differences of fn() w.r.t. each param.

    ``fn`` must recompute the scalar loss from the params' current values.
    """
    grads = []
    for p in params:
        flat = p.array.reshape(-1)
        g = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = fn().item()
            flat[i] = orig - eps
            f_minus = fn().item()
            flat[i] = orig
            g[i] = (f_plus - f_minus) / (2 * eps)
        grads.append(g.reshape(p.shape))
    return grads


def assert_gradcheck(fn, params, rel_tol=1e-3, abs_guard=1e-7):
    loss = fn()
    analytic = T.backward(loss, wrt=params)
    numeric = fd_gradient(fn, params)
    for p, fd in zip(params, numeric):
        got = analytic[p]
        denom = np.maximum(np.maximum(np.abs(got), np.abs(fd)), abs_guard)
        rel = np.abs(got - fd) / denom
        assert rel.max() < rel_tol, f"gradient mismatch: rel err {rel.max():.2e}"


def randt(rng, *shape, scale=1.0):
    return T.Tensor(rng.normal(0.0, scale, size=shape), requires_grad=True)


class TestMatmul:
    def test_identity(self):
        x = np.arange(6.0).reshape(2, 3)
        out = T.matmul(T.Tensor(np.eye(2)), T.Tensor(x))
        np.testing.assert_array_equal(out.array, x)

    def test_analytic_1x2_2x1(self):
        out = T.matmul(T.Tensor([[1.0, 2.0]]), T.Tensor([[3.0], [4.0]]))
        assert out.array.tolist() == [[11.0]]

    def test_matches_triple_loop_oracle(self):
        rng = np.random.default_rng(0)
        a = rng.normal(size=(3, 4))
        b = rng.normal(size=(4, 2))
        expected = np.zeros((3, 2))
        for i in range(3):
            for j in range(2):
                for k in range(4):
                    expected[i, j] += a[i, k] * b[k, j]
        out = T.matmul(T.Tensor(a), T.Tensor(b))
        np.testing.assert_allclose(out.array, expected, atol=1e-12)

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(T.ShapeError, match=r"\(2, 3\).*\(2, 2\)"):
            T.matmul(T.Tensor(np.zeros((2, 3))), T.Tensor(np.zeros((2, 2))))

    def test_batched_against_loop(self):
        rng = np.random.default_rng(1)
        a = rng.normal(size=(5, 3, 4))
        b = rng.normal(size=(4, 2))
        out = T.matmul(T.Tensor(a), T.Tensor(b))
        for i in range(5):
            np.testing.assert_allclose(out.array[i], a[i] @ b, atol=1e-12)


class TestSoftmax:
    def test_symmetry(self):
        out = T.softmax(T.Tensor([0.0, 0.0]))
        np.testing.assert_allclose(out.array, [0.5, 0.5])

    def test_large_logit_is_stable(self):
        out = T.softmax(T.Tensor([1000.0, 0.0]))
        assert np.isfinite(out.array).all()
        np.testing.assert_allclose(out.array, [1.0, 0.0], atol=1e-300)

    def test_matches_exp_sum_oracle(self):
        x = np.array([1.0, 2.0, 3.0])
        expected = np.exp(x) / np.exp(x).sum()
        out = T.softmax(T.Tensor(x))
        np.testing.assert_allclose(out.array, expected, atol=1e-12)

    def test_sums_to_one_on_random_input(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(4, 7), scale=3.0)
        out = T.softmax(T.Tensor(x), axis=-1)
        np.testing.assert_allclose(out.array.sum(axis=-1), 1.0, atol=1e-9)
        assert (out.array > 0).all()


class TestSigmoid:
    def test_zero_is_half(self):
        assert T.sigmoid(T.Tensor(0.0)).item() == 0.5

    def test_large_negative_no_overflow(self):
        out = T.sigmoid(T.Tensor([-1e4, -50.0]))
        assert np.isfinite(out.array).all()
        assert (out.array > 0).all()

    def test_scalar_value(self):
        assert T.sigmoid(T.Tensor(1.0)).item() == pytest.approx(0.7310585786, abs=1e-9)

    def test_strictly_inside_unit_interval(self):
        x = np.array([-1e6, -40.0, 0.0, 40.0, 1e6])
        out = T.sigmoid(T.Tensor(x)).array
        assert (out > 0.0).all() and (out < 1.0).all()


class TestBackward:
    def test_sum_of_matmul_has_outer_product_structure(self):
        rng = np.random.default_rng(3)
        w = randt(rng, 3, 4)
        x = T.Tensor(rng.normal(size=(4, 2)))
        grads = T.backward(T.matmul(w, x).sum())
        # d/dW sum(W x) = ones(3,2) x^T
        np.testing.assert_allclose(grads[w], np.ones((3, 2)) @ x.array.T, atol=1e-12)

    def test_gradient_of_constant_is_zero(self):
        rng = np.random.default_rng(4)
        w = randt(rng, 2, 2)
        unused = randt(rng, 3)
        grads = T.backward((w * w).sum(), wrt=[w, unused])
        np.testing.assert_array_equal(grads[unused], np.zeros(3))

    def test_non_scalar_loss_rejected(self):
        w = T.Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ValueError, match="scalar"):
            T.backward(w * 2.0)

    def test_accumulates_over_reuse(self):
        w = T.Tensor(np.array([2.0]), requires_grad=True)
        loss = (w * 3.0 + w * w).sum()
        grads = T.backward(loss)
        np.testing.assert_allclose(grads[w], [3.0 + 2.0 * 2.0])

    def test_no_grad_blocks_taping(self):
        w = T.Tensor(np.ones(2), requires_grad=True)
        with T.no_grad():
            out = (w * 2.0).sum()
        assert out.node is None and not out.requires_grad


class TestGradchecks:
    """Every differentiable op against the finite-difference oracle."""

    def setup_method(self):
        self.rng = np.random.default_rng(42)

    def test_add_same_shape(self):
        a, b = randt(self.rng, 3, 4), randt(self.rng, 3, 4)
        assert_gradcheck(lambda: ((a + b) * (a + b)).mean(), [a, b])

    def test_add_trailing_broadcast(self):
        a, b = randt(self.rng, 2, 3, 4), randt(self.rng, 4)
        assert_gradcheck(lambda: ((a + b) * (a + b)).sum(), [a, b])

    def test_sub_and_scalar_ops(self):
        a, b = randt(self.rng, 3, 3), randt(self.rng, 3)
        assert_gradcheck(lambda: ((a - b) * 0.7 + 1.5).mean(), [a, b])

    def test_mul_trailing_broadcast(self):
        a, b = randt(self.rng, 2, 5), randt(self.rng, 5)
        assert_gradcheck(lambda: (a * b).sum(), [a, b])

    def test_matmul_2d(self):
        a, b = randt(self.rng, 3, 4), randt(self.rng, 4, 2)
        assert_gradcheck(lambda: T.matmul(a, b).sum(), [a, b])

    def test_matmul_batched_3d_2d(self):
        a, b = randt(self.rng, 2, 3, 4), randt(self.rng, 4, 3)
        assert_gradcheck(lambda: (T.matmul(a, b) * T.matmul(a, b)).mean(), [a, b])

    def test_matmul_4d_4d(self):
        a, b = randt(self.rng, 2, 2, 3, 4), randt(self.rng, 2, 2, 4, 3)
        assert_gradcheck(lambda: T.matmul(a, b).sum(), [a, b])

    def test_transpose_default_and_permutation(self):
        a = randt(self.rng, 2, 3, 4)
        assert_gradcheck(lambda: (a.transpose() * a.transpose()).sum(), [a])
        assert_gradcheck(lambda: (a.transpose((2, 0, 1)) * 2.0).sum(), [a])

    def test_reshape(self):
        a = randt(self.rng, 2, 6)
        assert_gradcheck(lambda: (a.reshape((3, 4)) * a.reshape((3, 4))).sum(), [a])

    def test_concat(self):
        a, b = randt(self.rng, 2, 3), randt(self.rng, 2, 2)
        assert_gradcheck(lambda: (T.concat([a, b], axis=1) * T.concat([a, b], axis=1)).sum(), [a, b])

    def test_select(self):
        a = randt(self.rng, 3, 4, 5)
        assert_gradcheck(lambda: (T.select(a, axis=1, index=2) * 3.0).sum(), [a])

    def test_softmax(self):
        a = randt(self.rng, 3, 5)
        w = T.Tensor(self.rng.normal(size=(3, 5)))
        assert_gradcheck(lambda: (T.softmax(a, axis=-1) * w).sum(), [a])

    def test_sigmoid(self):
        a = randt(self.rng, 4, 3)
        assert_gradcheck(lambda: (T.sigmoid(a) * T.sigmoid(a)).sum(), [a])

    def test_log(self):
        a = T.Tensor(self.rng.uniform(0.5, 2.0, size=(3, 3)), requires_grad=True)
        assert_gradcheck(lambda: T.log(a).sum(), [a])

    def test_clamp_min(self):
        a = T.Tensor(self.rng.uniform(0.5, 2.0, size=(6,)), requires_grad=True)
        assert_gradcheck(lambda: T.clamp_min(a, 1e-3).sum(), [a])

    def test_gelu(self):
        a = randt(self.rng, 3, 4)
        assert_gradcheck(lambda: T.gelu(a).sum(), [a])

    def test_layer_norm(self):
        a = randt(self.rng, 2, 3, 6)
        g = T.Tensor(self.rng.normal(1.0, 0.1, size=6), requires_grad=True)
        b = randt(self.rng, 6, scale=0.1)
        w = T.Tensor(self.rng.normal(size=(2, 3, 6)))
        assert_gradcheck(lambda: (T.layer_norm(a, g, b) * w).sum(), [a, g, b])

    def test_embedding_lookup(self):
        table = randt(self.rng, 7, 4)
        ids = np.array([[1, 3, 1], [0, 6, 2]])
        w = T.Tensor(self.rng.normal(size=(2, 3, 4)))
        assert_gradcheck(lambda: (T.embedding_lookup(table, ids) * w).sum(), [table])

    def test_mean_and_sum_axes(self):
        a = randt(self.rng, 3, 4)
        assert_gradcheck(lambda: a.mean(), [a])
        assert_gradcheck(lambda: (a.sum(axis=0) * a.sum(axis=0)).mean(), [a])
        assert_gradcheck(lambda: (a.mean(axis=1) * 2.0).sum(), [a])


class TestInvariants:
    def test_forward_finite_on_finite_input(self):
        rng = np.random.default_rng(7)
        x = T.Tensor(rng.normal(size=(4, 8), scale=5.0))
        g = T.Tensor(np.ones(8))
        b = T.Tensor(np.zeros(8))
        for out in (
            T.softmax(x, axis=-1),
            T.sigmoid(x),
            T.gelu(x),
            T.layer_norm(x, g, b),
        ):
            assert np.isfinite(out.array).all()

    def test_flat_data_view_matches_shape(self):
        t = T.Tensor(np.arange(12.0).reshape(3, 4))
        assert t.data.shape == (12,)
        assert t.data[5] == 5.0
        assert np.prod(t.shape) == t.data.size

    def test_deterministic_op_chain(self):
        def run():
            rng = np.random.default_rng(123)
            x = T.Tensor(rng.normal(size=(3, 4)))
            w = T.Tensor(rng.normal(size=(4, 4)))
            return T.softmax(T.gelu(T.matmul(x, w)), axis=-1).array

        np.testing.assert_array_equal(run(), run())

import numpy as np
import numpy.testing as npt
import pytest

from cellformer import autodiff as ad
from cellformer.autodiff import Tensor, grad_check
from cellformer.checks import OP_TOLERANCE, op_checks
from cellformer.errors import ShapeError


class TestForwardValues:
    def test_matmul_identity(self):
        a = np.arange(12, dtype=float).reshape(3, 4)
        out = ad.matmul(Tensor(np.eye(3)), Tensor(a))
        npt.assert_array_equal(out.values, a)

    def test_relu(self):
        out = ad.relu(Tensor([[-1.0, 0.0, 2.0]]))
        npt.assert_array_equal(out.values, [[0.0, 0.0, 2.0]])

    def test_softmax_uniform_row(self):
        out = ad.softmax_rows(Tensor([[1.0, 1.0, 1.0]]))
        npt.assert_allclose(out.values, [[1 / 3, 1 / 3, 1 / 3]], atol=1e-15)

    def test_softmax_extreme_no_overflow(self):
        out = ad.softmax_rows(Tensor([[1000.0, 0.0]]))
        assert np.isfinite(out.values).all()
        npt.assert_allclose(out.values[0, 0], 1.0, atol=1e-12)
        npt.assert_allclose(out.values[0, 1], 0.0, atol=1e-12)

    def test_softmax_rows_sum_to_one(self):
        rng = np.random.default_rng(0)
        out = ad.softmax_rows(Tensor(rng.normal(size=(20, 7)) * 10))
        npt.assert_allclose(out.values.sum(axis=1), np.ones(20), atol=1e-9)

    def test_layernorm_constant_row_zeros(self):
        d = 6
        out = ad.layernorm_rows(
            Tensor(np.full((2, d), 3.7)), Tensor(np.ones(d)), Tensor(np.zeros(d)))
        npt.assert_allclose(out.values, np.zeros((2, d)), atol=1e-9)

    def test_layernorm_zero_gamma_gives_beta(self):
        rng = np.random.default_rng(1)
        beta = rng.normal(size=5)
        out = ad.layernorm_rows(
            Tensor(rng.normal(size=(3, 5))), Tensor(np.zeros(5)), Tensor(beta))
        npt.assert_allclose(out.values, np.tile(beta, (3, 1)), atol=1e-15)

    def test_masked_mean(self):
        x = Tensor([[1.0, 3.0], [3.0, 5.0]])
        npt.assert_array_equal(
            ad.masked_mean_rows(x, [True, True]).values, [2.0, 4.0])
        npt.assert_array_equal(
            ad.masked_mean_rows(Tensor([[1.0, 3.0], [9.0, 9.0]]), [True, False]).values,
            [1.0, 3.0])

    def test_masked_mean_all_false_errors(self):
        with pytest.raises(ShapeError):
            ad.masked_mean_rows(Tensor([[1.0, 2.0]]), [False])


class TestBackward:
    def test_sum_grad_ones(self):
        x = Tensor(np.arange(6, dtype=float).reshape(2, 3))
        ad.sum_all(x).backward()
        npt.assert_array_equal(x.grad, np.ones((2, 3)))

    def test_square_at_three(self):
        x = Tensor(3.0)
        ad.mul(x, x).backward()
        npt.assert_allclose(x.grad, 6.0)

    def test_relu_subgradient(self):
        x = Tensor([-1.0, 2.0])
        ad.sum_all(ad.relu(x)).backward()
        npt.assert_array_equal(x.grad, [0.0, 1.0])

    def test_relu_grad_zero_at_kink(self):
        x = Tensor([0.0])
        ad.sum_all(ad.relu(x)).backward()
        npt.assert_array_equal(x.grad, [0.0])

    def test_backward_requires_scalar(self):
        with pytest.raises(ShapeError):
            Tensor([1.0, 2.0]).backward()

    def test_backward_is_linear(self):
        rng = np.random.default_rng(3)
        values = rng.normal(size=(3, 3))
        a, b = 2.5, -1.25

        def f(t):
            return ad.sum_all(ad.mul(t, t))

        def g(t):
            return ad.sum_all(ad.exp(ad.mul(t, 0.1)))

        x = Tensor(values.copy())
        ad.add(ad.mul(f(x), a), ad.mul(g(x), b)).backward()
        combined = x.grad.copy()

        x1 = Tensor(values.copy())
        f(x1).backward()
        x2 = Tensor(values.copy())
        g(x2).backward()
        npt.assert_allclose(combined, a * x1.grad + b * x2.grad, atol=1e-12)

    def test_repeated_backward_accumulates(self):
        x = Tensor([1.0, 2.0])
        out = ad.sum_all(ad.mul(x, x))
        out.backward()
        single = x.grad.copy()
        out.backward()
        npt.assert_allclose(x.grad, 2 * single)

    def test_grad_reused_node(self):
        # x appears twice in the graph; contributions must add
        x = Tensor(2.0)
        y = ad.add(ad.mul(x, x), ad.mul(x, 3.0))  # x^2 + 3x -> 2x + 3 = 7
        y.backward()
        npt.assert_allclose(x.grad, 7.0)


class TestShapeErrors:
    def test_matmul_mismatch_reports_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))

    def test_add_mismatch(self):
        with pytest.raises(ShapeError):
            ad.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))


class TestFiniteDifferences:
    def test_every_op_matches_central_differences(self):
        for result in op_checks():
            assert result.max_rel_err < OP_TOLERANCE, (
                f"{result.name}: {result.max_rel_err}")

    def test_grad_check_simple(self):
        err = grad_check(lambda t: ad.sum_all(ad.mul(t, t)), Tensor([1.5, -2.0]))
        assert err < 1e-8

    def test_softmax_jacobian_vector_product(self):
        rng = np.random.default_rng(5)
        w = ad.constant(rng.normal(size=(4, 6)))
        x = Tensor(rng.normal(size=(4, 6)))
        err = grad_check(lambda t: ad.sum_all(ad.mul(ad.softmax_rows(t), w)), x)
        assert err < 1e-4

    def test_layernorm_gradient(self):
        rng = np.random.default_rng(6)
        w = ad.constant(rng.normal(size=(3, 5)))
        gamma = Tensor(rng.uniform(0.5, 1.5, size=5))
        beta = Tensor(rng.normal(size=5))
        x = Tensor(rng.normal(size=(3, 5)))
        err = grad_check(
            lambda t: ad.sum_all(ad.mul(ad.layernorm_rows(t, gamma, beta), w)), x)
        assert err < 1e-4


def test_dump_graph_lists_edges():
    x = Tensor([1.0, 2.0])
    out = ad.sum_all(ad.relu(x))
    text = ad.dump_graph(out)
    assert "sum" in text and "relu" in text

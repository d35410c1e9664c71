"""Autodiff core semantics: construction, graph rules, gradients."""

import warnings

import numpy as np
import pytest

from hdrmeta.tensor import core
from hdrmeta.tensor.core import (
    DetachedInputWarning,
    GraphError,
    NonFiniteError,
    ShapeError,
    Tensor,
    backward,
)
from hdrmeta.tensor.gradcheck import fd_gradient, max_rel_err, run_op_checks

from oracles import matmul_naive


class TestConstruction:
    def test_int_data_becomes_float32(self):
        t = Tensor([1, 2, 3])
        assert t.dtype == np.float32

    def test_float64_is_kept(self):
        t = Tensor(np.zeros(3, dtype=np.float64))
        assert t.dtype == np.float64

    def test_explicit_dtype(self):
        t = Tensor([1.0], dtype=np.float64)
        assert t.dtype == np.float64

    def test_non_float_dtype_rejected(self):
        with pytest.raises(TypeError):
            Tensor([1], dtype=np.int32)

    def test_rank_limit(self):
        Tensor(np.zeros((1, 1, 1, 1)))  # rank 4 ok
        with pytest.raises(ShapeError):
            Tensor(np.zeros((1, 1, 1, 1, 1)))

    def test_scalar_rank0(self):
        t = Tensor(3.5)
        assert t.shape == () and t.item() == 3.5

    def test_nan_input_rejected(self):
        with pytest.raises(NonFiniteError):
            Tensor([1.0, np.nan])

    def test_inf_input_rejected(self):
        with pytest.raises(NonFiniteError):
            Tensor([np.inf])


class TestValueSemantics:
    def test_ops_do_not_mutate_inputs(self):
        rng = np.random.default_rng(0)
        a = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
        b = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
        snap_a, snap_b = a.data.copy(), b.data.copy()
        out = core.sum(core.mul(core.add(a, b), core.sigmoid(a)))
        backward(out, [a, b])
        np.testing.assert_array_equal(a.data, snap_a)
        np.testing.assert_array_equal(b.data, snap_b)

    def test_item_requires_single_element(self):
        with pytest.raises(ShapeError):
            Tensor([1.0, 2.0]).item()

    def test_numpy_returns_copy(self):
        t = Tensor([1.0, 2.0])
        arr = t.numpy()
        arr[0] = 99.0
        assert t.data[0] == 1.0


class TestGraphRules:
    def test_no_grad_suppresses_recording(self):
        x = Tensor([1.0], requires_grad=True)
        with core.no_grad():
            y = core.mul(x, x)
        assert y.node is None

    def test_no_grad_restores_state(self):
        assert core.grad_enabled()
        with core.no_grad():
            assert not core.grad_enabled()
        assert core.grad_enabled()

    def test_backward_needs_scalar(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(GraphError):
            backward(core.mul(x, x), x)

    def test_detached_wrt_warns_and_zeroes(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        y = core.sum(core.mul(x, x))
        free = Tensor([5.0, 6.0])
        with warnings.catch_warnings(record=True) as w:
            warnings.simplefilter("always")
            g = backward(y, free)
        assert any(issubclass(wi.category, DetachedInputWarning) for wi in w)
        np.testing.assert_array_equal(g.data, [0.0, 0.0])

    def test_unused_tracked_input_zeroes_silently(self):
        x = Tensor([1.0], requires_grad=True)
        unused = Tensor([2.0], requires_grad=True)
        y = core.sum(core.mul(x, x))
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            g = backward(y, unused)
        np.testing.assert_array_equal(g.data, [0.0])

    def test_constant_operands_not_differentiated(self):
        x = Tensor([4.0], requires_grad=True)
        c = Tensor([0.0])  # sqrt'(0) is infinite, but c is a constant branch
        y = core.sum(core.add(core.mul(x, x), core.sqrt(c)))
        g = backward(y, x)
        np.testing.assert_allclose(g.data, [8.0])

    def test_grad_accumulates_across_uses(self):
        x = Tensor([3.0], requires_grad=True)
        y = core.sum(core.add(core.mul(x, x), x))  # x^2 + x
        g = backward(y, x)
        np.testing.assert_allclose(g.data, [7.0])

    def test_detach_cuts_graph(self):
        x = Tensor([2.0], requires_grad=True)
        y = core.mul(x, x).detach()
        z = core.sum(core.mul(y, x))
        g = backward(z, x)
        np.testing.assert_allclose(g.data, [4.0])  # y treated as constant 4


class TestHigherOrder:
    def test_second_derivative(self):
        x = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
        y = core.sum(core.pow_scalar(x, 3.0))
        g1 = backward(y, x, create_graph=True)
        g2 = backward(core.sum(g1), x)
        np.testing.assert_allclose(g2.data, 6.0 * x.data)

    def test_third_derivative(self):
        x = Tensor(np.array([0.5, -1.5]), requires_grad=True)
        y = core.sum(core.pow_scalar(x, 4.0))
        g1 = backward(y, x, create_graph=True)
        g2 = backward(core.sum(g1), x, create_graph=True)
        g3 = backward(core.sum(g2), x)
        np.testing.assert_allclose(g3.data, 24.0 * x.data, rtol=1e-12)

    def test_create_graph_false_returns_constants(self):
        x = Tensor([2.0], requires_grad=True)
        g = backward(core.sum(core.mul(x, x)), x)
        assert g.node is None

    def test_create_graph_true_is_differentiable(self):
        x = Tensor([2.0], requires_grad=True)
        g = backward(core.sum(core.mul(x, x)), x, create_graph=True)
        assert g.node is not None

    def test_sigmoid_second_derivative(self):
        # s'' = s(1-s)(1-2s)
        x = Tensor(np.array([0.3, -0.7]), requires_grad=True)
        s = core.sigmoid(x)
        g1 = backward(core.sum(s), x, create_graph=True)
        g2 = backward(core.sum(g1), x)
        sv = 1.0 / (1.0 + np.exp(-x.data))
        np.testing.assert_allclose(g2.data, sv * (1 - sv) * (1 - 2 * sv), rtol=1e-6)


class TestNonFinitePolicy:
    def test_div_by_zero_raises_with_op_name(self):
        a = Tensor([1.0])
        b = Tensor([0.0])
        with pytest.raises(NonFiniteError, match="div"):
            core.div(a, b)

    def test_sqrt_of_negative_raises(self):
        with pytest.raises(NonFiniteError, match="sqrt"):
            core.sqrt(Tensor([-1.0]))

    def test_error_reports_input_stats(self):
        with pytest.raises(NonFiniteError, match="min=.*max="):
            core.div(Tensor([1.0, 2.0]), Tensor([0.0, 1.0]))


class TestPiecewiseOps:
    def test_abs_gradient_zero_at_zero(self):
        x = Tensor([0.0, -2.0, 3.0], requires_grad=True)
        g = backward(core.sum(core.absolute(x)), x)
        np.testing.assert_array_equal(g.data, [0.0, -1.0, 1.0])

    def test_maximum_scalar_gradient_zero_at_threshold(self):
        x = Tensor([0.0, -1.0, 1.0], requires_grad=True)
        g = backward(core.sum(core.maximum_scalar(x, 0.0)), x)
        np.testing.assert_array_equal(g.data, [0.0, 0.0, 1.0])

    def test_sigmoid_output_strictly_inside_unit_interval(self):
        x = Tensor(np.array([-1e4, -50.0, 0.0, 50.0, 1e4], dtype=np.float32))
        y = core.sigmoid(x).data
        assert np.all(y > 0.0) and np.all(y < 1.0)
        assert y[2] == 0.5


class TestShapes:
    def test_broadcast_gradients_reduce_to_operand_shape(self):
        a = Tensor(np.ones((2, 1, 4)), requires_grad=True)
        b = Tensor(np.ones((3, 1)), requires_grad=True)
        ga, gb = backward(core.sum(core.mul(a, b)), [a, b])
        assert ga.shape == (2, 1, 4) and gb.shape == (3, 1)
        np.testing.assert_array_equal(ga.data, np.full((2, 1, 4), 3.0))
        np.testing.assert_array_equal(gb.data, np.full((3, 1), 8.0))

    def test_transpose_rejects_bad_permutation(self):
        with pytest.raises(ShapeError):
            core.transpose(Tensor(np.zeros((2, 3))), (0, 0))

    def test_narrow_bounds_checked(self):
        with pytest.raises(ShapeError):
            core.narrow(Tensor(np.zeros((2, 3))), 1, 2, 2)

    def test_concat_requires_matching_off_axis_shapes(self):
        with pytest.raises(ShapeError):
            core.concat([Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 4)))], axis=0)

    def test_concat_then_narrow_recovers_parts(self):
        a = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        b = Tensor(np.arange(6.0, 14.0).reshape(2, 4))
        cat = core.concat([a, b], axis=1)
        back = core.narrow(cat, 1, 0, 3)
        np.testing.assert_array_equal(back.data, a.data)
        g = backward(core.sum(core.mul(back, back)), a)
        np.testing.assert_allclose(g.data, 2 * a.data)

    def test_pad_then_narrow_roundtrip(self):
        a = Tensor(np.arange(4.0).reshape(2, 2))
        padded = core.pad(a, [(1, 1), (0, 2)])
        assert padded.shape == (4, 4)
        np.testing.assert_array_equal(core.narrow(core.narrow(padded, 0, 1, 2), 1, 0, 2).data, a.data)

    def test_matmul_requires_2d(self):
        with pytest.raises(ShapeError):
            core.matmul(Tensor(np.zeros((2, 2, 2))), Tensor(np.zeros((2, 2))))


class TestMatmulFixedOrder:
    def test_float64_matches_naive_loops_bitwise(self):
        rng = np.random.default_rng(3)
        for m, k, n in [(3, 5, 4), (1, 17, 2), (8, 8, 8)]:
            a = rng.standard_normal((m, k))
            b = rng.standard_normal((k, n))
            got = core.matmul(Tensor(a), Tensor(b)).data
            np.testing.assert_array_equal(got, matmul_naive(a, b))


class TestNumpyInterop:
    def test_scalar_arithmetic_keeps_dtype(self):
        t = Tensor(np.ones(3, dtype=np.float32))
        for out in (t + 1, 1 + t, t - 1.0, 1.0 - t, t * 2, 2 * t, t / 2, 2.0 / t, -t, t**2):
            assert out.dtype == np.float32, out

    def test_ndarray_left_operand_defers_to_tensor(self):
        t = Tensor(np.ones(3), requires_grad=True)
        out = np.float64(2.0) * t
        assert isinstance(out, Tensor)


class TestFiniteDifferenceOracle:
    def test_fd_of_sum_is_exactly_ones(self):
        # integer values, power-of-two step: every float op is exact
        x = Tensor(np.array([1.0, 2.0, 3.0, 4.0]))
        g = fd_gradient(lambda t: core.sum(t), x, h=0.5)
        np.testing.assert_array_equal(g, np.ones(4))

    def test_fd_matches_linear_coefficients(self):
        w = np.array([2.0, -3.0, 0.5])
        x = Tensor(np.array([1.0, 4.0, -2.0]))
        g = fd_gradient(lambda t: core.sum(core.mul(t, Tensor(w))), x, h=0.25)
        np.testing.assert_array_equal(g, w)


def test_every_primitive_passes_gradient_check():
    results = run_op_checks(seed=0)
    failures = [f"{r.name}: {r.max_rel_err:.2e} > {r.tol:.0e}" for r in results if not r.passed]
    assert not failures, "gradient checks failed:\n" + "\n".join(failures)


def test_max_rel_err_floors_denominator():
    assert max_rel_err(np.zeros(3), np.zeros(3)) == 0.0
    assert max_rel_err(np.array([1e-12]), np.array([0.0])) <= 1e-4

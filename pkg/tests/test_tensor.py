"""Engine tests: op semantics against numpy, gradients against central
differences computed independently of the tape."""

import numpy as np
import pytest

from gnt import tensor as T
from gnt.tensor import (
    ContractError,
    Graph,
    GradCheckReport,
    NumericError,
    ShapeError,
    Tensor,
    grad_check,
)


def numeric_grad(loss_fn, param: Tensor, h: float = 1e-6) -> np.ndarray:
    """Independent central-difference gradient, no tape involved."""
    out = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    oflat = out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = loss_fn().item()
        flat[i] = orig - h
        down = loss_fn().item()
        flat[i] = orig
        oflat[i] = (up - down) / (2.0 * h)
    return out


def rel_err(a: np.ndarray, n: np.ndarray) -> float:
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)
    return float(np.max(np.abs(a - n) / denom))


def check_op_grads(loss_fn, params: dict, tol: float = 1e-6):
    with Graph() as g:
        loss = loss_fn()
    grads = g.backward(loss, accumulate=False)
    for name, p in params.items():
        num = numeric_grad(loss_fn, p)
        ana = grads.get(p, np.zeros_like(p.data))
        assert rel_err(ana, num) < tol, f"{name}: analytic vs numeric mismatch"


class TestMatmul:
    def test_identity(self):
        rng = np.random.default_rng(0)
        a = Tensor(rng.standard_normal((4, 3)), dtype=np.float64)
        eye = Tensor(np.eye(3), dtype=np.float64)
        out = a @ eye
        np.testing.assert_array_equal(out.data, a.data)

    def test_one_by_one(self):
        a = Tensor([[3.0]], dtype=np.float64)
        b = Tensor([[4.0]], dtype=np.float64)
        assert (a @ b).item() == 12.0

    def test_identity_insertion_bitwise(self):
        rng = np.random.default_rng(1)
        a = Tensor(rng.standard_normal((5, 4)), dtype=np.float64)
        b = Tensor(rng.standard_normal((4, 6)), dtype=np.float64)
        eye = Tensor(np.eye(4), dtype=np.float64)
        direct = (a @ b).data
        via_eye = ((a @ eye) @ b).data
        np.testing.assert_array_equal(direct, via_eye)

    def test_batched_broadcast(self):
        rng = np.random.default_rng(2)
        a = Tensor(rng.standard_normal((7, 2, 3, 4)), dtype=np.float64)
        b = Tensor(rng.standard_normal((4, 5)), dtype=np.float64)
        out = a @ b
        assert out.shape == (7, 2, 3, 5)
        np.testing.assert_allclose(out.data, a.data @ b.data)

    def test_shape_error_message_includes_shapes(self):
        a = Tensor(np.zeros((2, 3)))
        b = Tensor(np.zeros((4, 5)))
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
            a @ b

    def test_gradients(self):
        rng = np.random.default_rng(3)
        a = Tensor(rng.standard_normal((3, 4)), requires_grad=True, dtype=np.float64)
        b = Tensor(rng.standard_normal((4, 2)), requires_grad=True, dtype=np.float64)
        check_op_grads(lambda: (a @ b).sum(), {"a": a, "b": b})

    def test_batched_gradients(self):
        rng = np.random.default_rng(4)
        a = Tensor(rng.standard_normal((2, 3, 4)), requires_grad=True, dtype=np.float64)
        b = Tensor(rng.standard_normal((4, 3)), requires_grad=True, dtype=np.float64)
        check_op_grads(lambda: ((a @ b) * (a @ b)).sum(), {"a": a, "b": b})


class TestSoftmax:
    def test_uniform_on_equal_logits(self):
        x = Tensor(np.zeros((2, 5)), dtype=np.float64)
        out = T.softmax(x, axis=-1)
        np.testing.assert_allclose(out.data, np.full((2, 5), 0.2))

    def test_shift_invariance_and_stability(self):
        rng = np.random.default_rng(5)
        x = rng.standard_normal((3, 4))
        a = T.softmax(Tensor(x, dtype=np.float64), axis=-1).data
        b = T.softmax(Tensor(x + 1000.0, dtype=np.float64), axis=-1).data
        np.testing.assert_allclose(a, b, atol=1e-12)
        huge = T.softmax(Tensor(np.array([[1e4, -1e4, 0.0]]), dtype=np.float64)).data
        assert np.all(np.isfinite(huge))

    @pytest.mark.parametrize("axis", [0, 1, 2, -1])
    def test_slices_sum_to_one(self, axis):
        rng = np.random.default_rng(6)
        x = Tensor(rng.standard_normal((3, 4, 5)) * 10.0, dtype=np.float64)
        out = T.softmax(x, axis=axis)
        np.testing.assert_allclose(out.data.sum(axis=axis), 1.0, atol=1e-12)

    def test_gradients(self):
        rng = np.random.default_rng(7)
        x = Tensor(rng.standard_normal((4, 3)), requires_grad=True, dtype=np.float64)
        w = Tensor(rng.standard_normal((4, 3)), dtype=np.float64)
        check_op_grads(lambda: (T.softmax(x, axis=1) * w).sum(), {"x": x})


class TestLayernorm:
    def test_standardizes_last_axis(self):
        rng = np.random.default_rng(8)
        x = Tensor(rng.standard_normal((6, 16)) * 3 + 2, dtype=np.float64)
        g = Tensor(np.ones(16), dtype=np.float64)
        b = Tensor(np.zeros(16), dtype=np.float64)
        out = T.layernorm(x, g, b).data
        np.testing.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-12)
        np.testing.assert_allclose(out.var(axis=-1), 1.0, atol=1e-4)

    def test_constant_row_maps_to_beta(self):
        x = Tensor(np.full((2, 8), 7.0), dtype=np.float64)
        g = Tensor(np.ones(8) * 2, dtype=np.float64)
        b = Tensor(np.arange(8, dtype=np.float64))
        out = T.layernorm(x, g, b).data
        np.testing.assert_allclose(out, np.broadcast_to(np.arange(8.0), (2, 8)))

    def test_gradients(self):
        rng = np.random.default_rng(9)
        x = Tensor(rng.standard_normal((3, 6)), requires_grad=True, dtype=np.float64)
        g = Tensor(rng.standard_normal(6), requires_grad=True, dtype=np.float64)
        b = Tensor(rng.standard_normal(6), requires_grad=True, dtype=np.float64)
        w = Tensor(rng.standard_normal((3, 6)), dtype=np.float64)
        check_op_grads(
            lambda: (T.layernorm(x, g, b) * w).sum(), {"x": x, "gamma": g, "beta": b}
        )


class TestElementwiseAndReductions:
    def test_relu(self):
        x = Tensor(np.array([-2.0, 0.0, 3.0]), dtype=np.float64)
        np.testing.assert_array_equal(T.relu(x).data, [0.0, 0.0, 3.0])

    def test_sigmoid_softplus_extremes_finite(self):
        x = Tensor(np.array([-100.0, 0.0, 100.0]), dtype=np.float64)
        s = T.sigmoid(x).data
        sp = T.softplus(x).data
        assert np.all(np.isfinite(s)) and np.all(np.isfinite(sp))
        np.testing.assert_allclose(s[1], 0.5)
        np.testing.assert_allclose(sp[1], np.log(2.0))

    def test_max_tie_routes_to_first(self):
        x = Tensor(np.array([[1.0, 5.0, 5.0]]), requires_grad=True, dtype=np.float64)
        with Graph() as g:
            loss = T.tmax(x, axis=1).sum()
        grads = g.backward(loss, accumulate=False)
        np.testing.assert_array_equal(grads[x], [[0.0, 1.0, 0.0]])

    def test_max_flat_tie_routes_to_first(self):
        x = Tensor(np.array([[3.0, 1.0], [3.0, 0.0]]), requires_grad=True, dtype=np.float64)
        with Graph() as g:
            loss = T.tmax(x)
        grads = g.backward(loss, accumulate=False)
        np.testing.assert_array_equal(grads[x], [[1.0, 0.0], [0.0, 0.0]])

    def test_mean_max_grads(self):
        rng = np.random.default_rng(10)
        x = Tensor(rng.standard_normal((4, 5)), requires_grad=True, dtype=np.float64)
        check_op_grads(lambda: T.tmean(x, axis=0).sum(), {"x": x})
        check_op_grads(lambda: T.tmax(x, axis=1).sum(), {"x": x})

    def test_unary_grads(self):
        rng = np.random.default_rng(11)
        x = Tensor(rng.standard_normal((3, 4)) * 0.5, requires_grad=True, dtype=np.float64)
        for fn in (T.relu, T.sigmoid, T.exp, T.softplus):
            check_op_grads(lambda fn=fn: fn(x).sum(), {"x": x})
        xp = Tensor(rng.uniform(0.5, 2.0, (3, 4)), requires_grad=True, dtype=np.float64)
        check_op_grads(lambda: T.log(xp).sum(), {"xp": xp})


class TestStructuralOps:
    def test_concat_and_grads(self):
        rng = np.random.default_rng(12)
        a = Tensor(rng.standard_normal((2, 3)), requires_grad=True, dtype=np.float64)
        b = Tensor(rng.standard_normal((2, 5)), requires_grad=True, dtype=np.float64)
        w = Tensor(rng.standard_normal((2, 8)), dtype=np.float64)
        check_op_grads(lambda: (T.concat([a, b], axis=1) * w).sum(), {"a": a, "b": b})

    def test_concat_shape_error(self):
        a = Tensor(np.zeros((2, 3)))
        b = Tensor(np.zeros((4, 3)))
        with pytest.raises(ShapeError):
            T.concat([a, b], axis=1)

    def test_narrow_grads(self):
        rng = np.random.default_rng(13)
        x = Tensor(rng.standard_normal((4, 6)), requires_grad=True, dtype=np.float64)
        w = Tensor(rng.standard_normal((4, 2)), dtype=np.float64)
        check_op_grads(lambda: (T.narrow(x, 1, 2, 2) * w).sum(), {"x": x})

    def test_gather_rows_repeats_and_grads(self):
        rng = np.random.default_rng(14)
        x = Tensor(rng.standard_normal((5, 3)), requires_grad=True, dtype=np.float64)
        idx = np.array([0, 2, 2, 4, 0, 0])
        w = Tensor(rng.standard_normal((6, 3)), dtype=np.float64)
        with Graph() as g:
            loss = (T.gather_rows(x, idx) * w).sum()
        grads = g.backward(loss, accumulate=False)
        expected = np.zeros((5, 3))
        for r, i in enumerate(idx):
            expected[i] += w.data[r]
        np.testing.assert_allclose(grads[x], expected, atol=1e-12)

    def test_gather_rows_out_of_range(self):
        x = Tensor(np.zeros((3, 2)))
        with pytest.raises(ContractError):
            T.gather_rows(x, np.array([0, 3]))

    def test_pad2d_grads(self):
        rng = np.random.default_rng(15)
        x = Tensor(rng.standard_normal((3, 4, 2)), requires_grad=True, dtype=np.float64)
        w = Tensor(rng.standard_normal((5, 6, 2)), dtype=np.float64)
        check_op_grads(lambda: (T.pad2d(x, 1) * w).sum(), {"x": x})

    def test_cumsum_exclusive_semantics(self):
        x = Tensor(np.array([[1.0, 2.0, 3.0]]), dtype=np.float64)
        np.testing.assert_array_equal(T.cumsum(x, axis=1).data, [[1.0, 3.0, 6.0]])
        np.testing.assert_array_equal(
            T.cumsum(x, axis=1, exclusive=True).data, [[0.0, 1.0, 3.0]]
        )

    def test_cumsum_grads(self):
        rng = np.random.default_rng(16)
        x = Tensor(rng.standard_normal((2, 5)), requires_grad=True, dtype=np.float64)
        w = Tensor(rng.standard_normal((2, 5)), dtype=np.float64)
        check_op_grads(lambda: (T.cumsum(x, axis=1) * w).sum(), {"x": x})
        check_op_grads(
            lambda: (T.cumsum(x, axis=1, exclusive=True) * w).sum(), {"x": x}
        )

    def test_reshape_swapaxes_grads(self):
        rng = np.random.default_rng(17)
        x = Tensor(rng.standard_normal((2, 3, 4)), requires_grad=True, dtype=np.float64)
        w = Tensor(rng.standard_normal((4, 6)), dtype=np.float64)
        check_op_grads(
            lambda: (T.swapaxes(x, 0, 2).reshape((4, 6)) * w).sum(), {"x": x}
        )

    def test_broadcast_add_grads(self):
        rng = np.random.default_rng(18)
        x = Tensor(rng.standard_normal((4, 3)), requires_grad=True, dtype=np.float64)
        bias = Tensor(rng.standard_normal(3), requires_grad=True, dtype=np.float64)
        check_op_grads(lambda: ((x + bias) * (x + bias)).sum(), {"x": x, "b": bias})


class TestBackwardSemantics:
    def test_sum_gives_ones(self):
        x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True, dtype=np.float64)
        with Graph() as g:
            loss = x.sum()
        grads = g.backward(loss, accumulate=False)
        np.testing.assert_array_equal(grads[x], np.ones((2, 3)))

    def test_square_gives_2x(self):
        x = Tensor(np.arange(4.0), requires_grad=True, dtype=np.float64)
        with Graph() as g:
            loss = (x * x).sum()
        grads = g.backward(loss, accumulate=False)
        np.testing.assert_allclose(grads[x], 2.0 * x.data)

    def test_accumulation_across_calls(self):
        x = Tensor(np.ones(3), requires_grad=True, dtype=np.float64)
        with Graph() as g:
            loss = (x * x).sum()
        g.backward(loss)
        first = x.grad.copy()
        g.backward(loss)
        np.testing.assert_allclose(x.grad, 2.0 * first)

    def test_non_scalar_loss_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with Graph() as g:
            y = x * x
        with pytest.raises(ContractError):
            g.backward(y)

    def test_reuse_of_intermediate_accumulates(self):
        x = Tensor(np.array([2.0]), requires_grad=True, dtype=np.float64)
        with Graph() as g:
            y = x * x
            loss = (y + y).sum()
        grads = g.backward(loss, accumulate=False)
        np.testing.assert_allclose(grads[x], [8.0])

    def test_no_recording_outside_graph(self):
        x = Tensor(np.ones(3), requires_grad=True)
        y = x * x
        assert y.requires_grad is False

    def test_constants_get_no_grads(self):
        x = Tensor(np.ones(3), requires_grad=True, dtype=np.float64)
        c = Tensor(np.full(3, 2.0), dtype=np.float64)
        with Graph() as g:
            loss = (x * c).sum()
        grads = g.backward(loss, accumulate=False)
        assert c not in grads and x in grads

    def test_dtype_mismatch_rejected(self):
        a = Tensor(np.ones(3), dtype=np.float32)
        b = Tensor(np.ones(3), dtype=np.float64)
        with pytest.raises(ContractError, match="dtype"):
            a + b

    def test_finite_check_mode(self):
        T.set_finite_checks(True)
        try:
            bad = Tensor(np.array([-1.0]), dtype=np.float64)
            with np.errstate(invalid="ignore"):
                with pytest.raises(NumericError):
                    T.log(bad)
        finally:
            T.set_finite_checks(False)


class TestGradCheck:
    def test_linear_is_exact(self):
        rng = np.random.default_rng(19)
        w = Tensor(rng.standard_normal((3, 2)), requires_grad=True, dtype=np.float64)
        x = Tensor(rng.standard_normal((4, 3)), dtype=np.float64)
        report = grad_check(lambda: (x @ w).sum(), {"w": w}, h=1e-6, tol=1e-8)
        assert isinstance(report, GradCheckReport)
        assert report.passed, repr(report)

    def test_softmax_mean_tight(self):
        rng = np.random.default_rng(20)
        x = Tensor(rng.standard_normal((5, 4)), requires_grad=True, dtype=np.float64)
        w = Tensor(rng.standard_normal((5, 4)), dtype=np.float64)
        report = grad_check(
            lambda: (T.softmax(x, axis=-1) * w).mean(), {"x": x}, tol=1e-6
        )
        assert report.passed, repr(report)

    def test_random_composed_graphs(self):
        for seed in range(5):
            rng = np.random.default_rng(100 + seed)
            w1 = Tensor(rng.standard_normal((6, 8)) * 0.5, requires_grad=True, dtype=np.float64)
            b1 = Tensor(rng.standard_normal(8) * 0.1, requires_grad=True, dtype=np.float64)
            w2 = Tensor(rng.standard_normal((8, 3)) * 0.5, requires_grad=True, dtype=np.float64)
            g_ln = Tensor(np.abs(rng.standard_normal(3)) + 0.5, requires_grad=True, dtype=np.float64)
            b_ln = Tensor(rng.standard_normal(3) * 0.1, requires_grad=True, dtype=np.float64)
            x = Tensor(rng.standard_normal((7, 6)), dtype=np.float64)

            def loss_fn():
                h = T.relu(x @ w1 + b1)
                y = T.layernorm(h @ w2, g_ln, b_ln)
                return (T.softmax(y, axis=-1) * y).mean()

            report = grad_check(
                loss_fn,
                {"w1": w1, "b1": b1, "w2": w2, "g": g_ln, "b": b_ln},
                tol=1e-4,
            )
            assert report.passed, f"seed {seed}: {report!r}"

    def test_report_flags_wrong_gradient(self):
        # A loss that reads the buffer through a detached copy has zero
        # analytic gradient but nonzero numeric gradient; the report
        # must notice.
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True, dtype=np.float64)

        def detached_loss():
            return Tensor(float(np.sum(x.data**2)), dtype=np.float64)

        report = grad_check(detached_loss, {"x": x}, tol=1e-4)
        assert not report.passed
        assert report.worst_param == "x"

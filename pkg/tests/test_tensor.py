"""Tensor op semantics, gradient correctness against finite differences,
and the Adam update rule."""

import numpy as np
import pytest

from conftest import check_gradients
from dft import tensor as T
from dft.errors import ContractError, ShapeError


class TestOpValues:
    def test_matmul_identity(self):
        m = T.constant([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]])
        out = T.matmul(T.constant(np.eye(2)), m)
        np.testing.assert_array_equal(out.data, m.data)

    def test_softmax_constant_row(self):
        out = T.softmax_rows(T.constant([[3.7, 3.7, 3.7, 3.7]]))
        np.testing.assert_allclose(out.data, 0.25, atol=1e-15)

    def test_frobenius_sq_identity(self):
        out = T.frobenius_sq(T.constant(np.eye(2)))
        assert out.data[0] == 2.0

    def test_softmax_rows_sum_to_one(self):
        rng = np.random.default_rng(0)
        x = rng.uniform(-5, 5, (10, 7))
        mask = rng.random((10, 7)) < 0.6
        mask[:, 0] = True  # keep every row alive
        s = T.softmax_rows(T.constant(x), mask=mask).data
        assert (s >= 0).all()
        np.testing.assert_allclose(s.sum(axis=1), 1.0, atol=1e-12)
        assert (s[~mask] == 0).all()

    def test_softmax_fully_masked_row_rejected(self):
        with pytest.raises(ContractError, match="row 1"):
            T.softmax_rows(T.constant(np.ones((2, 3))),
                           mask=np.array([[1, 1, 1], [0, 0, 0]], dtype=bool))

    def test_log_clamps_domain(self):
        out = T.log(T.constant([[0.0, 1.0]]))
        np.testing.assert_allclose(out.data, [[np.log(1e-12), 0.0]])

    def test_shape_mismatch_names_op_and_shapes(self):
        with pytest.raises(ShapeError, match=r"matmul.*\(2, 3\).*\(2, 3\)"):
            T.matmul(T.constant(np.ones((2, 3))), T.constant(np.ones((2, 3))))
        with pytest.raises(ShapeError, match="add"):
            T.add(T.constant(np.ones((2, 3))), T.constant(np.ones((4, 1))))

    def test_mean_axes(self):
        x = T.constant([[1.0, 2.0], [3.0, 4.0]])
        assert T.mean(x).data[0] == 2.5
        np.testing.assert_array_equal(T.mean(x, axis=0).data, [[2.0, 3.0]])
        np.testing.assert_array_equal(T.mean(x, axis=1).data, [[1.5], [3.5]])

    def test_row_norm(self):
        out = T.row_norm(T.constant([[3.0, 4.0], [0.0, 0.0]]))
        np.testing.assert_array_equal(out.data, [[5.0], [0.0]])


class TestBackward:
    def test_trace_gradient_is_identity(self):
        w = T.param(np.random.default_rng(1).normal(size=(3, 3)))
        T.backward(T.trace(w))
        np.testing.assert_array_equal(w.grad, np.eye(3))

    def test_half_frobenius_gradient_is_w(self):
        w = T.param(np.random.default_rng(2).normal(size=(3, 4)))
        T.backward(T.smul(T.frobenius_sq(w), 0.5))
        np.testing.assert_allclose(w.grad, w.data, atol=1e-15)

    def test_backward_requires_scalar(self):
        w = T.param(np.ones((2, 2)))
        with pytest.raises(ContractError, match="scalar"):
            T.backward(T.add(w, w))

    def test_backward_requires_tracked(self):
        with pytest.raises(ContractError, match="tracked"):
            T.backward(T.constant([1.0]))

    def test_diamond_graph_accumulates(self):
        # loss = 4 * mean(w + w) = sum(w + w) for 2x2 -> grad 2 everywhere
        w = T.param(np.ones((2, 2)))
        both = T.add(w, w)
        T.backward(T.smul(T.mean(both), 4.0))
        np.testing.assert_allclose(w.grad, np.full((2, 2), 2.0))

    def test_random_composite_graph_matches_finite_differences(self):
        """Chained ops through one graph: grad vs central differences."""
        rng = np.random.default_rng(7)
        a0 = rng.uniform(-1, 1, (4, 3))
        b0 = rng.uniform(-1, 1, (3, 4))

        def loss(a, b):
            prod = T.matmul(a, b)
            s = T.softmax_rows(prod)
            mixed = T.hadamard(T.exp(T.smul(prod, 0.3)), T.add(s, s))
            return T.add(T.frobenius_sq(T.relu(mixed)),
                         T.mean(T.log(T.add(s, s))))

        check_gradients(loss, [a0, b0])


def _rand(rng, *shape):
    return rng.uniform(-1, 1, shape)


def _op_cases():
    """One gradcheck recipe per registered op (enumerated for coverage)."""
    state = T.BatchNormState(3)
    return {
        "matmul": lambda rng: ([_rand(rng, 3, 4), _rand(rng, 4, 2)],
                               lambda a, b: T.mean(T.matmul(a, b))),
        "transpose": lambda rng: ([_rand(rng, 3, 4)],
                                  lambda a: T.frobenius_sq(T.transpose(a))),
        "add": lambda rng: ([_rand(rng, 3, 4), _rand(rng, 1, 4)],
                            lambda a, b: T.mean(T.exp(T.add(a, b)))),
        "subtract": lambda rng: ([_rand(rng, 3, 4), _rand(rng, 3, 4)],
                                 lambda a, b: T.frobenius_sq(T.subtract(a, b))),
        "smul": lambda rng: ([_rand(rng, 3, 4)],
                             lambda a: T.mean(T.smul(a, -2.5))),
        "hadamard": lambda rng: ([_rand(rng, 3, 4), _rand(rng, 3, 1)],
                                 lambda a, b: T.mean(T.hadamard(a, b))),
        "relu": lambda rng: ([_rand(rng, 4, 4)],
                             lambda a: T.mean(T.relu(a))),
        "step": lambda rng: ([_rand(rng, 4, 4)],
                             lambda a: T.mean(T.step(a))),
        "log": lambda rng: ([rng.uniform(0.1, 1.0, (3, 4))],
                            lambda a: T.mean(T.log(a))),
        "exp": lambda rng: ([_rand(rng, 3, 4)],
                            lambda a: T.mean(T.exp(a))),
        "softmax_rows": lambda rng: (
            [_rand(rng, 3, 5)],
            lambda a: T.mean(T.hadamard(
                T.softmax_rows(a, mask=_FIXED_MASK), _WEIGHTS))),
        "trace": lambda rng: ([_rand(rng, 4, 4)],
                              lambda a: T.trace(a)),
        "frobenius_sq": lambda rng: ([_rand(rng, 3, 4)],
                                     lambda a: T.frobenius_sq(a)),
        "mean": lambda rng: ([_rand(rng, 3, 4)],
                             lambda a: T.add(T.mean(T.exp(T.mean(a, axis=0))),
                                             T.mean(T.mean(a, axis=1)))),
        "row_norm": lambda rng: ([rng.uniform(0.2, 1.0, (3, 4))],
                                 lambda a: T.mean(T.row_norm(a))),
        "concat_cols": lambda rng: ([_rand(rng, 3, 2), _rand(rng, 3, 3)],
                                    lambda a, b: T.frobenius_sq(
                                        T.concat_cols(a, b))),
        "slice_cols": lambda rng: ([_rand(rng, 3, 5)],
                                   lambda a: T.mean(T.slice_cols(a, 1, 4))),
        "batch_norm": lambda rng: (
            [_rand(rng, 6, 3), rng.uniform(0.5, 1.5, (1, 3)), _rand(rng, 1, 3)],
            lambda x, g, b: T.mean(T.exp(
                T.batch_norm(x, g, b, state.copy(), training=True)))),
        "dropout": lambda rng: (
            [_rand(rng, 4, 3)],
            lambda x: T.mean(T.dropout(
                x, 0.4, np.random.default_rng(123), training=True))),
    }


_FIXED_MASK = np.array([[1, 1, 0, 1, 1],
                        [1, 0, 1, 1, 0],
                        [0, 1, 1, 0, 1]], dtype=bool)
_WEIGHTS = T.constant(np.arange(15, dtype=float).reshape(3, 5))


class TestGradientsAgainstFiniteDifferences:
    """Every registered op passes the finite-difference oracle on 20
    random instances (the per-op half of the gradient acceptance gate)."""

    @pytest.mark.parametrize("name", sorted(_op_cases()))
    def test_op(self, name):
        case = _op_cases()[name]
        for trial in range(20):
            rng = np.random.default_rng(1000 + 31 * trial)
            arrays, build = case(rng)
            check_gradients(build, arrays)

    def test_case_table_covers_registry(self):
        assert set(_op_cases()) == set(T.OPS)


class TestBatchNorm:
    def test_train_mode_standardizes(self):
        """Pre scale/shift, train-mode output has ~0 mean and ~unit variance."""
        rng = np.random.default_rng(3)
        x = T.constant(rng.normal(2.0, 3.0, (200, 5)))
        out = T.batch_norm(x, T.constant(np.ones((1, 5))),
                           T.constant(np.zeros((1, 5))),
                           T.BatchNormState(5), training=True)
        assert np.abs(out.data.mean(axis=0)).max() < 1e-9
        np.testing.assert_allclose(out.data.var(axis=0), 1.0, atol=1e-6)

    def test_eval_mode_uses_running_stats(self):
        state = T.BatchNormState(2)
        state.running_mean[:] = [[1.0, -1.0]]
        state.running_var[:] = [[4.0, 0.25]]
        x = T.constant([[3.0, 0.0]])
        out = T.batch_norm(x, T.constant(np.ones((1, 2))),
                           T.constant(np.zeros((1, 2))), state, training=False)
        np.testing.assert_allclose(out.data, [[1.0, 2.0]], rtol=1e-6)

    def test_running_stats_update_with_momentum(self):
        state = T.BatchNormState(1, momentum=0.1)
        x = T.constant(np.array([[0.0], [2.0]]))
        T.batch_norm(x, T.constant(np.ones((1, 1))),
                     T.constant(np.zeros((1, 1))), state, training=True)
        np.testing.assert_allclose(state.running_mean, [[0.1]])
        np.testing.assert_allclose(state.running_var, [[0.9 * 1.0 + 0.1 * 1.0]])


class TestDropout:
    def test_eval_mode_is_identity(self):
        x = T.constant(np.arange(6, dtype=float).reshape(2, 3))
        out = T.dropout(x, 0.5, np.random.default_rng(0), training=False)
        assert out is x

    def test_train_mode_preserves_expectation(self):
        """Inverted scaling: mean over 10^4 draws within 3 standard errors."""
        rng = np.random.default_rng(11)
        x = T.constant(np.full((1, 1), 2.0))
        rate = 0.3
        draws = np.array([
            T.dropout(x, rate, rng, training=True).data[0, 0]
            for _ in range(10_000)
        ])
        stderr = draws.std(ddof=1) / np.sqrt(len(draws))
        assert abs(draws.mean() - 2.0) < 3 * stderr

    def test_deterministic_given_seed(self):
        x = T.constant(np.ones((8, 8)))
        a = T.dropout(x, 0.5, np.random.default_rng(42), training=True)
        b = T.dropout(x, 0.5, np.random.default_rng(42), training=True)
        np.testing.assert_array_equal(a.data, b.data)


class TestAdam:
    def test_first_step_hand_computed(self):
        """Bias-corrected moments make the first update equal lr/(1+eps)."""
        p = T.param([1.0])
        p.grad = np.array([1.0])
        opt = T.Adam({"p": p})
        opt.step(0.1)
        expected = 1.0 - 0.1 / (1.0 + 1e-8)
        np.testing.assert_allclose(p.data, [expected], rtol=0, atol=1e-15)
        assert abs(p.data[0] - 0.9) < 1e-8
        assert opt.t == 1

    def test_zero_grad_leaves_param_unchanged(self):
        p = T.param([[1.0, -2.0]])
        p.grad = np.zeros((1, 2))
        T.Adam({"p": p}).step(0.1)
        np.testing.assert_array_equal(p.data, [[1.0, -2.0]])

    def test_negated_lr_negates_update_exactly(self):
        rng = np.random.default_rng(5)
        data = rng.normal(size=(3, 2))
        grad = rng.normal(size=(3, 2))
        results = []
        for lr in (0.05, -0.05):
            p = T.param(data.copy())
            p.grad = grad.copy()
            T.Adam({"p": p}).step(lr)
            results.append(p.data - data)
        np.testing.assert_allclose(results[0], -results[1], atol=1e-18)

    def test_missing_grad_rejected(self):
        p = T.param([1.0])
        with pytest.raises(ContractError, match="no gradient"):
            T.Adam({"p": p}).step(0.1)

    def test_step_counter_increments(self):
        p = T.param([1.0])
        opt = T.Adam({"p": p})
        for expected in (1, 2, 3):
            p.grad = np.array([0.5])
            opt.step(0.01)
            assert opt.t == expected

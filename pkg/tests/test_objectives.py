import numpy as np
import pytest

from raclora.core.objectives import (
    LinearRegressionObjective,
    LogisticRegressionObjective,
    QuadraticObjective,
    QuadraticSpec,
    RegressionSpec,
    finite_difference_gradient,
    infimum,
    sample_infima,
    sample_variance,
    synthetic_linear_regression,
    synthetic_logistic_regression,
)
from raclora.errors import InvalidSpec

from .conftest import COUNTEREXAMPLE_F_STAR

OBJECTIVES = ["counterexample", "small_linreg", "small_logreg"]


def linreg(x, y, reg_lambda, shape):
    spec = RegressionSpec(
        x=np.asarray(x), y=np.asarray(y), reg_lambda=reg_lambda, shape=shape
    )
    return LinearRegressionObjective(spec)


class TestQuadratic:
    def test_counterexample_constants(self, counterexample):
        assert counterexample.shape == (3, 3)
        assert counterexample.smoothness_l == pytest.approx(20.0)
        assert counterexample.pl_mu == pytest.approx(2.0)
        assert counterexample.optimum_value == pytest.approx(COUNTEREXAMPLE_F_STAR)

    def test_minimizer(self, counterexample):
        w_star = counterexample.minimizer()
        expected = -0.5 * np.ones(9) / np.array([10.0] + [1.0] * 8)
        np.testing.assert_allclose(w_star.reshape(-1), expected)
        assert counterexample.value(w_star) == pytest.approx(COUNTEREXAMPLE_F_STAR)
        np.testing.assert_allclose(counterexample.gradient(w_star), 0.0, atol=1e-14)

    def test_value_at_zero(self, counterexample):
        assert counterexample.value(np.zeros((3, 3))) == 0.0
        assert counterexample.gap(np.zeros((3, 3))) == pytest.approx(2.025)

    def test_not_positive_definite(self):
        m = np.diag([1.0, 0.0, 1.0, 1.0])
        spec = QuadraticSpec(m=m, b=np.ones(4), shape=(2, 2))
        with pytest.raises(InvalidSpec):
            QuadraticObjective(spec)

    def test_not_symmetric(self):
        m = np.array([[2.0, 1.0], [0.0, 2.0]])
        with pytest.raises(InvalidSpec):
            QuadraticObjective(QuadraticSpec(m=m, b=np.ones(2), shape=(1, 2)))

    def test_reshape_mismatch(self):
        with pytest.raises(InvalidSpec):
            QuadraticObjective(QuadraticSpec(m=np.eye(4), b=np.ones(4), shape=(3, 3)))

    def test_single_sample(self, counterexample, rng):
        w = rng.standard_normal((3, 3))
        assert counterexample.sample_count == 1
        np.testing.assert_array_equal(
            counterexample.sample_gradient(w, 0), counterexample.gradient(w)
        )
        assert sample_variance(counterexample, w) == 0.0


class TestGradients:
    @pytest.mark.parametrize("fixture", OBJECTIVES)
    def test_finite_differences(self, fixture, request, rng):
        obj = request.getfixturevalue(fixture)
        for _ in range(100):
            w = rng.standard_normal(obj.shape)
            grad = obj.gradient(w)
            fd = finite_difference_gradient(obj, w, step=1e-6)
            assert np.linalg.norm(fd - grad) <= 1e-5 * max(np.linalg.norm(grad), 1.0)

    @pytest.mark.parametrize("fixture", ["small_linreg", "small_logreg"])
    def test_sample_gradients_average_to_gradient(self, fixture, request, rng):
        obj = request.getfixturevalue(fixture)
        w = rng.standard_normal(obj.shape)
        grads = obj.sample_gradients(w)
        assert grads.shape == (obj.sample_count,) + obj.shape
        np.testing.assert_allclose(grads.mean(axis=0), obj.gradient(w), atol=1e-12)
        np.testing.assert_allclose(grads[3], obj.sample_gradient(w, 3), atol=1e-12)

    def test_sample_index_checked(self, small_linreg):
        with pytest.raises(IndexError):
            small_linreg.sample_gradient(small_linreg.zeros(), 40)


class TestObjectiveConstants:
    """Checks of L, mu and the finite sum at random points."""

    @pytest.mark.parametrize("fixture", OBJECTIVES)
    def test_pl_inequality(self, fixture, request, rng):
        obj = request.getfixturevalue(fixture)
        f_star = infimum(obj, tol=1e-10)
        for _ in range(100):
            w = 3.0 * rng.standard_normal(obj.shape)
            grad_sq = float(np.sum(obj.gradient(w) ** 2))
            bound = 2.0 * obj.pl_mu * (obj.value(w) - f_star)
            assert grad_sq >= bound - 1e-9 * max(abs(bound), 1.0)

    @pytest.mark.parametrize("fixture", OBJECTIVES)
    def test_gradient_step_descent(self, fixture, request, rng):
        obj = request.getfixturevalue(fixture)
        for _ in range(100):
            w = 3.0 * rng.standard_normal(obj.shape)
            f, grad = obj.value(w), obj.gradient(w)
            stepped = obj.value(w - grad / obj.smoothness_l)
            decrease = float(np.sum(grad**2)) / (2.0 * obj.smoothness_l)
            assert stepped <= f - decrease + 1e-9 * max(abs(f), 1.0)

    @pytest.mark.parametrize("fixture", ["small_linreg", "small_logreg"])
    def test_sample_values_average_to_value(self, fixture, request, rng):
        obj = request.getfixturevalue(fixture)
        summands = [obj.sample_objective(i) for i in range(obj.sample_count)]
        for _ in range(10):
            w = rng.standard_normal(obj.shape)
            values = [summand.value(w) for summand in summands]
            assert np.mean(values) == pytest.approx(obj.value(w), rel=1e-12)


class TestSampleVariance:
    def test_two_samples(self):
        x = [[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0]]
        obj = linreg(x, [1.0, -1.0], 0.0, (2, 2))
        # per-sample gradients at zero are (-2, 0, 0, 0) and (0, 2, 0, 0)
        assert sample_variance(obj, np.zeros((2, 2))) == pytest.approx(2.0)

    def test_duplicate_samples(self, rng):
        x = np.tile(rng.standard_normal(4), (2, 1))
        obj = linreg(x, np.full(2, 0.5), 0.1, (2, 2))
        assert sample_variance(obj, rng.standard_normal((2, 2))) == 0.0

    def test_matches_definition(self, small_linreg, rng):
        w = rng.standard_normal(small_linreg.shape)
        grad = small_linreg.gradient(w)
        spread = [
            np.sum((small_linreg.sample_gradient(w, i) - grad) ** 2)
            for i in range(small_linreg.sample_count)
        ]
        assert sample_variance(small_linreg, w) == pytest.approx(np.mean(spread))


class TestLinearRegression:
    def test_minimizer_is_stationary(self, small_linreg):
        w_star = small_linreg.minimizer()
        np.testing.assert_allclose(small_linreg.gradient(w_star), 0.0, atol=1e-10)
        assert small_linreg.optimum_value == pytest.approx(small_linreg.value(w_star))

    def test_constants_bracket_curvature(self, small_linreg):
        n, x = small_linreg.sample_count, small_linreg.x
        hessian = 2.0 * x.T @ x / n + 2.0 * small_linreg.reg_lambda * np.eye(6)
        eigs = np.linalg.eigvalsh(hessian)
        assert small_linreg.smoothness_l == pytest.approx(eigs[-1])
        assert small_linreg.pl_mu == pytest.approx(eigs[0])

    def test_sample_objectives_average_to_objective(self, small_linreg, rng):
        w = rng.standard_normal(small_linreg.shape)
        values = [
            small_linreg.sample_objective(i).value(w)
            for i in range(small_linreg.sample_count)
        ]
        assert np.mean(values) == pytest.approx(small_linreg.value(w))

    def test_mismatched_targets(self):
        with pytest.raises(InvalidSpec):
            linreg(np.ones((3, 4)), np.ones(2), 0.0, (2, 2))

    def test_sample_infima_below_objective_infimum_on_average(self, small_linreg):
        infima = sample_infima(small_linreg)
        assert infima.shape == (small_linreg.sample_count,)
        assert small_linreg.optimum_value - infima.mean() >= -1e-12


class TestLogisticRegression:
    def test_labels_validated(self):
        spec = RegressionSpec(
            x=np.ones((2, 4)), y=np.array([0.0, 1.0]), reg_lambda=0.1, shape=(2, 2)
        )
        with pytest.raises(InvalidSpec):
            LogisticRegressionObjective(spec)

    def test_constants(self, small_logreg):
        assert small_logreg.pl_mu == pytest.approx(0.2)
        assert small_logreg.optimum_value is None
        assert small_logreg.smoothness_l > small_logreg.pl_mu

    def test_numeric_infimum(self, small_logreg):
        f_star = infimum(small_logreg, tol=1e-9)
        assert f_star <= small_logreg.value(small_logreg.zeros())
        assert 0.0 < f_star

    def test_value_is_stable_for_large_margins(self):
        spec = RegressionSpec(
            x=np.array([[1000.0, 0.0]]),
            y=np.array([-1.0]),
            reg_lambda=0.0,
            shape=(1, 2),
        )
        obj = LogisticRegressionObjective(spec)
        w = np.array([[1.0, 0.0]])
        assert obj.value(w) == pytest.approx(1000.0)
        np.testing.assert_allclose(obj.gradient(w), [[1000.0, 0.0]])


class TestSyntheticData:
    def test_linear_regression_shapes_and_determinism(self):
        pre, fine, w0 = synthetic_linear_regression(
            np.random.default_rng(0), 300, 100, (4, 5)
        )
        assert pre.x.shape == (300, 20)
        assert fine.x.shape == (100, 20)
        assert w0.shape == (4, 5)
        assert fine.reg_lambda == 1e-4
        _, fine_again, w0_again = synthetic_linear_regression(
            np.random.default_rng(0), 300, 100, (4, 5)
        )
        np.testing.assert_array_equal(fine.y, fine_again.y)
        np.testing.assert_array_equal(w0, w0_again)

    def test_logistic_labels(self):
        spec = synthetic_logistic_regression(np.random.default_rng(0), 200, (2, 5))
        assert spec.x.shape == (200, 10)
        assert set(np.unique(spec.y)) == {-1.0, 1.0}
        assert spec.reg_lambda == 0.1

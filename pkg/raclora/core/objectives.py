"""Finite-sum convex objectives over a matrix parameter W.

Conventions: losses are averaged over samples (1/N) and the ridge term is
``reg_lambda * ||w||^2`` without a 1/2. Vectors are reshaped into W row-major.
"""
import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from ..errors import InvalidSpec, Unsupported
from .linalg import as_matrix, frobenius_norm_sq, sym_eig_extremes, unvec, vec

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class QuadraticSpec:
    """f(x) = x^T M x + b^T x with x = vec(W)."""

    m: np.ndarray
    b: np.ndarray
    shape: Tuple[int, int]


@dataclass(frozen=True)
class RegressionSpec:
    x: np.ndarray
    y: np.ndarray
    reg_lambda: float
    shape: Tuple[int, int]


class Objective(ABC):
    """A differentiable finite-sum loss f(W) = (1/N) sum_i f_i(W)."""

    def __init__(
        self,
        shape: Tuple[int, int],
        sample_count: int,
        smoothness_l: Optional[float] = None,
        pl_mu: Optional[float] = None,
        optimum_value: Optional[float] = None,
        kind: str = "objective",
    ):
        self.param_rows, self.param_cols = int(shape[0]), int(shape[1])
        self.sample_count = int(sample_count)
        self.smoothness_l = smoothness_l
        self.pl_mu = pl_mu
        self.optimum_value = optimum_value
        self.kind = kind

    @property
    def shape(self) -> Tuple[int, int]:
        return (self.param_rows, self.param_cols)

    @property
    def dim(self) -> int:
        return self.param_rows * self.param_cols

    def zeros(self) -> np.ndarray:
        return np.zeros(self.shape)

    @abstractmethod
    def value(self, w: np.ndarray) -> float:
        ...

    @abstractmethod
    def gradient(self, w: np.ndarray) -> np.ndarray:
        ...

    @abstractmethod
    def sample_gradient(self, w: np.ndarray, i: int) -> np.ndarray:
        ...

    def sample_gradients(self, w: np.ndarray) -> np.ndarray:
        """All per-sample gradients stacked into an (N, rows, cols) array."""
        return np.stack([self.sample_gradient(w, i) for i in range(self.sample_count)])

    @abstractmethod
    def sample_smoothness(self, i: int) -> float:
        """Lipschitz constant of the gradient of f_i."""

    @abstractmethod
    def sample_objective(self, i: int) -> "Objective":
        """The one-sample objective f_i as an Objective of the same family."""

    def max_sample_smoothness(self) -> float:
        return max(self.sample_smoothness(i) for i in range(self.sample_count))

    def gap(self, w: np.ndarray) -> Optional[float]:
        if self.optimum_value is None:
            return None
        return self.value(w) - self.optimum_value

    def _check_index(self, i: int) -> None:
        if not 0 <= i < self.sample_count:
            raise IndexError(f"Sample index {i} outside [0, {self.sample_count})")


class QuadraticObjective(Objective):
    def __init__(self, spec: QuadraticSpec):
        m = as_matrix(spec.m, "M")
        b = np.asarray(spec.b, dtype=np.float64).reshape(-1)
        d = m.shape[0]
        if m.shape != (d, d) or b.size != d:
            raise InvalidSpec(f"M must be {d}x{d} and b of length {d}")
        if spec.shape[0] * spec.shape[1] != d:
            raise InvalidSpec(f"Reshape {spec.shape} does not hold {d} entries")
        if np.linalg.norm(m - m.T) > 1e-10 * max(1.0, np.linalg.norm(m)):
            raise InvalidSpec("M must be symmetric")
        lam_min, lam_max = sym_eig_extremes(m)
        if lam_min <= 0:
            raise InvalidSpec(f"M must be positive definite (lambda_min = {lam_min})")
        self.m = m
        self.b = b
        self.x_star = -0.5 * np.linalg.solve(m, b)
        super().__init__(
            shape=spec.shape,
            sample_count=1,
            smoothness_l=2.0 * lam_max,
            pl_mu=2.0 * lam_min,
            optimum_value=float(-0.25 * b @ np.linalg.solve(m, b)),
            kind="quadratic",
        )

    def value(self, w):
        x = vec(w)
        return float(x @ self.m @ x + self.b @ x)

    def gradient(self, w):
        return unvec(2.0 * self.m @ vec(w) + self.b, self.shape)

    def sample_gradient(self, w, i):
        self._check_index(i)
        return self.gradient(w)

    def sample_smoothness(self, i):
        self._check_index(i)
        return self.smoothness_l

    def sample_objective(self, i):
        self._check_index(i)
        return self

    def minimizer(self) -> np.ndarray:
        return unvec(self.x_star, self.shape)


class _RegressionObjective(Objective):
    def __init__(self, spec: RegressionSpec, kind: str):
        x = as_matrix(spec.x, "X")
        y = np.asarray(spec.y, dtype=np.float64).reshape(-1)
        n, d = x.shape
        if y.size != n:
            raise InvalidSpec(f"X has {n} rows but y has {y.size} entries")
        if spec.shape[0] * spec.shape[1] != d:
            raise InvalidSpec(f"Reshape {spec.shape} does not hold {d} features")
        if spec.reg_lambda < 0:
            raise InvalidSpec(f"reg_lambda must be >= 0, got {spec.reg_lambda}")
        self.x = x
        self.y = y
        self.reg_lambda = float(spec.reg_lambda)
        self.spec = spec
        s = np.linalg.svd(x, compute_uv=False)
        # extreme eigenvalues of X^T X (zero when N < d)
        self._gram_max = float(s[0] ** 2)
        self._gram_min = float(s[-1] ** 2) if n >= d else 0.0
        super().__init__(shape=spec.shape, sample_count=n, kind=kind)

    def sample_objective(self, i):
        self._check_index(i)
        sub = RegressionSpec(
            x=self.x[i : i + 1], y=self.y[i : i + 1], reg_lambda=self.reg_lambda, shape=self.shape
        )
        return type(self)(sub)


class LinearRegressionObjective(_RegressionObjective):
    """(1/N)||X w - y||^2 + lambda ||w||^2."""

    def __init__(self, spec: RegressionSpec):
        super().__init__(spec, kind="linreg")
        n = self.sample_count
        self.smoothness_l = 2.0 * self._gram_max / n + 2.0 * self.reg_lambda
        mu = 2.0 * self._gram_min / n + 2.0 * self.reg_lambda
        self.pl_mu = mu if mu > 0 else None
        self.w_star = self._solve_normal_equations()
        self.optimum_value = self.value(unvec(self.w_star, self.shape))

    def _solve_normal_equations(self) -> np.ndarray:
        n, d = self.x.shape
        lhs = self.x.T @ self.x / n + self.reg_lambda * np.eye(d)
        rhs = self.x.T @ self.y / n
        return np.linalg.lstsq(lhs, rhs, rcond=None)[0]

    def minimizer(self) -> np.ndarray:
        return unvec(self.w_star, self.shape)

    def value(self, w):
        x = vec(w)
        r = self.x @ x - self.y
        return float(r @ r / self.sample_count + self.reg_lambda * (x @ x))

    def gradient(self, w):
        x = vec(w)
        r = self.x @ x - self.y
        g = 2.0 * self.x.T @ r / self.sample_count + 2.0 * self.reg_lambda * x
        return unvec(g, self.shape)

    def sample_gradient(self, w, i):
        self._check_index(i)
        x = vec(w)
        xi = self.x[i]
        g = 2.0 * xi * (xi @ x - self.y[i]) + 2.0 * self.reg_lambda * x
        return unvec(g, self.shape)

    def sample_gradients(self, w):
        x = vec(w)
        r = self.x @ x - self.y
        g = 2.0 * self.x * r[:, None] + 2.0 * self.reg_lambda * x[None, :]
        return g.reshape(self.sample_count, *self.shape)

    def sample_smoothness(self, i):
        self._check_index(i)
        xi = self.x[i]
        return 2.0 * float(xi @ xi) + 2.0 * self.reg_lambda


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


class LogisticRegressionObjective(_RegressionObjective):
    """(1/N) sum log(1 + exp(-y_i x_i^T w)) + lambda ||w||^2 with labels in {-1, +1}."""

    def __init__(self, spec: RegressionSpec):
        labels = np.asarray(spec.y, dtype=np.float64).reshape(-1)
        if not np.all(np.isin(labels, (-1.0, 1.0))):
            raise InvalidSpec("Logistic labels must be -1 or +1")
        super().__init__(spec, kind="logreg")
        n = self.sample_count
        self.smoothness_l = self._gram_max / (4.0 * n) + 2.0 * self.reg_lambda
        self.pl_mu = 2.0 * self.reg_lambda if self.reg_lambda > 0 else None

    def _margins(self, x: np.ndarray) -> np.ndarray:
        return self.y * (self.x @ x)

    def value(self, w):
        x = vec(w)
        loss = np.logaddexp(0.0, -self._margins(x)).mean()
        return float(loss + self.reg_lambda * (x @ x))

    def gradient(self, w):
        x = vec(w)
        coef = -self.y * _sigmoid(-self._margins(x))
        g = self.x.T @ coef / self.sample_count + 2.0 * self.reg_lambda * x
        return unvec(g, self.shape)

    def sample_gradient(self, w, i):
        self._check_index(i)
        x = vec(w)
        xi = self.x[i]
        coef = -self.y[i] * _sigmoid(-self.y[i] * (xi @ x))
        return unvec(coef * xi + 2.0 * self.reg_lambda * x, self.shape)

    def sample_gradients(self, w):
        x = vec(w)
        coef = -self.y * _sigmoid(-self._margins(x))
        g = self.x * coef[:, None] + 2.0 * self.reg_lambda * x[None, :]
        return g.reshape(self.sample_count, *self.shape)

    def sample_smoothness(self, i):
        self._check_index(i)
        xi = self.x[i]
        return 0.25 * float(xi @ xi) + 2.0 * self.reg_lambda


def make_quadratic(spec: QuadraticSpec) -> QuadraticObjective:
    return QuadraticObjective(spec)


def make_linear_regression(spec: RegressionSpec) -> LinearRegressionObjective:
    return LinearRegressionObjective(spec)


def make_logistic_regression(spec: RegressionSpec) -> LogisticRegressionObjective:
    return LogisticRegressionObjective(spec)


def counterexample_spec(d: int = 9, shape: Tuple[int, int] = (3, 3)) -> QuadraticSpec:
    """M = Diag(10, 1, ..., 1), b = 1, represented as a 3x3 matrix."""
    diag = np.ones(d)
    diag[0] = 10.0
    return QuadraticSpec(m=np.diag(diag), b=np.ones(d), shape=shape)


def sample_variance(obj: Objective, w: np.ndarray) -> float:
    """(1/N) sum_i ||grad f_i(W) - grad f(W)||_F^2."""
    if obj.sample_count == 1:
        return 0.0
    grads = obj.sample_gradients(w)
    centered = grads - grads.mean(axis=0)
    return float(np.sum(centered * centered) / obj.sample_count)


def finite_difference_gradient(obj: Objective, w: np.ndarray, step: float = 1e-6) -> np.ndarray:
    """Central finite differences of ``obj.value``."""
    w = np.array(w, dtype=np.float64)
    grad = np.zeros_like(w)
    for idx in np.ndindex(*w.shape):
        orig = w[idx]
        w[idx] = orig + step
        f_plus = obj.value(w)
        w[idx] = orig - step
        f_minus = obj.value(w)
        w[idx] = orig
        grad[idx] = (f_plus - f_minus) / (2.0 * step)
    return grad


def infimum(obj: Objective, tol: float = 1e-9, max_iter: int = 200_000) -> float:
    """Closed-form optimum when known, otherwise gradient descent with step 1/L."""
    if obj.optimum_value is not None:
        return obj.optimum_value
    if obj.smoothness_l is None or obj.pl_mu is None:
        raise Unsupported(f"Cannot minimize {obj.kind} objective without L and mu")
    w = obj.zeros()
    step = 1.0 / obj.smoothness_l
    for it in range(max_iter):
        g = obj.gradient(w)
        if frobenius_norm_sq(g) <= tol * tol:
            logger.debug(f"Numeric infimum of {obj.kind} reached in {it} iterations")
            return obj.value(w)
        w = w - step * g
    raise Unsupported(f"Gradient descent did not reach ||grad|| <= {tol} in {max_iter} steps")


def sample_infima(obj: Objective, tol: float = 1e-9) -> np.ndarray:
    """f_i^* for every summand."""
    if obj.sample_count == 1:
        return np.array([infimum(obj, tol)])
    return np.array([infimum(obj.sample_objective(i), tol) for i in range(obj.sample_count)])


def synthetic_linear_regression(
    rng: np.random.Generator,
    n_pretrain: int = 3000,
    n_finetune: int = 1000,
    shape: Tuple[int, int] = (10, 10),
    reg_lambda: float = 1e-4,
    noise: float = 0.01,
    shift: float = 0.5,
) -> Tuple[RegressionSpec, RegressionSpec, np.ndarray]:
    """Pre-training and fine-tuning regression tasks plus the pre-trained W^0.

    Features are standard Gaussian, targets ``X w_true + noise * eps``. The
    fine-tuning task uses ``w_true + shift * delta`` and W^0 is the ridge
    solution on the pre-training set.
    """
    d = shape[0] * shape[1]
    w_true = rng.standard_normal(d)
    x_pre = rng.standard_normal((n_pretrain, d))
    y_pre = x_pre @ w_true + noise * rng.standard_normal(n_pretrain)
    w_fine = w_true + shift * rng.standard_normal(d)
    x_fine = rng.standard_normal((n_finetune, d))
    y_fine = x_fine @ w_fine + noise * rng.standard_normal(n_finetune)
    pre = RegressionSpec(x=x_pre, y=y_pre, reg_lambda=reg_lambda, shape=shape)
    fine = RegressionSpec(x=x_fine, y=y_fine, reg_lambda=reg_lambda, shape=shape)
    w0 = LinearRegressionObjective(pre).minimizer()
    return pre, fine, w0


def synthetic_logistic_regression(
    rng: np.random.Generator,
    n_samples: int = 2000,
    shape: Tuple[int, int] = (10, 10),
    reg_lambda: float = 0.1,
) -> RegressionSpec:
    """Labels sign(X w_true + eps) with Gaussian features and ground truth."""
    d = shape[0] * shape[1]
    w_true = rng.standard_normal(d)
    x = rng.standard_normal((n_samples, d))
    y = np.where(x @ w_true + rng.standard_normal(n_samples) >= 0.0, 1.0, -1.0)
    return RegressionSpec(x=x, y=y, reg_lambda=reg_lambda, shape=shape)

import numpy as np
import pytest

from raclora.core.objectives import (
    LinearRegressionObjective,
    LogisticRegressionObjective,
    QuadraticObjective,
    RegressionSpec,
    counterexample_spec,
)
from raclora.core.sketch import SketchSpec

COUNTEREXAMPLE_F_STAR = -2.025


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def counterexample():
    return QuadraticObjective(counterexample_spec())


@pytest.fixture
def rank_one_left():
    """Rank-1 Left sketch on the 3x3 counterexample parameter."""
    return SketchSpec(side="left", rank=1, target_rows=3, target_cols=3)


@pytest.fixture
def small_linreg():
    rng = np.random.default_rng(7)
    x = rng.standard_normal((40, 6))
    y = x @ rng.standard_normal(6) + 0.1 * rng.standard_normal(40)
    spec = RegressionSpec(x=x, y=y, reg_lambda=1e-2, shape=(2, 3))
    return LinearRegressionObjective(spec)


@pytest.fixture
def small_logreg():
    rng = np.random.default_rng(11)
    x = rng.standard_normal((60, 6))
    scores = x @ rng.standard_normal(6) + 0.3 * rng.standard_normal(60)
    y = np.where(scores >= 0, 1.0, -1.0)
    spec = RegressionSpec(x=x, y=y, reg_lambda=0.1, shape=(3, 2))
    return LogisticRegressionObjective(spec)


@pytest.fixture
def clean_env(monkeypatch, tmp_path):
    """No seed override and outputs under the test's temporary directory."""
    monkeypatch.delenv("RACLORA_SEED", raising=False)
    monkeypatch.delenv("RACLORA_LOG_LEVEL", raising=False)
    monkeypatch.setenv("RACLORA_OUTPUT_DIR", str(tmp_path / "output"))
    return tmp_path

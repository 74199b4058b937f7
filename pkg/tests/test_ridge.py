"""Closed-form ridge regression tests."""

from __future__ import annotations

import numpy as np
import pytest

from neurodecode import ridge
from neurodecode.core.rng import Rng
from neurodecode.ridge import RidgeModel
from neurodecode.utils.errors import ConfigError, DimensionError, SolverError


def _direct(x: np.ndarray, y: np.ndarray, alpha: float) -> np.ndarray:
    xc = x - x.mean(axis=0)
    yc = y - y.mean(axis=0)
    weights = np.linalg.solve(xc.T @ xc + alpha * np.eye(x.shape[1]), xc.T @ yc)
    return weights


@pytest.mark.parametrize(("n", "v"), [(40, 6), (8, 30)])
def test_primal_and_dual_match_the_normal_equations(n: int, v: int, rng: Rng) -> None:
    """Both solver paths reproduce the textbook ridge weights."""
    x = rng.derive("x").normal(size=(n, v))
    y = rng.derive("y").normal(size=(n, 4))
    model = ridge.fit(x, y, alpha=2.5)
    assert model.solver.startswith("primal" if v <= n else "dual")
    assert np.allclose(model.weights, _direct(x, y, 2.5), atol=1e-10)
    query = rng.derive("query").normal(size=(3, v))
    assert np.allclose(model.predict_matrix(query), query @ model.weights + model.bias)


def test_zero_alpha_is_ordinary_least_squares(rng: Rng) -> None:
    """alpha=0 on a full-rank design recovers an exact linear map with intercept."""
    x = rng.normal(size=(30, 5))
    w = rng.derive("w").normal(size=(5, 3))
    model = ridge.fit(x, x @ w + 1.5, alpha=0.0)
    assert model.solver == "primal-eigh"
    assert np.allclose(model.weights, w)
    assert np.allclose(model.bias, 1.5)


def test_zero_alpha_on_a_rank_deficient_design_fails(rng: Rng) -> None:
    """A duplicated column with no penalty is a singular system."""
    x = rng.normal(size=(20, 3))
    x = np.hstack([x, x[:, :1]])
    with pytest.raises(SolverError) as info:
        ridge.fit(x, rng.normal(size=(20, 2)), alpha=0.0)
    assert info.value.deficient_columns == 1


def test_fit_validates_inputs(rng: Rng) -> None:
    """Negative penalties, single samples and bad layouts are rejected."""
    x = rng.normal(size=(5, 3))
    with pytest.raises(ConfigError):
        ridge.fit(x, np.ones((5, 2)), alpha=-1.0)
    with pytest.raises(ConfigError):
        ridge.fit(x[:1], np.ones((1, 2)), alpha=1.0)
    with pytest.raises(DimensionError):
        ridge.fit(x, np.ones((4, 2)), alpha=1.0)
    with pytest.raises(DimensionError):
        ridge.fit(x, np.ones((5, 6)), alpha=1.0, rows=4, dim=2)


def test_row_layout_predictions_are_unit_norm(rng: Rng) -> None:
    """Targets [N, rows, dim] come back as unit-norm rows."""
    x = rng.normal(size=(12, 7))
    y = rng.derive("y").normal(size=(12, 3, 4))
    model = ridge.fit(x, y, alpha=1.0)
    assert (model.rows, model.dim) == (3, 4)
    single = ridge.predict(model, x[0])
    assert single.shape == (3, 4)
    assert np.allclose(np.linalg.norm(single, axis=-1), 1.0)
    raw = ridge.predict_batch(model, x[:2], normalize=False)
    assert raw.shape == (2, 3, 4)
    assert np.allclose(raw[0] / np.linalg.norm(raw[0], axis=-1, keepdims=True), single)
    with pytest.raises(DimensionError):
        ridge.predict(model, x[:2])


def test_persisted_model_predicts_identically(rng: Rng) -> None:
    """to_arrays plus meta rebuild a model with the same predictions."""
    x = rng.normal(size=(6, 10))
    y = rng.derive("y").normal(size=(6, 2, 3))
    model = ridge.fit(x, y, alpha=0.5)
    restored = RidgeModel.from_arrays(model.to_arrays(), model.meta())
    assert restored.solver == model.solver
    assert np.array_equal(ridge.predict_batch(restored, x), ridge.predict_batch(model, x))


def test_shrinkage_grows_with_alpha(rng: Rng) -> None:
    """Weight and fitted-value norms never increase as alpha goes from 1 to 1e6."""
    x = rng.derive("x").normal(size=(40, 6))
    y = x @ rng.derive("w").normal(size=(6, 3)) + rng.derive("noise").normal(size=(40, 3))
    weight_norms, fitted_norms = [], []
    for alpha in np.logspace(0, 6, 13):
        model = ridge.fit(x, y, alpha)
        weight_norms.append(np.linalg.norm(model.weights))
        fitted_norms.append(np.linalg.norm(model.predict_matrix(x) - y.mean(axis=0)))
    assert np.all(np.diff(weight_norms) <= 1e-12)
    assert np.all(np.diff(fitted_norms) <= 1e-12)
    assert fitted_norms[-1] < 0.01 * fitted_norms[0]

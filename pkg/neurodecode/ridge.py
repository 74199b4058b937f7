"""Closed-form multi-output ridge regression from betas to embeddings."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve, eigh

from neurodecode.utils.errors import ConfigError, DimensionError, SolverError

logger = logging.getLogger(__name__)

RANK_TOL = 1e-10


@dataclass
class RidgeModel:
    """Fitted ridge map on centred data.

    Exactly one of ``primal_weights`` (``[V, D]``) and ``dual_coef``
    (``[N, D]`` together with the centred training design) is set. Targets
    are flattened ``rows × dim`` blocks in row-major order when ``rows`` is
    given, so a prediction reshapes back to ``[rows, dim]``.
    """

    alpha: float
    x_mean: np.ndarray
    y_mean: np.ndarray
    solver: str
    primal_weights: np.ndarray | None = None
    dual_coef: np.ndarray | None = None
    train_x: np.ndarray | None = None
    rows: int | None = None
    dim: int | None = None

    @property
    def n_inputs(self) -> int:
        """Return the beta length V."""
        return self.x_mean.shape[0]

    @property
    def n_outputs(self) -> int:
        """Return the flattened target length."""
        return self.y_mean.shape[0]

    @property
    def weights(self) -> np.ndarray:
        """Return ``W[V, D]``, materializing it from the dual form on demand."""
        if self.primal_weights is not None:
            return self.primal_weights
        return self.train_x.T @ self.dual_coef

    @property
    def bias(self) -> np.ndarray:
        """Return the intercept that restores the target means."""
        return self.y_mean - self.x_mean @ self.weights

    def predict_matrix(self, x: np.ndarray) -> np.ndarray:
        """Predict flattened targets for ``x[M, V]``."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if x.shape[1] != self.n_inputs:
            raise DimensionError(f"ridge model expects {self.n_inputs} inputs, got {x.shape[1]}")
        centred = x - self.x_mean
        if self.primal_weights is not None:
            return centred @ self.primal_weights + self.y_mean
        return (centred @ self.train_x.T) @ self.dual_coef + self.y_mean

    def to_arrays(self) -> dict[str, np.ndarray]:
        """Return the arrays needed to persist the model."""
        arrays = {"x_mean": self.x_mean, "y_mean": self.y_mean}
        if self.primal_weights is not None:
            arrays["primal_weights"] = self.primal_weights
        else:
            arrays["dual_coef"] = self.dual_coef
            arrays["train_x"] = self.train_x
        return arrays

    def meta(self) -> dict[str, object]:
        """Return the JSON sidecar describing the model."""
        return {
            "alpha": self.alpha,
            "solver": self.solver,
            "n_inputs": self.n_inputs,
            "n_outputs": self.n_outputs,
            "rows": self.rows,
            "dim": self.dim,
        }

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray], meta: dict[str, object]) -> RidgeModel:
        """Rebuild a model from :meth:`to_arrays` and :meth:`meta` output."""
        return cls(
            alpha=float(meta["alpha"]),
            x_mean=arrays["x_mean"],
            y_mean=arrays["y_mean"],
            solver=str(meta["solver"]),
            primal_weights=arrays.get("primal_weights"),
            dual_coef=arrays.get("dual_coef"),
            train_x=arrays.get("train_x"),
            rows=meta.get("rows"),
            dim=meta.get("dim"),
        )


def _solve_gram(gram: np.ndarray, rhs: np.ndarray, alpha: float) -> tuple[np.ndarray, str]:
    """Solve ``(gram + alpha I) Z = rhs`` for a symmetric PSD ``gram``."""
    size = gram.shape[0]
    if alpha > 0:
        try:
            factor = cho_factor(gram + alpha * np.eye(size), lower=True, check_finite=False)
            return cho_solve(factor, rhs, check_finite=False), "cholesky"
        except LinAlgError:
            logger.warning("Cholesky failed at alpha=%s; falling back to eigh", alpha)
    evals, evecs = eigh(gram, check_finite=False)
    shifted = evals + alpha
    cutoff = RANK_TOL * max(float(np.abs(evals).max(initial=0.0)), 1.0)
    deficient = int(np.sum(np.abs(shifted) <= cutoff))
    if deficient:
        raise SolverError(
            f"ridge system is singular at alpha={alpha}", deficient_columns=deficient
        )
    return evecs @ ((evecs.T @ rhs) / shifted[:, None]), "eigh"


def fit(
    x: np.ndarray,
    y: np.ndarray,
    alpha: float,
    rows: int | None = None,
    dim: int | None = None,
) -> RidgeModel:
    """Fit ``W = (XcᵀXc + αI)⁻¹ XcᵀYc`` on centred data.

    The primal system is solved when ``V <= N``; otherwise the dual
    ``(XcXcᵀ + αI)`` system is solved and only dual coefficients are stored.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if y.ndim == 3:
        rows, dim = y.shape[1], y.shape[2]
        y = y.reshape(y.shape[0], -1)
    if x.ndim != 2 or y.ndim != 2 or x.shape[0] != y.shape[0]:
        raise DimensionError(f"ridge fit expects X[N, V] and Y[N, D], got {x.shape}, {y.shape}")
    if x.shape[0] < 2:
        raise ConfigError("ridge fit needs at least 2 samples")
    if alpha < 0:
        raise ConfigError(f"ridge alpha must be non-negative, got {alpha}")
    if rows is not None and dim is not None and rows * dim != y.shape[1]:
        raise DimensionError(f"target layout {rows}x{dim} does not match {y.shape[1]} columns")
    x_mean = x.mean(axis=0)
    y_mean = y.mean(axis=0)
    xc = x - x_mean
    yc = y - y_mean
    n, v = xc.shape
    if v <= n:
        weights, method = _solve_gram(xc.T @ xc, xc.T @ yc, alpha)
        model = RidgeModel(alpha, x_mean, y_mean, f"primal-{method}", primal_weights=weights)
    else:
        coef, method = _solve_gram(xc @ xc.T, yc, alpha)
        model = RidgeModel(alpha, x_mean, y_mean, f"dual-{method}", dual_coef=coef, train_x=xc)
    model.rows, model.dim = rows, dim
    logger.debug("ridge fit N=%s V=%s D=%s alpha=%s via %s", n, v, y.shape[1], alpha, model.solver)
    return model


def _normalize_rows(values: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(values, axis=-1, keepdims=True)
    return values / np.maximum(norms, 1e-12)


def predict(model: RidgeModel, beta: np.ndarray, normalize: bool = True) -> np.ndarray:
    """Predict one embedding from ``beta[V]``.

    With a ``rows × dim`` layout the result is ``[rows, dim]`` and, when
    ``normalize`` is set, every row has unit L2 norm.
    """
    beta = np.asarray(beta, dtype=np.float64)
    if beta.ndim != 1:
        raise DimensionError(f"predict expects a 1-D beta vector, got shape {beta.shape}")
    return predict_batch(model, beta[None, :], normalize=normalize)[0]


def predict_batch(model: RidgeModel, betas: np.ndarray, normalize: bool = True) -> np.ndarray:
    """Predict embeddings for ``betas[M, V]``."""
    flat = model.predict_matrix(betas)
    if model.rows is None or model.dim is None:
        return flat
    shaped = flat.reshape(flat.shape[0], model.rows, model.dim)
    return _normalize_rows(shaped) if normalize else shaped

"""Finite-difference verification of tape gradients."""

from __future__ import annotations

import logging
from collections.abc import Callable, Sequence

import numpy as np
from pydantic import BaseModel, Field

from neurodecode.core.nn import Module
from neurodecode.core.rng import Rng
from neurodecode.core.tensor import Tensor
from neurodecode.utils.errors import ConfigError, NumericError

logger = logging.getLogger(__name__)


class ParameterCheck(BaseModel):
    """Agreement between tape and finite-difference gradients for one parameter."""

    name: str
    entries_checked: int
    rel_error: float
    passed: bool


class GradCheckReport(BaseModel):
    """Outcome of a gradient check across a parameter list."""

    h: float
    tol: float
    checks: list[ParameterCheck] = Field(default_factory=list)

    @property
    def max_rel_error(self) -> float:
        """Return the worst relative error over all parameters."""
        return max((check.rel_error for check in self.checks), default=0.0)

    @property
    def passed(self) -> bool:
        """Return True when every parameter is within tolerance."""
        return all(check.passed for check in self.checks)


def _evaluate(f: Callable[[], Tensor]) -> float:
    value = f()
    scalar = value.item() if isinstance(value, Tensor) else float(value)
    if not np.isfinite(scalar):
        raise NumericError("grad_check objective returned a non-finite value")
    return scalar


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-5,
    tol: float = 1e-4,
    max_entries: int | None = None,
    rng: Rng | None = None,
) -> GradCheckReport:
    """Compare the tape gradient of ``f`` with central differences.

    ``f`` must rebuild the graph on every call and be deterministic. When a
    parameter has more than ``max_entries`` scalars, a seeded subset of its
    entries is perturbed and compared.
    """
    if h <= 0:
        raise ConfigError(f"finite-difference step must be positive, got {h}")
    for param in params:
        param.grad = None
    loss = f()
    if not np.isfinite(loss.item()):
        raise NumericError("grad_check objective returned a non-finite value")
    loss.backward()
    picker = rng or Rng(0, ("grad_check",))
    report = GradCheckReport(h=h, tol=tol)
    for index, param in enumerate(params):
        name = param.name or f"param{index}"
        tape = np.zeros_like(param.data) if param.grad is None else param.grad.copy()
        param.data = np.ascontiguousarray(param.data)
        flat = param.data.reshape(-1)
        positions = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            positions = np.sort(picker.derive(name).permutation(flat.size)[:max_entries])
        numeric = np.zeros(positions.size)
        for slot, pos in enumerate(positions):
            original = flat[pos]
            flat[pos] = original + h
            plus = _evaluate(f)
            flat[pos] = original - h
            minus = _evaluate(f)
            flat[pos] = original
            numeric[slot] = (plus - minus) / (2 * h)
        analytic = tape.reshape(-1)[positions]
        scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
        rel = float(np.linalg.norm(analytic - numeric) / scale)
        report.checks.append(
            ParameterCheck(
                name=name, entries_checked=int(positions.size), rel_error=rel, passed=rel <= tol
            )
        )
    logger.debug("grad_check max relative error %.3e", report.max_rel_error)
    return report


def grad_check_module(
    f: Callable[[], Tensor],
    module: Module,
    h: float = 1e-5,
    tol: float = 1e-4,
    max_entries: int | None = None,
) -> GradCheckReport:
    """Run :func:`grad_check` over every parameter of ``module``, labelled by path."""
    params = []
    for name, param in module.named_parameters():
        param.name = name
        params.append(param)
    return grad_check(f, params, h=h, tol=tol, max_entries=max_entries)

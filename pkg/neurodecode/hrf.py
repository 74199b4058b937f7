"""Hemodynamic response library and polynomial drift bases."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial import legendre
from scipy.linalg import qr
from scipy.stats import gamma

from neurodecode.utils.errors import ConfigError

PEAK_TIMES = (4.0, 5.0, 6.0, 7.0, 8.0)
UNDERSHOOT_RATIOS = (1 / 6, 1 / 4, 1 / 3, 1 / 2)
KERNEL_SECONDS = 32.0
UNDERSHOOT_DELAY = 10.0
MAX_POLY_DEGREE = 4


def double_gamma(
    tr: float, peak: float, ratio: float, length_s: float = KERNEL_SECONDS
) -> np.ndarray:
    """Sample a double-gamma HRF at ``tr`` and scale it to unit peak.

    The response density has its mode at ``peak`` seconds; the undershoot
    density peaks ``UNDERSHOOT_DELAY`` seconds later and is weighted by
    ``ratio``.
    """
    if tr <= 0:
        raise ConfigError(f"TR must be positive, got {tr}")
    t = np.arange(int(round(length_s / tr))) * tr
    curve = gamma.pdf(t, peak + 1.0) - ratio * gamma.pdf(t, peak + 1.0 + UNDERSHOOT_DELAY)
    return curve / curve.max()


@dataclass
class HrfLibrary:
    """Twenty candidate kernels over a peak-time × undershoot-ratio grid.

    Kernel ``i`` uses ``PEAK_TIMES[i // 4]`` and ``UNDERSHOOT_RATIOS[i % 4]``.
    """

    tr: float
    kernels: np.ndarray = field(init=False)
    params: list[tuple[float, float]] = field(init=False)

    def __post_init__(self) -> None:
        self.params = [(peak, ratio) for peak in PEAK_TIMES for ratio in UNDERSHOOT_RATIOS]
        self.kernels = np.stack([double_gamma(self.tr, p, r) for p, r in self.params])

    def __len__(self) -> int:
        return self.kernels.shape[0]

    @property
    def length(self) -> int:
        """Return the kernel length in samples."""
        return self.kernels.shape[1]

    def convolve(self, index: int, events: np.ndarray) -> np.ndarray:
        """Convolve ``events[T, ...]`` along time with kernel ``index``, truncated to T."""
        kernel = self.kernels[index]
        steps = events.shape[0]
        out = np.zeros(events.shape, dtype=np.float64)
        for lag, weight in enumerate(kernel[:steps]):
            out[lag:] += weight * events[: steps - lag]
        return out


def poly_degree(duration_s: float, cap: int = MAX_POLY_DEGREE) -> int:
    """Return the drift polynomial degree for a session of ``duration_s`` seconds."""
    return min(int(duration_s // 120) + 1, cap)


def legendre_basis(n_timepoints: int, degree: int) -> np.ndarray:
    """Return ``[T, degree + 1]`` orthonormal Legendre drift regressors."""
    if n_timepoints < degree + 1:
        raise ConfigError(
            f"session of {n_timepoints} samples cannot hold degree-{degree} drift terms"
        )
    x = np.linspace(-1.0, 1.0, n_timepoints)
    raw = legendre.legvander(x, degree)
    q, r = qr(raw, mode="economic")
    return q * np.sign(np.diag(r))


def block_diagonal_drift(session_lengths: list[int], degrees: list[int]) -> np.ndarray:
    """Stack per-session Legendre bases block-diagonally over the concatenated run."""
    blocks = [legendre_basis(n, d) for n, d in zip(session_lengths, degrees, strict=True)]
    total_rows = sum(session_lengths)
    total_cols = sum(block.shape[1] for block in blocks)
    out = np.zeros((total_rows, total_cols))
    row = col = 0
    for block in blocks:
        out[row : row + block.shape[0], col : col + block.shape[1]] = block
        row += block.shape[0]
        col += block.shape[1]
    return out

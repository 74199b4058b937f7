"""Reconstruction quality metrics: pixel, structural and feature-level."""

from __future__ import annotations

import logging
import math
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from neurodecode.contrastive import DualEncoder, SemanticClassifier, embed_image
from neurodecode.core.rng import Rng
from neurodecode.schemas.config import MetricConfig
from neurodecode.schemas.reports import MetricReport
from neurodecode.synth import luminance
from neurodecode.utils.errors import ConfigError, DimensionError, UndefinedCorrelationError
from neurodecode.utils.parallel import parallel_map

logger = logging.getLogger(__name__)

Similarity = Callable[[np.ndarray, np.ndarray], float]


def _same_shape(x: np.ndarray, y: np.ndarray, metric: str) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise DimensionError(f"{metric} needs equal shapes, got {x.shape} and {y.shape}")
    return x, y


def mse(pred: np.ndarray, target: np.ndarray) -> float:
    """Mean squared error."""
    pred, target = _same_shape(pred, target, "mse")
    return float(np.mean((pred - target) ** 2))


def mae(pred: np.ndarray, target: np.ndarray) -> float:
    """Mean absolute error."""
    pred, target = _same_shape(pred, target, "mae")
    return float(np.mean(np.abs(pred - target)))


def psnr(x: np.ndarray, y: np.ndarray, data_range: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; identical inputs give ``inf``."""
    error = mse(x, y)
    if error == 0.0:
        return math.inf
    return 10.0 * math.log10(data_range**2 / error)


# -- SSIM ----------------------------------------------------------------------
def ssim_kernel(window: int, kind: str = "uniform", sigma: float = 1.5) -> np.ndarray:
    """Return normalized ``[window, window]`` weights for the local statistics."""
    if window < 1:
        raise ConfigError(f"ssim window must be positive, got {window}")
    if kind == "uniform":
        return np.full((window, window), 1.0 / window**2)
    if kind == "gaussian":
        offsets = np.arange(window) - (window - 1) / 2.0
        line = np.exp(-(offsets**2) / (2.0 * sigma**2))
        weights = np.outer(line, line)
        return weights / weights.sum()
    raise ConfigError(f"unknown ssim kernel {kind!r}")


def _gray(image: np.ndarray) -> np.ndarray:
    if image.ndim == 3 and image.shape[0] == 3:
        return luminance(image)
    if image.ndim == 2:
        return image
    raise DimensionError(f"ssim expects [H, W] or [3, H, W] images, got {image.shape}")


def ssim_map(
    x: np.ndarray,
    y: np.ndarray,
    window: int = 7,
    k1: float = 0.01,
    k2: float = 0.03,
    bits: int = 8,
    kernel: str = "uniform",
    sigma: float = 1.5,
) -> np.ndarray:
    """Return the local SSIM statistic for every valid window position.

    Images hold values in [0, 1]; colour images are reduced to luminance and
    both are scaled to ``L = 2**bits - 1`` before the population (1/N)
    window statistics.
    """
    x, y = _same_shape(x, y, "ssim")
    level = float(2**bits - 1)
    gx, gy = _gray(x) * level, _gray(y) * level
    if min(gx.shape) < window:
        raise ConfigError(f"image {gx.shape} is smaller than the {window}x{window} ssim window")
    weights = ssim_kernel(window, kernel, sigma)
    wx = sliding_window_view(gx, (window, window))
    wy = sliding_window_view(gy, (window, window))
    mu_x = np.einsum("ijkl,kl->ij", wx, weights)
    mu_y = np.einsum("ijkl,kl->ij", wy, weights)
    dx = wx - mu_x[..., None, None]
    dy = wy - mu_y[..., None, None]
    var_x = np.einsum("ijkl,kl->ij", dx * dx, weights)
    var_y = np.einsum("ijkl,kl->ij", dy * dy, weights)
    cov = np.einsum("ijkl,kl->ij", dx * dy, weights)
    c1 = (k1 * level) ** 2
    c2 = (k2 * level) ** 2
    numerator = (2.0 * mu_x * mu_y + c1) * (2.0 * cov + c2)
    denominator = (mu_x**2 + mu_y**2 + c1) * (var_x + var_y + c2)
    return numerator / denominator


def ssim(
    x: np.ndarray,
    y: np.ndarray,
    window: int = 7,
    k1: float = 0.01,
    k2: float = 0.03,
    bits: int = 8,
    kernel: str = "uniform",
    sigma: float = 1.5,
) -> float:
    """Mean SSIM over stride-1 valid windows."""
    return float(np.mean(ssim_map(x, y, window, k1, k2, bits, kernel, sigma)))


def ssim_from_config(x: np.ndarray, y: np.ndarray, cfg: MetricConfig) -> float:
    """SSIM with the window, constants and kernel of ``cfg``."""
    return ssim(x, y, cfg.ssim_window, cfg.k1, cfg.k2, cfg.bits, cfg.ssim_kernel, cfg.ssim_sigma)


# -- correlation family ------------------------------------------------------------
def _centered(values: np.ndarray, what: str) -> tuple[np.ndarray, float]:
    flat = np.asarray(values, dtype=np.float64).ravel()
    centered = flat - flat.mean()
    norm = float(np.linalg.norm(centered))
    if norm == 0.0:
        raise UndefinedCorrelationError(f"{what} has zero variance")
    return centered, norm


def pixcorr(x: np.ndarray, y: np.ndarray) -> float:
    """Pearson correlation over flattened pixels."""
    x, y = _same_shape(x, y, "pixcorr")
    cx, nx = _centered(x, "first image")
    cy, ny = _centered(y, "second image")
    return float(np.clip(np.dot(cx, cy) / (nx * ny), -1.0, 1.0))


def sdc(x: np.ndarray, y: np.ndarray) -> float:
    """Spatial distance correlation: one minus the centered cosine, in [0, 2]."""
    x, y = _same_shape(x, y, "sdc")
    cx, nx = _centered(x, "first vector")
    cy, ny = _centered(y, "second vector")
    return float(1.0 - np.clip(np.dot(cx, cy) / (nx * ny), -1.0, 1.0))


def correlation_matrix(rows_a: np.ndarray, rows_b: np.ndarray, name: str = "") -> np.ndarray:
    """Pearson correlation between every row of ``rows_a`` and every row of ``rows_b``."""
    a = np.asarray(rows_a, dtype=np.float64).reshape(len(rows_a), -1)
    b = np.asarray(rows_b, dtype=np.float64).reshape(len(rows_b), -1)
    a = a - a.mean(axis=1, keepdims=True)
    b = b - b.mean(axis=1, keepdims=True)
    norm_a = np.linalg.norm(a, axis=1)
    norm_b = np.linalg.norm(b, axis=1)
    if np.any(norm_a == 0.0) or np.any(norm_b == 0.0):
        label = f" from extractor {name!r}" if name else ""
        raise UndefinedCorrelationError(f"constant feature vectors{label}")
    return (a @ b.T) / np.outer(norm_a, norm_b)


def two_way_identification(
    pred_features: np.ndarray,
    true_features: np.ndarray,
    name: str = "",
    similarity: Similarity | None = None,
) -> float:
    """Fraction of ordered (i, j≠i) trials where pred_i is closer to truth_i than to truth_j.

    Closeness is Pearson correlation unless ``similarity`` is given; ties
    score one half.
    """
    if len(pred_features) != len(true_features):
        raise DimensionError("two-way identification needs as many predictions as truths")
    n = len(pred_features)
    if n < 2:
        raise ConfigError("two-way identification needs at least two samples")
    if similarity is None:
        scores = correlation_matrix(pred_features, true_features, name)
    else:
        scores = np.array(
            [[similarity(p, t) for t in true_features] for p in pred_features], dtype=np.float64
        )
    matched = np.diag(scores)[:, None]
    off_diagonal = ~np.eye(n, dtype=bool)
    wins = (matched > scores)[off_diagonal].sum()
    ties = (matched == scores)[off_diagonal].sum()
    return float((wins + 0.5 * ties) / (n * (n - 1)))


# -- feature extractors ----------------------------------------------------------
@dataclass
class FeatureExtractor:
    """Named deterministic map from images ``[N, 3, S, S]`` to features ``[N, F]``."""

    name: str
    fn: Callable[[np.ndarray], np.ndarray]
    tap: str = ""
    metadata: dict[str, str] = field(default_factory=dict)

    def __call__(self, images: np.ndarray) -> np.ndarray:
        images = np.asarray(images, dtype=np.float64)
        if images.ndim == 3:
            images = images[None]
        return np.asarray(self.fn(images), dtype=np.float64).reshape(images.shape[0], -1)


def contrastive_extractor(model: DualEncoder) -> FeatureExtractor:
    """Pooled row of the trained image tower."""
    return FeatureExtractor("contrastive", lambda images: embed_image(model, images)[:, 0], "row0")


def classifier_extractor(model: SemanticClassifier, tap: str) -> FeatureExtractor:
    """Activations of the semantic classifier at ``tap`` (shallow or deep)."""
    if tap not in model.TAPS:
        raise ConfigError(f"unknown classifier tap {tap!r}; choose from {model.TAPS}")
    return FeatureExtractor(f"classifier_{tap}", lambda images: model.features(images, tap), tap)


def random_extractor(image_size: int, dim: int, rng: Rng) -> FeatureExtractor:
    """Fixed seeded Gaussian projection of raw pixels (null baseline)."""
    projection = rng.normal(size=(3 * image_size * image_size, dim)) / math.sqrt(dim)

    def project(images: np.ndarray) -> np.ndarray:
        return images.reshape(images.shape[0], -1) @ projection

    return FeatureExtractor("random", project, "pixels")


# -- report ------------------------------------------------------------------------
def evaluate(
    preds: np.ndarray,
    truths: np.ndarray,
    extractors: Sequence[FeatureExtractor],
    cfg: MetricConfig,
    label: str = "",
) -> MetricReport:
    """Run the full suite on paired images ``[N, 3, S, S]`` in [0, 1]."""
    preds, truths = _same_shape(preds, truths, "evaluate")
    if preds.ndim != 4:
        raise DimensionError(f"evaluate expects [N, 3, S, S] image stacks, got {preds.shape}")
    features = {fx.name: (fx(preds), fx(truths)) for fx in extractors}

    def sample_row(index: int) -> dict[str, float]:
        pred, truth = preds[index], truths[index]
        row = {
            "mse": mse(pred, truth),
            "mae": mae(pred, truth),
            "ssim": ssim_from_config(pred, truth, cfg),
            "pixcorr": pixcorr(pred, truth),
        }
        for name, (pred_fx, true_fx) in features.items():
            row[f"sdc_{name}"] = sdc(pred_fx[index], true_fx[index])
        return row

    report = MetricReport(label=label, samples=parallel_map(sample_row, range(preds.shape[0])))
    if preds.shape[0] >= 2:
        report.two_way = {
            name: two_way_identification(pred_fx, true_fx, name)
            for name, (pred_fx, true_fx) in features.items()
        }
    else:
        logger.warning("two-way identification skipped for %s: fewer than two samples", label)
    return report

"""Metric suite tests."""

from __future__ import annotations

import itertools
import math

import numpy as np
import pytest

from neurodecode.core.rng import Rng
from neurodecode.metrics import (
    FeatureExtractor,
    correlation_matrix,
    evaluate,
    mae,
    mse,
    pixcorr,
    psnr,
    random_extractor,
    sdc,
    ssim,
    ssim_kernel,
    two_way_identification,
)
from neurodecode.schemas.config import MetricConfig
from neurodecode.utils.errors import ConfigError, DimensionError, UndefinedCorrelationError


def _ssim_by_loops(x: np.ndarray, y: np.ndarray, window: int) -> float:
    level = 255.0
    c1, c2 = (0.01 * level) ** 2, (0.03 * level) ** 2
    gx, gy = x * level, y * level
    values = []
    for i in range(gx.shape[0] - window + 1):
        for j in range(gx.shape[1] - window + 1):
            a = gx[i : i + window, j : j + window].ravel()
            b = gy[i : i + window, j : j + window].ravel()
            mu_a, mu_b = a.mean(), b.mean()
            var_a, var_b = a.var(), b.var()
            cov = np.mean((a - mu_a) * (b - mu_b))
            values.append(
                ((2 * mu_a * mu_b + c1) * (2 * cov + c2))
                / ((mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2))
            )
    return float(np.mean(values))


def test_pixel_errors(rng: Rng) -> None:
    """MSE, MAE and PSNR follow their textbook definitions."""
    x = rng.uniform(size=(3, 4, 4))
    y = np.clip(x + 0.1, 0.0, 1.0)
    assert mse(x, y) == pytest.approx(np.mean((x - y) ** 2))
    assert mae(x, y) == pytest.approx(np.mean(np.abs(x - y)))
    assert psnr(x, y) == pytest.approx(10 * math.log10(1.0 / mse(x, y)))
    assert psnr(x, x) == math.inf
    with pytest.raises(DimensionError):
        mse(x, y[:, :2])


@pytest.mark.parametrize(("size", "window"), [(8, 7), (10, 3), (7, 7)])
def test_ssim_matches_a_brute_force_window_loop(size: int, window: int, rng: Rng) -> None:
    """Vectorized SSIM equals the per-window population-statistics definition."""
    x = rng.derive("x").uniform(size=(size, size))
    y = np.clip(x + 0.2 * rng.derive("y").normal(size=(size, size)), 0.0, 1.0)
    expected = _ssim_by_loops(x, y, window)
    assert ssim(x, y, window=window) == pytest.approx(expected, rel=1e-9, abs=1e-12)


def test_ssim_of_colour_images_uses_luminance(rng: Rng) -> None:
    """Colour inputs collapse to Rec. 601 luminance; identical images score one."""
    x = rng.uniform(size=(3, 8, 8))
    y = rng.derive("y").uniform(size=(3, 8, 8))
    weights = np.array([0.299, 0.587, 0.114])
    gray_x = np.tensordot(weights, x, axes=1)
    gray_y = np.tensordot(weights, y, axes=1)
    assert ssim(x, y) == pytest.approx(_ssim_by_loops(gray_x, gray_y, 7), rel=1e-9, abs=1e-12)
    assert ssim(x, x) == pytest.approx(1.0)


def test_ssim_rejects_small_images_and_unknown_kernels() -> None:
    """The window must fit inside the image; kernels are uniform or gaussian."""
    with pytest.raises(ConfigError):
        ssim(np.zeros((5, 5)), np.zeros((5, 5)), window=7)
    with pytest.raises(ConfigError):
        ssim_kernel(3, "box")
    gaussian = ssim_kernel(5, "gaussian", sigma=1.0)
    assert gaussian.sum() == pytest.approx(1.0)
    assert gaussian[2, 2] == gaussian.max()


def test_pixcorr_and_sdc_against_numpy(rng: Rng) -> None:
    """pixcorr is Pearson r over pixels; sdc is one minus the centered cosine."""
    x = rng.uniform(size=(3, 5, 5))
    y = 0.5 * x + rng.derive("y").uniform(size=(3, 5, 5))
    r = np.corrcoef(x.ravel(), y.ravel())[0, 1]
    assert pixcorr(x, y) == pytest.approx(r)
    assert sdc(x.ravel(), y.ravel()) == pytest.approx(1.0 - r)
    assert sdc(x.ravel(), -x.ravel()) == pytest.approx(2.0)
    assert sdc(x.ravel(), 3.0 * x.ravel() + 1.0) == pytest.approx(0.0, abs=1e-12)


def test_zero_variance_correlation_is_undefined() -> None:
    """A flat image has no defined correlation."""
    with pytest.raises(UndefinedCorrelationError):
        pixcorr(np.ones((3, 4, 4)), np.zeros((3, 4, 4)) + np.arange(16).reshape(4, 4))
    with pytest.raises(UndefinedCorrelationError, match="random"):
        correlation_matrix(np.ones((2, 3)), np.eye(3)[:2], "random")


def test_two_way_matches_exhaustive_enumeration(rng: Rng) -> None:
    """The vectorized score equals a loop over all ordered pairs."""
    pred = rng.derive("pred").normal(size=(6, 5))
    true = pred + rng.derive("noise").normal(size=(6, 5))
    corr = np.corrcoef(pred, true)[:6, 6:]
    wins = 0.0
    for i, j in itertools.permutations(range(6), 2):
        if corr[i, i] > corr[i, j]:
            wins += 1.0
        elif corr[i, i] == corr[i, j]:
            wins += 0.5
    assert two_way_identification(pred, true) == pytest.approx(wins / 30)


def test_two_way_extremes_and_ties() -> None:
    """Perfect features score one, swapped pairs zero, constant similarity one half."""
    features = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    assert two_way_identification(features, features) == 1.0
    assert two_way_identification(features[:2], features[[1, 0]]) == 0.0
    assert two_way_identification(features, features, similarity=lambda a, b: 0.0) == 0.5
    with pytest.raises(ConfigError):
        two_way_identification(features[:1], features[:1])
    with pytest.raises(DimensionError):
        two_way_identification(features, features[:2])


def test_random_extractor_is_a_fixed_projection() -> None:
    """Two extractors with the same seed project identically."""
    images = Rng(1).uniform(size=(2, 3, 4, 4))
    first = random_extractor(4, 5, Rng(2))(images)
    assert first.shape == (2, 5)
    assert np.array_equal(first, random_extractor(4, 5, Rng(2))(images))
    assert random_extractor(4, 5, Rng(2))(images[0]).shape == (1, 5)


def test_evaluate_reports_every_metric(rng: Rng) -> None:
    """Each sample row carries the pixel metrics and one sdc per extractor."""
    truths = rng.derive("truth").uniform(size=(4, 3, 8, 8))
    preds = np.clip(truths + 0.1 * rng.derive("noise").normal(size=truths.shape), 0.0, 1.0)
    extractors = [
        random_extractor(8, 6, rng.derive("random")),
        FeatureExtractor("mean_rgb", lambda images: images.mean(axis=(2, 3))),
    ]
    report = evaluate(preds, truths, extractors, MetricConfig(), label="unit")
    assert len(report.samples) == 4
    assert set(report.samples[0]) == {
        "mse",
        "mae",
        "ssim",
        "pixcorr",
        "sdc_random",
        "sdc_mean_rgb",
    }
    assert set(report.two_way) == {"random", "mean_rgb"}
    assert report.samples[2]["mse"] == pytest.approx(mse(preds[2], truths[2]))
    aggregate = report.aggregate
    assert aggregate["ssim"] == pytest.approx(np.mean([row["ssim"] for row in report.samples]))
    assert aggregate["two_way_random"] == report.two_way["random"]


def test_evaluate_with_one_sample_skips_two_way(rng: Rng) -> None:
    """A single pair still gets per-sample metrics."""
    images = rng.uniform(size=(1, 3, 8, 8))
    report = evaluate(images, images[::-1] * 0.5, [], MetricConfig())
    assert report.two_way == {}
    assert report.samples[0]["mse"] > 0


def test_ssim_is_symmetric(rng: Rng) -> None:
    """Swapping the two images leaves SSIM unchanged."""
    x = rng.derive("x").uniform(size=(3, 12, 12))
    y = rng.derive("y").uniform(size=(3, 12, 12))
    assert abs(ssim(x, y, window=5) - ssim(y, x, window=5)) <= 1e-12
    assert abs(ssim(x, y, kernel="gaussian") - ssim(y, x, kernel="gaussian")) <= 1e-12


def test_correlations_ignore_positive_affine_changes(rng: Rng) -> None:
    """Scaling by a positive gain and adding an offset changes neither pixcorr nor sdc."""
    x = rng.derive("x").uniform(size=(3, 6, 6))
    y = 0.3 * x + rng.derive("y").uniform(size=(3, 6, 6))
    assert pixcorr(2.5 * x + 0.7, y) == pytest.approx(pixcorr(x, y), abs=1e-12)
    assert pixcorr(x, 0.1 * y - 3.0) == pytest.approx(pixcorr(x, y), abs=1e-12)
    assert sdc(x.ravel(), 4.0 * y.ravel() + 2.0) == pytest.approx(sdc(x.ravel(), y.ravel()))


def test_two_way_ignores_monotone_similarity_transforms(rng: Rng) -> None:
    """Only the ordering of similarities matters."""
    pred = rng.derive("pred").normal(size=(7, 4))
    true = pred + rng.derive("noise").normal(size=(7, 4), scale=1.5)

    def closeness(a: np.ndarray, b: np.ndarray) -> float:
        return -float(np.linalg.norm(a - b))

    base = two_way_identification(pred, true, similarity=closeness)
    squashed = two_way_identification(
        pred, true, similarity=lambda a, b: math.exp(closeness(a, b))
    )
    assert squashed == base
    gains = rng.derive("gains").uniform(size=(7, 1), low=0.5, high=3.0)
    assert two_way_identification(gains * pred + 1.0, true) == pytest.approx(
        two_way_identification(pred, true)
    )

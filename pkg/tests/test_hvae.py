"""Hierarchical VAE tests."""

from __future__ import annotations

import numpy as np
import pytest

from neurodecode.core.gradcheck import grad_check_module
from neurodecode.core.rng import Rng
from neurodecode.core.tensor import Tensor
from neurodecode.hvae import Hvae, flatten_latent, gaussian_kl, train_hvae, unflatten_latent
from neurodecode.schemas.config import HvaeConfig
from neurodecode.utils.errors import ConfigError, DimensionError, UntrainedModelError


def _tiny(**updates: object) -> Hvae:
    cfg = HvaeConfig(
        **{"layer_resolutions": [1, 2, 2], "injected_layers": 2, "channels": 3, **updates}
    )
    return Hvae(cfg, image_size=4, rng=Rng(0).derive("hvae"))


def _images(n: int, seed: int = 1) -> np.ndarray:
    return Rng(seed).uniform(size=(n, 3, 4, 4))


def test_latent_layout_is_slot_major() -> None:
    """Each slot contributes 16 consecutive values, slots in row-major order."""
    z = np.arange(2 * 16 * 2 * 2, dtype=np.float64).reshape(2, 16, 2, 2)
    flat = flatten_latent(z)
    assert flat.shape == (2, 64)
    assert np.array_equal(flat[0, :16], z[0, :, 0, 0])
    assert np.array_equal(flat[0, 16:32], z[0, :, 0, 1])
    assert np.array_equal(unflatten_latent(flat, 2, 16), z)


def test_injected_length_counts_top_layers() -> None:
    """LatentVector length is 16 times the slots of the injected layers."""
    model = _tiny()
    assert model.slot_counts == [1, 4, 4]
    assert model.injected_length() == (1 + 4) * 16
    assert model.injected_length(3) == 9 * 16


def test_gaussian_kl_vanishes_for_identical_distributions() -> None:
    """KL(p‖p) is zero and KL against a shifted mean is half the squared gap."""
    mu = Tensor(np.array([0.3, -1.0]))
    log_sigma = Tensor(np.zeros(2))
    assert np.allclose(gaussian_kl(mu, log_sigma, mu, log_sigma).data, 0.0)
    shifted = Tensor(mu.data + 2.0)
    assert np.allclose(gaussian_kl(mu, log_sigma, shifted, log_sigma).data, 2.0)


def test_elbo_gradients_match_finite_differences() -> None:
    """The negative ELBO backpropagates correctly through every layer."""
    model = _tiny(free_bits=0.0)
    images = _images(2)
    report = grad_check_module(
        lambda: model.elbo(images, Rng(5))[0], model, max_entries=4, tol=1e-4
    )
    assert report.passed, report.max_rel_error


def test_encode_requires_training() -> None:
    """Encoding with a fresh model is refused unless explicitly allowed."""
    model = _tiny()
    with pytest.raises(UntrainedModelError):
        model.encode(_images(1))
    encoding = model.encode(_images(3), require_trained=False)
    assert encoding.latents.shape == (3, model.injected_length())
    assert len(encoding.mu) == 3


def test_decode_with_injected_validates_inputs() -> None:
    """Wrong latent lengths and layer counts are rejected."""
    model = _tiny()
    with pytest.raises(DimensionError):
        model.decode_with_injected(np.zeros((1, 10)), Rng(0))
    with pytest.raises(ConfigError):
        model.decode_with_injected(np.zeros((1, 0)), Rng(0), layers=4)


def test_decode_samples_do_not_depend_on_batch_neighbours() -> None:
    """Sample n draws its own noise stream, so batching does not change it."""
    model = _tiny()
    latents = Rng(2).normal(size=(3, model.injected_length()))
    together = model.decode_with_injected(latents, Rng(7))
    alone = model.decode_with_injected(latents[:1], Rng(7))
    assert together.shape == (3, 3, 4, 4)
    assert np.array_equal(together[:1], alone)
    assert together.min() >= 0.0
    assert together.max() <= 1.0


def test_zero_temperature_sampling_is_seed_independent() -> None:
    """With temperature 0 every layer takes its prior mean."""
    model = _tiny()
    trace: list[np.ndarray] = []
    first = model.decode_with_injected(np.zeros((2, 0)), Rng(1), layers=0, temperature=0.0)
    second = model.decode_with_injected(
        np.zeros((2, 0)), Rng(2), layers=0, temperature=0.0, trace=trace
    )
    assert np.array_equal(first, second)
    assert len(trace) == 3
    assert model.sample(2, Rng(3)).shape == (2, 3, 4, 4)


def test_training_marks_model_trained_and_reports_epochs() -> None:
    """train_hvae logs one row per epoch and leaves the model in eval mode."""
    model = _tiny(epochs=3, batch_size=4)
    report = train_hvae(model, _images(8), model.cfg, Rng(4))
    assert [row.epoch for row in report.rows] == [1, 2, 3]
    assert model.trained
    assert not model.training
    assert all(np.isfinite(row.loss) for row in report.rows)
    assert model.encode(_images(2)).latents.shape == (2, 80)

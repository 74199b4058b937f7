"""Noise schedule, latent codec, denoiser and sampling tests."""

from __future__ import annotations

import numpy as np
import pytest

from neurodecode.core.gradcheck import grad_check_module
from neurodecode.core.rng import Rng
from neurodecode.diffusion import (
    Conditioning,
    Denoiser,
    LatentCodec,
    NoiseSchedule,
    denoiser_loss,
    forward_chain,
    forward_diffuse,
    generate,
    img2img_refine,
    img2img_start,
    perturb_guess,
    posterior_mean,
    predict_z0,
    reverse_generate,
    timestep_embedding,
    train_codec,
    train_denoiser,
)
from neurodecode.schemas.config import PRESETS, DiffusionConfig, load_preset
from neurodecode.utils.errors import ConfigError, DimensionError, UntrainedModelError

IMAGE_SIZE = 8
COND_DIM = 4


def _cfg(**updates: object) -> DiffusionConfig:
    base = {
        "steps": 50,
        "latent_channels": 2,
        "codec_downsample": 2,
        "codec_channels": 3,
        "codec_epochs": 1,
        "channels": 4,
        "time_dim": 4,
        "epochs": 1,
        "batch_size": 4,
    }
    return DiffusionConfig(**{**base, **updates})


def _cond(n: int, seed: int = 0) -> Conditioning:
    rng = Rng(seed)
    vision = rng.derive("v").normal(size=(n, 5, COND_DIM))
    return Conditioning(vision, rng.derive("t").normal(size=(n, 3, COND_DIM)))


def _images(n: int, seed: int = 1) -> np.ndarray:
    return Rng(seed).uniform(size=(n, 3, IMAGE_SIZE, IMAGE_SIZE))


def _trained(cfg: DiffusionConfig) -> tuple[LatentCodec, Denoiser, NoiseSchedule]:
    codec = LatentCodec(cfg, IMAGE_SIZE, Rng(2).derive("codec"))
    train_codec(codec, _images(8), cfg, Rng(3))
    latents = codec.encode(_images(8))
    denoiser = Denoiser(cfg, cfg.latent_channels, codec.latent_size, COND_DIM, Rng(4))
    schedule = NoiseSchedule.from_config(cfg)
    train_denoiser(denoiser, schedule, latents, _cond(8), cfg, Rng(5))
    return codec, denoiser, schedule


def test_rescaled_schedule_ends_near_pure_noise() -> None:
    """The rescaled linear schedule drives alpha_bar below 0.01."""
    schedule = NoiseSchedule.linear(100)
    assert schedule.steps == 100
    assert schedule.beta(1) == pytest.approx(1e-3)
    assert schedule.beta(100) == pytest.approx(0.2)
    assert schedule.alpha_bar(0) == 1.0
    assert schedule.alpha_bar(100) < 0.01
    assert np.all(np.diff(schedule.alpha_bars) < 0)


def test_schedules_that_keep_signal_are_rejected() -> None:
    """A chain ending above the alpha_bar threshold is a configuration error."""
    with pytest.raises(ConfigError, match="alpha_bar"):
        NoiseSchedule.linear(10, reference_steps=10)
    with pytest.raises(ConfigError):
        NoiseSchedule.linear(100).beta(0)


def test_closed_form_jump_matches_the_step_chain() -> None:
    """Composing one-step kernels and the closed-form jump give the same moments."""
    schedule = NoiseSchedule.linear(50)
    z0 = np.full(40_000, 0.8)
    t = 20
    bar = schedule.alpha_bar(t)
    jump = forward_diffuse(schedule, z0, t, Rng(1))
    chain = forward_chain(schedule, z0, t, Rng(2))
    for sample in (jump, chain):
        assert sample.mean() == pytest.approx(np.sqrt(bar) * 0.8, abs=0.02)
        assert sample.var() == pytest.approx(1.0 - bar, abs=0.02)
    assert np.array_equal(forward_diffuse(schedule, z0, 0, Rng(1)), z0)


def test_forward_diffuse_at_the_last_step_is_nearly_standard_normal() -> None:
    """At t = T the signal is almost gone."""
    schedule = NoiseSchedule.linear(100)
    z = forward_diffuse(schedule, np.ones(40_000), 100, Rng(3))
    assert abs(z.mean()) < 0.12
    assert z.var() == pytest.approx(1.0, abs=0.03)


def test_noise_estimate_inverts_the_jump(rng: Rng) -> None:
    """With the true noise, predict_z0 recovers z0 and the t=1 reverse mean equals z0."""
    schedule = NoiseSchedule.linear(50)
    z0 = rng.normal(size=(2, 3))
    eps = rng.derive("eps").normal(size=(2, 3))
    z_t = forward_diffuse(schedule, z0, 30, rng, eps=eps)
    assert np.allclose(predict_z0(schedule, z_t, 30, eps), z0)
    z_1 = forward_diffuse(schedule, z0, 1, rng, eps=eps)
    assert np.allclose(posterior_mean(schedule, z_1, 1, eps), z0)


def test_timestep_embedding_layout() -> None:
    """Sines come first, cosines second."""
    emb = timestep_embedding(np.array([0, 5]), 6)
    assert emb.shape == (2, 6)
    assert np.allclose(emb[0], [0, 0, 0, 1, 1, 1])
    assert emb[1, 0] == pytest.approx(np.sin(5.0))


def test_perturb_guess_amplitudes() -> None:
    """A=0 is the identity; A=256 discards the guess for mid-grey noise."""
    dark = np.zeros((3, 4, 4))
    bright = np.full((3, 4, 4), 255.0)
    assert np.array_equal(perturb_guess(dark, 0, Rng(0)), dark)
    noisy_dark = perturb_guess(dark, 256, Rng(1))
    assert np.array_equal(noisy_dark, perturb_guess(bright, 256, Rng(1)))
    mild = perturb_guess(bright, 16, Rng(2))
    assert np.array_equal(mild, np.rint(mild))
    assert mild.min() >= 0.0
    assert mild.max() <= 255.0


def test_perturb_guess_validates_amplitude_and_range() -> None:
    """Off-list amplitudes need opt-in and pixels must be 8-bit values."""
    image = np.zeros((3, 2, 2))
    with pytest.raises(ConfigError):
        perturb_guess(image, 5, Rng(0))
    assert perturb_guess(image, 5, Rng(0), allow_arbitrary=True).shape == image.shape
    with pytest.raises(ConfigError):
        perturb_guess(np.full((3, 2, 2), 300.0), 8, Rng(0))


def test_conditioning_modes_zero_the_masked_side() -> None:
    """Dropped modalities are replaced by zero rows."""
    cond = _cond(3)
    pooled = cond.pooled("vision")
    assert pooled.shape == (3, 2 * COND_DIM)
    assert np.array_equal(pooled[:, :COND_DIM], cond.vision[:, 0])
    assert np.all(pooled[:, COND_DIM:] == 0)
    assert np.all(cond.tokens("none") == 0)
    assert cond.tokens("vision+text").shape == (3, 8, COND_DIM)
    assert len(cond.take([0, 2])) == 2
    with pytest.raises(DimensionError):
        Conditioning(np.zeros((2, 5, 4)), np.zeros((3, 3, 4)))


@pytest.mark.parametrize("mechanism", ["film", "cross_attention"])
def test_denoiser_shapes_and_gradients(mechanism: str) -> None:
    """Both conditioning mechanisms predict noise of the latent shape and backprop correctly."""
    cfg = _cfg(mechanism=mechanism)
    denoiser = Denoiser(cfg, 2, 4, COND_DIM, Rng(6))
    z = Rng(7).normal(size=(2, 2, 4, 4))
    cond = _cond(2)
    assert denoiser(z, np.array([3, 40]), cond).shape == (2, 2, 4, 4)
    schedule = NoiseSchedule.from_config(cfg)
    report = grad_check_module(
        lambda: denoiser_loss(denoiser, schedule, z, cond, Rng(8)), denoiser, max_entries=4
    )
    assert report.passed, report.max_rel_error


def test_zero_output_denoiser_sits_at_the_baseline() -> None:
    """Predicting zero noise costs E‖ε‖², the latent dimension."""
    cfg = _cfg(zero_init_out=True)
    denoiser = Denoiser(cfg, 2, 4, COND_DIM, Rng(9))
    z0 = Rng(10).normal(size=(64, 2, 4, 4))
    loss = denoiser_loss(denoiser, NoiseSchedule.from_config(cfg), z0, _cond(64), Rng(11))
    assert loss.item() == pytest.approx(32.0, abs=5.0)


def test_codec_scale_gives_unit_latent_spread() -> None:
    """After training, encoded training latents have unit standard deviation."""
    cfg = _cfg()
    codec = LatentCodec(cfg, IMAGE_SIZE, Rng(2))
    report = train_codec(codec, _images(8), cfg, Rng(3))
    latents = codec.encode(_images(8))
    assert latents.shape == (8, 2, 4, 4)
    assert latents.std() == pytest.approx(1.0)
    assert report.latent_scale == pytest.approx(float(codec.latent_scale))
    assert codec.decode(latents).shape == (8, 3, IMAGE_SIZE, IMAGE_SIZE)


def test_sampling_requires_trained_models() -> None:
    """Untrained denoisers and codecs refuse to sample."""
    cfg = _cfg()
    codec = LatentCodec(cfg, IMAGE_SIZE, Rng(0))
    denoiser = Denoiser(cfg, 2, 4, COND_DIM, Rng(0))
    schedule = NoiseSchedule.from_config(cfg)
    with pytest.raises(UntrainedModelError):
        reverse_generate(denoiser, schedule, np.zeros((1, 2, 4, 4)), _cond(1), 10, Rng(0))
    with pytest.raises(UntrainedModelError):
        img2img_refine(codec, denoiser, schedule, _images(1), _cond(1), 0.5, Rng(0))


def test_img2img_is_reproducible_and_per_sample() -> None:
    """Refinement depends only on the seed and on the sample itself."""
    cfg = _cfg()
    codec, denoiser, schedule = _trained(cfg)
    guesses = _images(2, seed=12)
    cond = _cond(2, seed=13)
    first = img2img_refine(codec, denoiser, schedule, guesses, cond, 0.5, Rng(14))
    again = img2img_refine(codec, denoiser, schedule, guesses, cond, 0.5, Rng(14))
    alone = img2img_refine(codec, denoiser, schedule, guesses[:1], cond.take([0]), 0.5, Rng(14))
    assert first.shape == (2, 3, IMAGE_SIZE, IMAGE_SIZE)
    assert np.array_equal(first, again)
    assert np.allclose(first[:1], alone, atol=1e-10)
    assert first.min() >= 0.0
    assert first.max() <= 1.0
    with pytest.raises(ConfigError):
        img2img_refine(codec, denoiser, schedule, guesses, cond, 0.0, Rng(14))
    assert generate(codec, denoiser, schedule, cond, Rng(15)).shape == first.shape


def test_img2img_start_rounds_up_and_validates() -> None:
    """The start step is ceil(s·T), never below one; strength must lie in (0, 1]."""
    schedule = NoiseSchedule.linear(50)
    assert img2img_start(schedule, 0.3) == 15
    assert img2img_start(schedule, 0.31) == 16
    assert img2img_start(schedule, 0.001) == 1
    assert img2img_start(schedule, 1.0) == 50
    for strength in (0.0, -0.1, 1.5):
        with pytest.raises(ConfigError):
            img2img_start(schedule, strength)


@pytest.mark.parametrize("preset", sorted(name for name in PRESETS if name != "paper-dims-shapes"))
def test_default_strength_keeps_most_of_the_guess(preset: str) -> None:
    """At the configured strength the noised guess still carries a sizeable signal share."""
    cfg = load_preset(preset).diffusion
    schedule = NoiseSchedule.from_config(cfg)
    alpha_bar = schedule.alpha_bar(img2img_start(schedule, cfg.strength))
    assert 0.3 < alpha_bar < 0.6
    default = NoiseSchedule.from_config(DiffusionConfig())
    assert default.alpha_bar(img2img_start(default, DiffusionConfig().strength)) > 0.3


def test_img2img_follows_its_guess() -> None:
    """With the same noise stream a bright guess refines brighter than a dark one."""
    cfg = _cfg(codec_epochs=30)
    codec, denoiser, schedule = _trained(cfg)
    cond = _cond(2, seed=16)
    dark = np.full((2, 3, IMAGE_SIZE, IMAGE_SIZE), 0.1)
    bright = np.full((2, 3, IMAGE_SIZE, IMAGE_SIZE), 0.9)
    low = img2img_refine(codec, denoiser, schedule, dark, cond, cfg.strength, Rng(17))
    high = img2img_refine(codec, denoiser, schedule, bright, cond, cfg.strength, Rng(17))
    assert np.mean(np.abs(high - low)) > 1e-2
    assert high.mean() > low.mean()

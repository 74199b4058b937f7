"""Conditional latent diffusion: schedule, codec, denoiser and sampling."""

from __future__ import annotations

import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from neurodecode.core import functional as F
from neurodecode.core.nn import (
    Conv2d,
    ConvTranspose2d,
    Linear,
    Module,
    MultiheadAttention,
)
from neurodecode.core.optim import Adam
from neurodecode.core.rng import Rng
from neurodecode.core.tensor import Tensor, as_tensor, no_grad
from neurodecode.metrics import psnr
from neurodecode.schemas.config import DEFAULT_AMPLITUDES, DiffusionConfig
from neurodecode.schemas.reports import CodecReport, DenoiserReport, LossEpoch
from neurodecode.utils.errors import (
    ConfigError,
    DimensionError,
    NumericError,
    UntrainedModelError,
)

logger = logging.getLogger(__name__)

PURE_NOISE_AMPLITUDE = 256
MID_GREY = 127.5
MAX_ALPHA_BAR_T = 0.01


# -- noise schedule --------------------------------------------------------
@dataclass
class NoiseSchedule:
    """Linear variance schedule indexed by ``t = 1..steps``.

    The endpoints are given for a ``reference_steps`` schedule and scaled by
    ``reference_steps / steps`` so that a short toy chain still ends close to
    pure noise.
    """

    betas: np.ndarray

    def __post_init__(self) -> None:
        betas = np.asarray(self.betas, dtype=np.float64)
        if betas.ndim != 1 or betas.size < 1:
            raise ConfigError("noise schedule needs at least one step")
        if np.any(betas <= 0) or np.any(betas >= 1):
            raise ConfigError("every beta_t must lie in (0, 1)")
        self.betas = betas
        self.alphas = 1.0 - betas
        self.alpha_bars = np.cumprod(self.alphas)
        if self.alpha_bars[-1] >= MAX_ALPHA_BAR_T:
            raise ConfigError(
                f"schedule ends at alpha_bar={self.alpha_bars[-1]:.4f}; "
                f"it must fall below {MAX_ALPHA_BAR_T}"
            )

    @classmethod
    def linear(
        cls,
        steps: int,
        beta_start: float = 1e-4,
        beta_end: float = 0.02,
        reference_steps: int = 1000,
    ) -> NoiseSchedule:
        """Build the rescaled linear schedule."""
        scale = reference_steps / steps
        return cls(np.linspace(beta_start * scale, beta_end * scale, steps))

    @classmethod
    def from_config(cls, cfg: DiffusionConfig) -> NoiseSchedule:
        """Build the schedule described by ``cfg``."""
        return cls.linear(cfg.steps, cfg.beta_start, cfg.beta_end, cfg.reference_steps)

    @property
    def steps(self) -> int:
        """Return T."""
        return self.betas.size

    def check_step(self, t: int, allow_zero: bool = False) -> int:
        """Validate ``t`` against ``1..T`` (or ``0..T``)."""
        low = 0 if allow_zero else 1
        if not low <= int(t) <= self.steps:
            raise ConfigError(f"timestep {t} outside {low}..{self.steps}")
        return int(t)

    def beta(self, t: int) -> float:
        """Return β_t."""
        return float(self.betas[self.check_step(t) - 1])

    def alpha(self, t: int) -> float:
        """Return α_t = 1 − β_t."""
        return float(self.alphas[self.check_step(t) - 1])

    def alpha_bar(self, t: int) -> float:
        """Return ᾱ_t, with ᾱ_0 = 1."""
        t = self.check_step(t, allow_zero=True)
        return 1.0 if t == 0 else float(self.alpha_bars[t - 1])


def forward_diffuse(
    schedule: NoiseSchedule,
    z0: np.ndarray,
    t: int,
    rng: Rng,
    eps: np.ndarray | None = None,
) -> np.ndarray:
    """Sample ``z_t = √ᾱ_t z0 + √(1 − ᾱ_t) ε``.

    Composing the one-step kernels ``N(√(1−β_s) z_{s−1}, β_s I)`` for
    ``s = 1..t`` gives a Gaussian with mean ``√(Π α_s) z0`` and variance
    ``1 − Π α_s``, which is this closed-form jump. ``t = 0`` returns ``z0``.
    """
    t = schedule.check_step(t, allow_zero=True)
    z0 = np.asarray(z0, dtype=np.float64)
    if t == 0:
        return z0.copy()
    noise = rng.normal(size=z0.shape) if eps is None else np.asarray(eps, dtype=np.float64)
    bar = schedule.alpha_bar(t)
    return math.sqrt(bar) * z0 + math.sqrt(1.0 - bar) * noise


def forward_chain(schedule: NoiseSchedule, z0: np.ndarray, t: int, rng: Rng) -> np.ndarray:
    """Apply the one-step forward kernel ``t`` times."""
    t = schedule.check_step(t, allow_zero=True)
    z = np.asarray(z0, dtype=np.float64).copy()
    for step in range(1, t + 1):
        beta = schedule.beta(step)
        z = math.sqrt(1.0 - beta) * z + math.sqrt(beta) * rng.normal(size=z.shape)
    return z


def predict_z0(schedule: NoiseSchedule, z_t: np.ndarray, t: int, eps: np.ndarray) -> np.ndarray:
    """Invert the forward jump given the noise: ``(z_t − √(1−ᾱ_t) ε) / √ᾱ_t``."""
    bar = schedule.alpha_bar(schedule.check_step(t))
    return (z_t - math.sqrt(1.0 - bar) * eps) / math.sqrt(bar)


def posterior_mean(
    schedule: NoiseSchedule, z_t: np.ndarray, t: int, eps: np.ndarray
) -> np.ndarray:
    """Reverse-step mean ``(z_t − β_t/√(1−ᾱ_t) ε) / √α_t`` from a noise estimate."""
    t = schedule.check_step(t)
    beta, bar = schedule.beta(t), schedule.alpha_bar(t)
    return (z_t - beta / math.sqrt(1.0 - bar) * eps) / math.sqrt(schedule.alpha(t))


# -- latent codec ------------------------------------------------------------
class LatentCodec(Module):
    """Conv autoencoder between ``[N, 3, S, S]`` images and ``[N, C, S/d, S/d]`` latents.

    Encoded latents are multiplied by ``latent_scale`` (1/sd of the training
    latents) so the diffusion prior sees roughly unit variance.
    """

    buffer_names = ("latent_scale",)

    def __init__(self, cfg: DiffusionConfig, image_size: int, rng: Rng) -> None:
        super().__init__()
        if image_size % cfg.codec_downsample:
            raise ConfigError(
                f"image size {image_size} not divisible by codec_downsample {cfg.codec_downsample}"
            )
        width = cfg.codec_channels
        factor = cfg.codec_downsample
        self.image_size = image_size
        self.factor = factor
        self.latent_channels = cfg.latent_channels
        self.enc_in = Conv2d(3, width, 3, rng.derive("enc_in"), padding=1)
        self.enc_mid = Conv2d(width, width, 3, rng.derive("enc_mid"), padding=1)
        self.enc_out = Conv2d(width, cfg.latent_channels, 1, rng.derive("enc_out"))
        self.dec_up = ConvTranspose2d(
            cfg.latent_channels, width, factor, rng.derive("dec_up"), stride=factor
        )
        self.dec_mid = Conv2d(width, width, 3, rng.derive("dec_mid"), padding=1)
        self.dec_out = Conv2d(width, 3, 3, rng.derive("dec_out"), padding=1)
        self.latent_scale = np.array(1.0)
        self.trained = False

    @property
    def latent_size(self) -> int:
        """Return the spatial size of latent maps."""
        return self.image_size // self.factor

    def encode_raw(self, images: np.ndarray | Tensor) -> Tensor:
        """Encoder output before scaling."""
        h = F.relu(self.enc_in(images))
        h = F.avg_pool2d(h, self.factor)
        h = F.relu(self.enc_mid(h))
        return self.enc_out(h)

    def decode_raw(self, latents: np.ndarray | Tensor) -> Tensor:
        """Decoder output in (0, 1) for unscaled latents."""
        h = F.relu(self.dec_up(latents))
        h = F.relu(self.dec_mid(h))
        return F.sigmoid(self.dec_out(h))

    def encode(self, images: np.ndarray) -> np.ndarray:
        """Return scaled latents for ``images[N, 3, S, S]``."""
        images = np.asarray(images, dtype=np.float64)
        if images.ndim != 4 or images.shape[1:] != (3, self.image_size, self.image_size):
            raise DimensionError(f"codec expects [N, 3, S, S] images, got {images.shape}")
        self.eval()
        with no_grad():
            return self.encode_raw(images).data * float(self.latent_scale)

    def decode(self, latents: np.ndarray) -> np.ndarray:
        """Return images in [0, 1] for scaled latents."""
        self.eval()
        with no_grad():
            out = self.decode_raw(np.asarray(latents) / float(self.latent_scale)).data
        return np.clip(out, 0.0, 1.0)


def train_codec(
    codec: LatentCodec,
    images: np.ndarray,
    cfg: DiffusionConfig,
    rng: Rng,
    val_images: np.ndarray | None = None,
) -> CodecReport:
    """Fit the autoencoder on reconstruction MSE, then fix the latent scale."""
    n = images.shape[0]
    optimizer = Adam(codec.parameters(), lr=cfg.codec_lr)
    report = CodecReport()
    held_out = images if val_images is None or val_images.shape[0] == 0 else val_images
    codec.train()
    for epoch in range(1, cfg.codec_epochs + 1):
        order = rng.derive("epoch", epoch).permutation(n)
        losses = []
        for batch_index, start in enumerate(range(0, n, cfg.batch_size)):
            rows = order[start : start + cfg.batch_size]
            optimizer.zero_grad()
            try:
                batch = images[rows]
                loss = F.mse_loss(codec.decode_raw(codec.encode_raw(batch)), batch)
                loss.backward()
                optimizer.step()
            except NumericError as exc:
                raise NumericError(
                    f"train_codec diverged at epoch {epoch} batch {batch_index} "
                    f"(lr {cfg.codec_lr}): {exc.message}"
                ) from exc
            losses.append(loss.item())
        with no_grad():
            val_loss = F.mse_loss(codec.decode_raw(codec.encode_raw(held_out)), held_out).item()
        report.rows.append(
            LossEpoch(epoch=epoch, train_loss=float(np.mean(losses)), val_loss=val_loss)
        )
    codec.eval()
    with no_grad():
        raw = codec.encode_raw(images).data
    spread = float(raw.std())
    codec.latent_scale = np.array(1.0 / spread if spread > 1e-8 else 1.0)
    codec.trained = True
    report.latent_scale = float(codec.latent_scale)
    recon = codec.decode(codec.encode(held_out))
    report.val_psnr = float(np.mean([psnr(a, b) for a, b in zip(recon, held_out, strict=True)]))
    logger.info(
        "train_codec completed for %s epochs; val PSNR %.2f dB", cfg.codec_epochs, report.val_psnr
    )
    return report


# -- conditioning --------------------------------------------------------------
@dataclass
class Conditioning:
    """Vision ``[N, rows_v, d]`` and text ``[N, rows_t, d]`` embedding rows."""

    vision: np.ndarray
    text: np.ndarray

    def __post_init__(self) -> None:
        if self.vision.ndim == 2:
            self.vision = self.vision[None]
        if self.text.ndim == 2:
            self.text = self.text[None]
        if self.vision.shape[0] != self.text.shape[0]:
            raise DimensionError("vision and text conditioning have different batch sizes")

    def __len__(self) -> int:
        return self.vision.shape[0]

    @property
    def dim(self) -> int:
        """Return the embedding width."""
        return self.vision.shape[-1]

    def take(self, rows: np.ndarray | Sequence[int]) -> Conditioning:
        """Return the conditioning of selected samples."""
        return Conditioning(self.vision[rows], self.text[rows])

    def _masked(self, mode: str) -> tuple[np.ndarray, np.ndarray]:
        vision = self.vision if mode in ("vision+text", "vision") else np.zeros_like(self.vision)
        text = self.text if mode in ("vision+text", "text") else np.zeros_like(self.text)
        return vision, text

    def pooled(self, mode: str) -> np.ndarray:
        """Return ``[N, 2d]``: pooled vision then pooled text row, zeroed per mode."""
        vision, text = self._masked(mode)
        return np.concatenate([vision[:, 0], text[:, 0]], axis=1)

    def tokens(self, mode: str) -> np.ndarray:
        """Return every vision and text row as one context sequence, zeroed per mode."""
        vision, text = self._masked(mode)
        return np.concatenate([vision, text], axis=1)


def timestep_embedding(t: np.ndarray, dim: int) -> np.ndarray:
    """Sinusoidal embedding ``[sin(t f_k), cos(t f_k)]`` with geometric frequencies."""
    half = dim // 2
    freqs = np.exp(-math.log(10_000.0) * np.arange(half) / half)
    angles = np.asarray(t, dtype=np.float64)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)


# -- denoiser ------------------------------------------------------------------
class FilmLayer(Module):
    """Feature-wise affine modulation from an embedding."""

    def __init__(self, embed_dim: int, channels: int, rng: Rng) -> None:
        super().__init__()
        self.proj = Linear(embed_dim, 2 * channels, rng, zero_init=True)
        self.channels = channels

    def forward(self, h: Tensor, embedding: Tensor) -> Tensor:
        """Return ``h · (1 + γ) + β``."""
        params = self.proj(embedding)
        batch = params.shape[0]
        gamma = F.reshape(params[:, : self.channels], (batch, self.channels, 1, 1))
        beta = F.reshape(params[:, self.channels :], (batch, self.channels, 1, 1))
        return F.add(F.mul(h, F.add(gamma, 1.0)), beta)


class Denoiser(Module):
    """One-level encoder-decoder with a skip connection over latent maps.

    The timestep enters through a sinusoidal embedding and an MLP. With the
    ``film`` mechanism the pooled conditioning vector is added to it before
    every modulation; with ``cross_attention`` the bottleneck attends over
    all conditioning rows instead.
    """

    def __init__(
        self, cfg: DiffusionConfig, latent_channels: int, latent_size: int, cond_dim: int, rng: Rng
    ) -> None:
        super().__init__()
        if latent_size % 2:
            raise ConfigError(f"denoiser needs even latent maps, got {latent_size}")
        width = cfg.channels
        self.cfg = cfg
        self.latent_channels = latent_channels
        self.latent_size = latent_size
        self.time_in = Linear(cfg.time_dim, width, rng.derive("time_in"))
        self.time_out = Linear(width, width, rng.derive("time_out"))
        self.cond_proj = Linear(2 * cond_dim, width, rng.derive("cond_proj"))
        self.conv_in = Conv2d(latent_channels, width, 3, rng.derive("conv_in"), padding=1)
        self.film_in = FilmLayer(width, width, rng.derive("film_in"))
        self.conv_down = Conv2d(width, 2 * width, 3, rng.derive("conv_down"), padding=1)
        self.film_mid = FilmLayer(width, 2 * width, rng.derive("film_mid"))
        self.attention = (
            MultiheadAttention(2 * width, 1, rng.derive("attention"), context_dim=cond_dim)
            if cfg.mechanism == "cross_attention"
            else None
        )
        self.conv_up = Conv2d(2 * width, width, 3, rng.derive("conv_up"), padding=1)
        self.conv_merge = Conv2d(2 * width, width, 3, rng.derive("conv_merge"), padding=1)
        self.conv_out = Conv2d(
            width,
            latent_channels,
            3,
            rng.derive("conv_out"),
            padding=1,
            zero_init=cfg.zero_init_out,
        )
        self.trained = False

    def _embedding(self, t: np.ndarray, cond: Conditioning) -> Tensor:
        emb = self.time_out(F.relu(self.time_in(timestep_embedding(t, self.cfg.time_dim))))
        if self.attention is None:
            emb = F.add(emb, self.cond_proj(cond.pooled(self.cfg.conditioning)))
        return emb

    def forward(self, z_t: np.ndarray | Tensor, t: np.ndarray, cond: Conditioning) -> Tensor:
        """Predict the noise in ``z_t[N, C, h, w]`` at integer steps ``t[N]``."""
        z_t = as_tensor(z_t)
        expected = (self.latent_channels, self.latent_size, self.latent_size)
        if z_t.ndim != 4 or z_t.shape[1:] != expected:
            raise DimensionError(f"denoiser expects latents [N, {expected}], got {z_t.shape}")
        t = np.broadcast_to(np.asarray(t), (z_t.shape[0],))
        if len(cond) != z_t.shape[0]:
            raise DimensionError("conditioning batch does not match latent batch")
        emb = self._embedding(t, cond)
        skip = F.relu(self.film_in(self.conv_in(z_t), emb))
        h = F.avg_pool2d(skip, 2)
        h = F.relu(self.film_mid(self.conv_down(h), emb))
        if self.attention is not None:
            batch, channels, height, width = h.shape
            seq = F.transpose(F.reshape(h, (batch, channels, height * width)), (0, 2, 1))
            seq = F.add(seq, self.attention(seq, cond.tokens(self.cfg.conditioning)))
            h = F.reshape(F.transpose(seq, (0, 2, 1)), (batch, channels, height, width))
        h = F.relu(self.conv_up(F.upsample_nearest2d(h, 2)))
        h = F.relu(self.conv_merge(F.concat([h, skip], axis=1)))
        return self.conv_out(h)


def denoiser_loss(
    denoiser: Denoiser,
    schedule: NoiseSchedule,
    z0: np.ndarray,
    cond: Conditioning,
    rng: Rng,
) -> Tensor:
    """Mean over the batch of ``‖ε − ε_θ(z_t, t, c)‖²`` with uniformly drawn ``t``."""
    batch = z0.shape[0]
    t = rng.derive("t").integers(1, schedule.steps + 1, size=batch)
    eps = rng.derive("eps").normal(size=z0.shape)
    bars = schedule.alpha_bars[t - 1].reshape(batch, 1, 1, 1)
    z_t = np.sqrt(bars) * z0 + np.sqrt(1.0 - bars) * eps
    diff = F.sub(denoiser(z_t, t, cond), eps)
    return F.mul(F.sum(F.mul(diff, diff)), 1.0 / batch)


def train_denoiser(
    denoiser: Denoiser,
    schedule: NoiseSchedule,
    latents: np.ndarray,
    cond: Conditioning,
    cfg: DiffusionConfig,
    rng: Rng,
    val: tuple[np.ndarray, Conditioning] | None = None,
) -> DenoiserReport:
    """Minimize the noise-prediction loss; the report compares it with E‖ε‖² = dim."""
    n = latents.shape[0]
    baseline = float(np.prod(latents.shape[1:]))
    optimizer = Adam(denoiser.parameters(), lr=cfg.lr)
    report = DenoiserReport(baseline=baseline)
    val_latents, val_cond = val if val is not None and val[0].shape[0] else (latents, cond)
    denoiser.train()
    for epoch in range(1, cfg.epochs + 1):
        order = rng.derive("epoch", epoch).permutation(n)
        losses = []
        for batch_index, start in enumerate(range(0, n, cfg.batch_size)):
            rows = order[start : start + cfg.batch_size]
            optimizer.zero_grad()
            try:
                loss = denoiser_loss(
                    denoiser,
                    schedule,
                    latents[rows],
                    cond.take(rows),
                    rng.derive("batch", epoch, batch_index),
                )
                loss.backward()
                optimizer.step()
            except NumericError as exc:
                raise NumericError(
                    f"train_denoiser diverged at epoch {epoch} batch {batch_index} "
                    f"(lr {cfg.lr}): {exc.message}"
                ) from exc
            losses.append(loss.item())
        with no_grad():
            val_loss = denoiser_loss(
                denoiser, schedule, val_latents, val_cond, rng.derive("val")
            ).item()
        report.rows.append(
            LossEpoch(epoch=epoch, train_loss=float(np.mean(losses)), val_loss=val_loss)
        )
        logger.info("denoiser epoch %s val_loss=%.4f baseline=%.1f", epoch, val_loss, baseline)
    if report.rows:
        report.val_loss = report.rows[-1].val_loss
    denoiser.trained = True
    denoiser.eval()
    logger.info("train_denoiser completed for %s epochs on %s latents", cfg.epochs, n)
    return report


# -- sampling ------------------------------------------------------------------
def _per_sample_noise(rng: Rng, batch: int, shape: tuple[int, ...], *keys: object) -> np.ndarray:
    return np.stack([rng.derive("sample", n, *keys).normal(size=shape) for n in range(batch)])


def reverse_generate(
    denoiser: Denoiser,
    schedule: NoiseSchedule,
    z_start: np.ndarray,
    cond: Conditioning,
    start_t: int,
    rng: Rng,
) -> np.ndarray:
    """Ancestral sampling from ``z_start`` at ``start_t`` down to ``z_0``.

    Each step uses the reverse mean computed from ``ε_θ`` and variance β_t;
    the final step adds no noise.
    """
    if not denoiser.trained:
        raise UntrainedModelError("denoiser")
    start_t = schedule.check_step(start_t)
    z = np.asarray(z_start, dtype=np.float64)
    batch = z.shape[0]
    denoiser.eval()
    with no_grad():
        for t in range(start_t, 0, -1):
            eps = denoiser(z, np.full(batch, t), cond).data
            z = posterior_mean(schedule, z, t, eps)
            if t > 1:
                noise = _per_sample_noise(rng, batch, z.shape[1:], "step", t)
                z = z + math.sqrt(schedule.beta(t)) * noise
    return z


def generate(
    codec: LatentCodec,
    denoiser: Denoiser,
    schedule: NoiseSchedule,
    cond: Conditioning,
    rng: Rng,
) -> np.ndarray:
    """Generate images from pure noise."""
    shape = (codec.latent_channels, codec.latent_size, codec.latent_size)
    z_t = _per_sample_noise(rng.derive("init"), len(cond), shape)
    return codec.decode(reverse_generate(denoiser, schedule, z_t, cond, schedule.steps, rng))


def img2img_start(schedule: NoiseSchedule, strength: float) -> int:
    """Return the start step ``t = ⌈s·T⌉`` (at least 1) for strength ``s``."""
    if not 0.0 < strength <= 1.0:
        raise ConfigError(f"img2img strength must lie in (0, 1], got {strength}")
    return max(1, math.ceil(strength * schedule.steps - 1e-9))


def img2img_refine(
    codec: LatentCodec,
    denoiser: Denoiser,
    schedule: NoiseSchedule,
    guess: np.ndarray,
    cond: Conditioning,
    strength: float,
    rng: Rng,
) -> np.ndarray:
    """Encode ``guess``, noise it to ``t = ⌈s·T⌉`` and reverse back to an image."""
    start = img2img_start(schedule, strength)
    if not codec.trained:
        raise UntrainedModelError("latent codec")
    guess = np.asarray(guess, dtype=np.float64)
    if guess.ndim == 3:
        guess = guess[None]
    z0 = codec.encode(guess)
    eps = _per_sample_noise(rng.derive("forward"), z0.shape[0], z0.shape[1:])
    z_t = forward_diffuse(schedule, z0, start, rng, eps=eps)
    return codec.decode(reverse_generate(denoiser, schedule, z_t, cond, start, rng))


# -- guess perturbation ----------------------------------------------------------
def perturb_guess(
    image: np.ndarray,
    amplitude: int,
    rng: Rng,
    allowed: Sequence[int] = DEFAULT_AMPLITUDES,
    allow_arbitrary: bool = False,
) -> np.ndarray:
    """Add ``A·n``, ``n ~ N(0, 1)`` per pixel to an 8-bit image and clip to [0, 255].

    ``A = 256`` is the pure-noise condition: the guess is replaced by
    mid-grey plus ``256·n``. The result is rounded back onto the 8-bit grid.
    """
    if not allow_arbitrary and amplitude not in allowed:
        raise ConfigError(f"amplitude {amplitude} not in {list(allowed)}")
    if amplitude < 0:
        raise ConfigError(f"amplitude must be non-negative, got {amplitude}")
    image = np.asarray(image, dtype=np.float64)
    if image.size and (image.min() < 0 or image.max() > 255):
        raise ConfigError("perturb_guess expects 8-bit pixel values in [0, 255]")
    if amplitude == 0:
        return image.copy()
    noise = amplitude * rng.normal(size=image.shape)
    base = np.full_like(image, MID_GREY) if amplitude == PURE_NOISE_AMPLITUDE else image
    return np.rint(np.clip(base + noise, 0.0, 255.0))

"""Toy hierarchical VAE with externally injectable top-down latents."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from neurodecode.core import functional as F
from neurodecode.core.nn import Conv2d, Module, Parameter
from neurodecode.core.optim import Adam
from neurodecode.core.rng import Rng
from neurodecode.core.tensor import Tensor, as_tensor, no_grad
from neurodecode.schemas.config import HvaeConfig
from neurodecode.schemas.reports import HvaeEpoch, HvaeReport
from neurodecode.utils.errors import (
    ConfigError,
    DimensionError,
    NumericError,
    UntrainedModelError,
)

logger = logging.getLogger(__name__)

LOG_SIGMA_BOUND = 8.0


def _factor(high: int, low: int) -> int:
    if high % low:
        raise ConfigError(f"resolution {high} is not a multiple of {low}")
    return high // low


def gaussian_kl(
    mu_q: Tensor, log_sigma_q: Tensor, mu_p: Tensor, log_sigma_p: Tensor
) -> Tensor:
    """Elementwise KL(N(mu_q, σ_q²) ‖ N(mu_p, σ_p²))."""
    var_q = F.exp(F.mul(log_sigma_q, 2.0))
    var_p = F.exp(F.mul(log_sigma_p, 2.0))
    diff = F.sub(mu_q, mu_p)
    ratio = F.div(F.add(var_q, F.mul(diff, diff)), F.mul(var_p, 2.0))
    return F.sub(F.add(F.sub(log_sigma_p, log_sigma_q), ratio), 0.5)


def flatten_latent(z: np.ndarray) -> np.ndarray:
    """Lay out ``z[N, 16, r, r]`` as ``[N, r*r*16]``: row-major slots, 16 values each."""
    n, width, r, _ = z.shape
    return z.transpose(0, 2, 3, 1).reshape(n, r * r * width)


def unflatten_latent(values: np.ndarray, resolution: int, width: int) -> np.ndarray:
    """Invert :func:`flatten_latent`."""
    n = values.shape[0]
    return values.reshape(n, resolution, resolution, width).transpose(0, 3, 1, 2)


class TopDownBlock(Module):
    """One decoder layer: prior, posterior, latent merge and residual conv."""

    def __init__(self, channels: int, width: int, resolution: int, rng: Rng) -> None:
        super().__init__()
        self.resolution = resolution
        self.width = width
        self.prior = Conv2d(channels, 2 * width, 1, rng.derive("prior"))
        self.posterior = Conv2d(2 * channels, 2 * width, 1, rng.derive("posterior"))
        self.merge = Conv2d(width, channels, 1, rng.derive("merge"))
        self.residual = Conv2d(channels, channels, 3, rng.derive("residual"), padding=1)

    def _split(self, stats: Tensor) -> tuple[Tensor, Tensor]:
        mu = stats[:, : self.width]
        log_sigma = F.clip(stats[:, self.width :], -LOG_SIGMA_BOUND, LOG_SIGMA_BOUND)
        return mu, log_sigma

    def prior_stats(self, state: Tensor) -> tuple[Tensor, Tensor]:
        """Return the conditional prior (μ, log σ) given the decoder state."""
        return self._split(self.prior(state))

    def posterior_stats(self, state: Tensor, feature: Tensor) -> tuple[Tensor, Tensor]:
        """Return the posterior (μ, log σ) from decoder state and encoder feature."""
        return self._split(self.posterior(F.concat([state, feature], axis=1)))

    def absorb(self, state: Tensor, z: Tensor) -> Tensor:
        """Merge latent ``z`` through the 1×1 convolution, then apply the residual conv."""
        state = F.add(state, self.merge(z))
        return F.add(state, self.residual(F.relu(state)))


@dataclass
class HvaeEncoding:
    """Posterior means of every layer plus the injected LatentVector."""

    latents: np.ndarray
    mu: list[np.ndarray] = field(default_factory=list)
    sigma: list[np.ndarray] = field(default_factory=list)


class Hvae(Module):
    """Bottom-up encoder pyramid and top-down decoder over ``[N, 3, S, S]`` images.

    Layer ``i`` works at ``cfg.layer_resolutions[i]`` and holds ``r²`` slots
    of ``latent_width`` values. The first ``cfg.injected_layers`` layers form
    the LatentVector predicted by stage 1; their values come first in the
    flattened layout, top layer first.
    """

    def __init__(self, cfg: HvaeConfig, image_size: int, rng: Rng) -> None:
        super().__init__()
        self.cfg = cfg
        self.image_size = image_size
        channels = cfg.channels
        self.resolutions = list(cfg.layer_resolutions)
        self.levels = sorted(set(self.resolutions), reverse=True)
        for level in self.levels:
            _factor(image_size, level)
        self.stem = Conv2d(3, channels, 3, rng.derive("stem"), padding=1)
        self.pyramid = [
            Conv2d(channels, channels, 3, rng.derive("pyramid", level), padding=1)
            for level in self.levels
        ]
        self.top = Parameter(np.zeros((1, channels, self.resolutions[0], self.resolutions[0])))
        self.blocks = [
            TopDownBlock(channels, cfg.latent_width, r, rng.derive("block", i))
            for i, r in enumerate(self.resolutions)
        ]
        self.out = Conv2d(channels, 3, 3, rng.derive("out"), padding=1)
        self.trained = False

    @property
    def slot_counts(self) -> list[int]:
        """Return the number of slots in every layer."""
        return [r * r for r in self.resolutions]

    def injected_length(self, layers: int | None = None) -> int:
        """Return the LatentVector length for the first ``layers`` layers."""
        return self.cfg.slots(layers) * self.cfg.latent_width

    def _check_images(self, images: np.ndarray | Tensor) -> Tensor:
        x = as_tensor(images)
        if x.ndim == 3:
            x = F.reshape(x, (1, *x.shape))
        expected = (3, self.image_size, self.image_size)
        if x.ndim != 4 or x.shape[1:] != expected:
            raise DimensionError(f"HVAE expects images [N, {expected}], got {x.shape}")
        return x

    def features(self, images: Tensor) -> dict[int, Tensor]:
        """Run the bottom-up pyramid, returning one feature map per resolution."""
        h = self.stem(images)
        current = self.image_size
        feats: dict[int, Tensor] = {}
        for level, conv in zip(self.levels, self.pyramid, strict=True):
            h = F.avg_pool2d(h, _factor(current, level))
            h = F.add(h, conv(F.relu(h)))
            feats[level] = h
            current = level
        return feats

    def _initial_state(self, batch: int) -> Tensor:
        return F.add(self.top, Tensor(np.zeros((batch, *self.top.shape[1:]))))

    def _grow(self, state: Tensor, resolution: int) -> Tensor:
        current = state.shape[-1]
        if current == resolution:
            return state
        return F.upsample_nearest2d(state, _factor(resolution, current))

    def _render(self, state: Tensor) -> Tensor:
        state = self._grow(state, self.image_size)
        return F.sigmoid(self.out(F.relu(state)))

    def elbo(
        self, images: np.ndarray | Tensor, rng: Rng
    ) -> tuple[Tensor, Tensor, Tensor, list[float]]:
        """Return (loss, reconstruction term, KL term, per-layer mean slot KL) for a batch.

        The loss is the Gaussian reconstruction error plus, per slot, the
        batch-averaged KL floored at ``free_bits``.
        """
        x = self._check_images(images)
        batch = x.shape[0]
        feats = self.features(x)
        state = self._initial_state(batch)
        kl_terms: list[Tensor] = []
        layer_kl: list[float] = []
        for index, block in enumerate(self.blocks):
            state = self._grow(state, block.resolution)
            mu_p, ls_p = block.prior_stats(state)
            mu_q, ls_q = block.posterior_stats(state, feats[block.resolution])
            eps = rng.derive("layer", index).normal(size=mu_q.shape)
            z = F.add(mu_q, F.mul(F.exp(ls_q), eps))
            kl = gaussian_kl(mu_q, ls_q, mu_p, ls_p)
            per_slot = F.mean(F.sum(kl, axis=1), axis=0)
            layer_kl.append(float(per_slot.data.mean()))
            kl_terms.append(F.sum(F.maximum(per_slot, self.cfg.free_bits)))
            state = block.absorb(state, z)
        recon_image = self._render(state)
        diff = F.sub(recon_image, x)
        scale = 1.0 / (2.0 * self.cfg.sigma_x**2 * batch)
        recon = F.mul(F.sum(F.mul(diff, diff)), scale)
        kl_total = F.total(kl_terms)
        return F.add(recon, kl_total), recon, kl_total, layer_kl

    def _posterior_pass(self, x: Tensor) -> tuple[list[np.ndarray], list[np.ndarray], Tensor]:
        feats = self.features(x)
        state = self._initial_state(x.shape[0])
        mus, sigmas = [], []
        for block in self.blocks:
            state = self._grow(state, block.resolution)
            mu_q, ls_q = block.posterior_stats(state, feats[block.resolution])
            mus.append(mu_q.data)
            sigmas.append(np.exp(ls_q.data))
            state = block.absorb(state, mu_q)
        return mus, sigmas, state

    def encode(self, images: np.ndarray, require_trained: bool = True) -> HvaeEncoding:
        """Return posterior means (the stage-1 targets) and per-layer (μ, σ)."""
        if require_trained and not self.trained:
            raise UntrainedModelError("hvae")
        self.eval()
        with no_grad():
            mus, sigmas, _ = self._posterior_pass(self._check_images(images))
        k = self.cfg.injected_layers
        flat = [flatten_latent(mu) for mu in mus[:k]]
        batch = mus[0].shape[0]
        latents = np.concatenate(flat, axis=1) if flat else np.zeros((batch, 0))
        return HvaeEncoding(latents=latents, mu=mus, sigma=sigmas)

    def reconstruct(self, images: np.ndarray) -> np.ndarray:
        """Decode the full posterior-mean path of ``images``."""
        self.eval()
        with no_grad():
            _, _, state = self._posterior_pass(self._check_images(images))
            return np.clip(self._render(state).data, 0.0, 1.0)

    def decode_with_injected(
        self,
        latents: np.ndarray,
        rng: Rng,
        layers: int | None = None,
        temperature: float = 1.0,
        trace: list[np.ndarray] | None = None,
    ) -> np.ndarray:
        """Decode images whose first ``layers`` layers use the given latents.

        Layers past the injected ones sample their conditional prior. Sample
        ``n`` draws its noise from ``rng.derive("sample", n)``, so a sample's
        output does not depend on the rest of the batch. When ``trace`` is a
        list, every layer's decoder state is appended to it.
        """
        k = self.cfg.injected_layers if layers is None else layers
        if not 0 <= k <= len(self.blocks):
            raise ConfigError(f"injected layer count {k} outside 0..{len(self.blocks)}")
        values = np.atleast_2d(np.asarray(latents, dtype=np.float64))
        expected = self.injected_length(k)
        if values.shape[1] != expected:
            raise DimensionError(
                f"injected latents have length {values.shape[1]}, expected {expected}"
            )
        batch = values.shape[0]
        self.eval()
        with no_grad():
            state = self._initial_state(batch)
            offset = 0
            for index, block in enumerate(self.blocks):
                state = self._grow(state, block.resolution)
                if index < k:
                    length = block.resolution**2 * block.width
                    chunk = values[:, offset : offset + length]
                    z = Tensor(unflatten_latent(chunk, block.resolution, block.width))
                    offset += length
                else:
                    mu_p, ls_p = block.prior_stats(state)
                    eps = np.stack(
                        [
                            rng.derive("sample", n, "layer", index).normal(size=mu_p.shape[1:])
                            for n in range(batch)
                        ]
                    )
                    z = F.add(mu_p, F.mul(F.exp(ls_p), eps * temperature))
                state = block.absorb(state, z)
                if trace is not None:
                    trace.append(state.data.copy())
            return np.clip(self._render(state).data, 0.0, 1.0)

    def sample(self, n: int, rng: Rng, temperature: float = 1.0) -> np.ndarray:
        """Draw ``n`` unconditional samples."""
        return self.decode_with_injected(np.zeros((n, 0)), rng, layers=0, temperature=temperature)


def train_hvae(
    model: Hvae, images: np.ndarray, cfg: HvaeConfig, rng: Rng
) -> HvaeReport:
    """Minimize the negative ELBO with Adam and mark the model trained.

    A layer counts as active when its mean per-slot KL exceeds the free-bits
    floor; no active layer after the last epoch is reported as KL collapse.
    """
    images = np.asarray(images, dtype=np.float64)
    n = images.shape[0]
    if n == 0:
        raise ConfigError("HVAE training needs at least one image")
    optimizer = Adam(model.parameters(), lr=cfg.lr)
    report = HvaeReport()
    model.train()
    for epoch in range(1, cfg.epochs + 1):
        order = rng.derive("epoch", epoch).permutation(n)
        totals = np.zeros(3)
        layer_kl = np.zeros(len(model.blocks))
        batches = 0
        for batch_index, start in enumerate(range(0, n, cfg.batch_size)):
            rows = order[start : start + cfg.batch_size]
            optimizer.zero_grad()
            try:
                loss, recon, kl, per_layer = model.elbo(
                    images[rows], rng.derive("noise", epoch, batch_index)
                )
                loss.backward()
                optimizer.step()
            except NumericError as exc:
                raise NumericError(
                    f"train_hvae diverged at epoch {epoch} batch {batch_index} "
                    f"(lr {cfg.lr}): {exc.message}"
                ) from exc
            totals += (loss.item(), recon.item(), kl.item())
            layer_kl += per_layer
            batches += 1
        totals /= batches
        layer_kl /= batches
        active = int(np.sum(layer_kl > cfg.free_bits))
        report.rows.append(
            HvaeEpoch(
                epoch=epoch, loss=totals[0], recon=totals[1], kl=totals[2], active_layers=active
            )
        )
        logger.info(
            "hvae epoch %s loss=%.3f recon=%.3f kl=%.3f active=%s",
            epoch,
            totals[0],
            totals[1],
            totals[2],
            active,
        )
    if report.rows and report.rows[-1].active_layers == 0:
        report.kl_collapse = True
        message = "every HVAE layer is under the free-bits floor (KL collapse)"
        report.warnings.append(message)
        logger.warning(message)
    model.trained = True
    model.eval()
    logger.info("train_hvae completed for %s epochs on %s images", cfg.epochs, n)
    return report

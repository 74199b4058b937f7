"""Latent diffusion training service."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Any

from neurodecode.diffusion import (
    Conditioning,
    Denoiser,
    LatentCodec,
    NoiseSchedule,
    generate,
    train_codec,
    train_denoiser,
)
from neurodecode.schemas.config import DiffusionConfig, ExperimentConfig
from neurodecode.services import embed_service, synth_service
from neurodecode.services.common import ArtifactStore, ensure_trainable, stage_rng
from neurodecode.utils.errors import ConfigError

PRODUCER = "train-ldm"
CODEC = "ldm/codec.ndta"
DENOISER = "ldm/denoiser.ndta"
SCHEDULE = "ldm/schedule.ndtn"
META_JSON = "ldm/checkpoint.json"
SAMPLE_COUNT = 4
logger = logging.getLogger(__name__)

# Fields that change parameter shapes; the rest only affect training or sampling.
_SHAPE_FIELDS = (
    "latent_channels",
    "codec_downsample",
    "codec_channels",
    "channels",
    "time_dim",
    "mechanism",
)


@dataclass
class LatentDiffusion:
    """A trained codec, denoiser and schedule ready for sampling."""

    codec: LatentCodec
    denoiser: Denoiser
    schedule: NoiseSchedule


def _build(cfg: ExperimentConfig, diffusion: DiffusionConfig, cond_dim: int) -> LatentDiffusion:
    rng = stage_rng(cfg, "ldm")
    codec = LatentCodec(diffusion, cfg.dataset.image_size, rng.derive("codec"))
    denoiser = Denoiser(
        diffusion,
        diffusion.latent_channels,
        codec.latent_size,
        cond_dim,
        rng.derive("denoiser"),
    )
    return LatentDiffusion(codec, denoiser, NoiseSchedule.from_config(diffusion))


class LdmService:
    """Train the latent codec, then the conditional denoiser on true embeddings."""

    def __init__(self, store: ArtifactStore, cfg: ExperimentConfig) -> None:
        self.store = store
        self.cfg = cfg

    def run(self) -> dict[str, Any]:
        """Train both networks on the training split and draw samples from pure noise."""
        ensure_trainable(self.cfg, PRODUCER)
        diffusion = self.cfg.diffusion
        rng = stage_rng(self.cfg, "ldm")
        with self.store.stage(PRODUCER, self.cfg) as store:
            images = synth_service.load_images(store)
            vision, text = embed_service.load_embeddings(store)
            train_ids, test_ids = synth_service.load_split(store)
            cond = Conditioning(vision, text)
            model = _build(self.cfg, diffusion, cond.dim)
            codec_report = train_codec(
                model.codec,
                images[train_ids],
                diffusion,
                rng.derive("codec_train"),
                val_images=images[test_ids],
            )
            latents = model.codec.encode(images)
            denoiser_report = train_denoiser(
                model.denoiser,
                model.schedule,
                latents[train_ids],
                cond.take(train_ids),
                diffusion,
                rng.derive("denoiser_train"),
                val=(latents[test_ids], cond.take(test_ids)),
            )
            store.save_archive(CODEC, model.codec.state_dict())
            store.save_archive(DENOISER, model.denoiser.state_dict())
            store.save_tensor(SCHEDULE, model.schedule.betas)
            store.save_json(
                META_JSON,
                {
                    "config": diffusion.model_dump(mode="json"),
                    "cond_dim": cond.dim,
                    "image_size": self.cfg.dataset.image_size,
                    "latent_shape": list(latents.shape[1:]),
                },
            )
            store.save_json(
                "ldm/report.json",
                {
                    "codec": codec_report.model_dump(mode="json"),
                    "denoiser": denoiser_report.model_dump(mode="json"),
                    "denoiser_ratio": denoiser_report.ratio,
                },
            )
            store.save_csv("ldm/codec_report.csv", [r.model_dump() for r in codec_report.rows])
            store.save_csv(
                "ldm/denoiser_report.csv", [r.model_dump() for r in denoiser_report.rows]
            )
            sample_ids = test_ids[:SAMPLE_COUNT]
            samples = generate(
                model.codec,
                model.denoiser,
                model.schedule,
                cond.take(sample_ids),
                rng.derive("samples"),
            )
            for stimulus_id, sample in zip(sample_ids, samples, strict=True):
                store.save_ppm(f"ldm/samples/{int(stimulus_id):04d}.ppm", sample)
        logger.info(
            "train-ldm: codec PSNR %.2f dB, denoiser loss ratio %s",
            codec_report.val_psnr,
            denoiser_report.ratio,
        )
        return {"codec_val_psnr": codec_report.val_psnr, "denoiser_ratio": denoiser_report.ratio}


def load_ldm(store: ArtifactStore, cfg: ExperimentConfig) -> LatentDiffusion:
    """Rebuild the trained codec, denoiser and schedule from the saved config."""
    meta = store.load_json(META_JSON, PRODUCER)
    saved = DiffusionConfig.model_validate(meta["config"])
    changed = [f for f in _SHAPE_FIELDS if getattr(saved, f) != getattr(cfg.diffusion, f)]
    if changed:
        raise ConfigError(f"ldm checkpoint differs from the config in {changed}; rerun train-ldm")
    if meta["image_size"] != cfg.dataset.image_size:
        raise ConfigError("ldm checkpoint was trained at another image size; rerun train-ldm")
    model = _build(cfg, saved, meta["cond_dim"])
    model.codec.load_state_dict(store.load_archive(CODEC, PRODUCER))
    model.denoiser.load_state_dict(store.load_archive(DENOISER, PRODUCER))
    model.codec.trained = True
    model.denoiser.trained = True
    model.codec.eval()
    model.denoiser.eval()
    return model

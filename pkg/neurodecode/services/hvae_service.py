"""Hierarchical VAE training service."""

from __future__ import annotations

import logging
from typing import Any

from neurodecode.hvae import Hvae, train_hvae
from neurodecode.schemas.config import ExperimentConfig
from neurodecode.services import synth_service
from neurodecode.services.common import ArtifactStore, ensure_trainable, stage_rng
from neurodecode.utils.errors import ConfigError

PRODUCER = "train-hvae"
CHECKPOINT = "hvae/checkpoint.ndta"
META_JSON = "hvae/checkpoint.json"
LATENTS = "hvae/latents.ndtn"
SAMPLE_COUNT = 4
logger = logging.getLogger(__name__)


class HvaeService:
    """Train the hierarchical VAE and export the stage-1 latent targets."""

    def __init__(self, store: ArtifactStore, cfg: ExperimentConfig) -> None:
        self.store = store
        self.cfg = cfg

    def run(self) -> dict[str, Any]:
        """Train on the training split and encode every stimulus."""
        ensure_trainable(self.cfg, PRODUCER)
        rng = stage_rng(self.cfg, "hvae")
        with self.store.stage(PRODUCER, self.cfg) as store:
            images = synth_service.load_images(store)
            train_ids, _ = synth_service.load_split(store)
            model = Hvae(self.cfg.hvae, self.cfg.dataset.image_size, rng.derive("init"))
            report = train_hvae(model, images[train_ids], self.cfg.hvae, rng.derive("train"))
            store.save_archive(CHECKPOINT, model.state_dict())
            store.save_json(
                META_JSON,
                {
                    "config": self.cfg.hvae.model_dump(mode="json"),
                    "image_size": self.cfg.dataset.image_size,
                    "latent_length": model.injected_length(),
                },
            )
            store.save_tensor(LATENTS, model.encode(images).latents)
            store.save_json("hvae/report.json", report.model_dump(mode="json"))
            store.save_csv("hvae/report.csv", [row.model_dump() for row in report.rows])
            samples = model.sample(SAMPLE_COUNT, rng.derive("samples"))
            for index, sample in enumerate(samples):
                store.save_ppm(f"hvae/samples/{index:02d}.ppm", sample)
        return {"epochs": len(report.rows), "kl_collapse": report.kl_collapse}


def load_hvae(store: ArtifactStore, cfg: ExperimentConfig) -> Hvae:
    """Rebuild the trained HVAE, rejecting a config whose latent layout differs."""
    meta = store.load_json(META_JSON, PRODUCER)
    saved = meta["config"]
    if (
        saved["injected_layers"] != cfg.hvae.injected_layers
        or saved["layer_resolutions"] != cfg.hvae.layer_resolutions
    ):
        raise ConfigError(
            f"hvae checkpoint was trained with K={saved['injected_layers']} over "
            f"{saved['layer_resolutions']}; config asks for K={cfg.hvae.injected_layers} "
            f"over {cfg.hvae.layer_resolutions}"
        )
    model = Hvae(cfg.hvae, cfg.dataset.image_size, stage_rng(cfg, "hvae").derive("init"))
    model.load_state_dict(store.load_archive(CHECKPOINT, PRODUCER))
    model.trained = True
    model.eval()
    return model


def load_latents(store: ArtifactStore) -> Any:
    """Return ``[N, L]`` posterior-mean latent targets."""
    return store.load_tensor(LATENTS, PRODUCER)

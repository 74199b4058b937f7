"""Beta to embedding ridge regression service."""

from __future__ import annotations

import logging
from typing import Any

import numpy as np

from neurodecode import ridge
from neurodecode.diffusion import Conditioning
from neurodecode.schemas.config import ExperimentConfig
from neurodecode.services import embed_service, glm_service, synth_service
from neurodecode.services.common import ArtifactStore, ensure_trainable, subject_path

PRODUCER = "fit-ridge-embed"
DIRECTORY = "ridge_embed"
TARGETS = ("vision", "text")
logger = logging.getLogger(__name__)


def _pooled_cosine(pred: np.ndarray, true: np.ndarray) -> float:
    return float(np.mean(np.sum(pred[:, 0] * true[:, 0], axis=-1)))


def ridge_path(subject: int, name: str) -> str:
    """Return a ridge-embed artifact path of ``subject``."""
    return subject_path(DIRECTORY, subject, name)


class RidgeEmbedService:
    """Fit one ridge map per embedding modality from z-scored betas."""

    def __init__(self, store: ArtifactStore, cfg: ExperimentConfig) -> None:
        self.store = store
        self.cfg = cfg

    def run(self) -> dict[str, Any]:
        """Fit on training stimuli and score pooled-row cosine on the test split."""
        ensure_trainable(self.cfg, PRODUCER)
        alpha = self.cfg.ridge_embed.alpha
        subject = self.cfg.subject
        summary: dict[str, Any] = {"alpha": alpha, "subject": subject}
        with self.store.stage(PRODUCER, self.cfg, f"s{subject}") as store:
            betas = glm_service.load_betas(store, subject)
            targets = dict(zip(TARGETS, embed_service.load_embeddings(store), strict=True))
            train_ids, test_ids = synth_service.load_split(store)
            for name in TARGETS:
                model = ridge.fit(betas[train_ids], targets[name][train_ids], alpha)
                store.save_archive(ridge_path(subject, f"{name}.ndta"), model.to_arrays())
                store.save_json(
                    ridge_path(subject, f"{name}.json"),
                    model.meta() | {"config": self.cfg.ridge_embed.model_dump(mode="json")},
                )
                pred = ridge.predict_batch(model, betas[test_ids])
                summary[f"{name}_test_cosine"] = _pooled_cosine(pred, targets[name][test_ids])
                summary[f"{name}_solver"] = model.solver
                logger.info(
                    "ridge-embed %s: solver %s, pooled test cosine %.3f",
                    name,
                    model.solver,
                    summary[f"{name}_test_cosine"],
                )
            store.save_json(ridge_path(subject, "report.json"), summary)
        return summary


def load_ridge_models(store: ArtifactStore, subject: int) -> dict[str, ridge.RidgeModel]:
    """Rebuild both ridge maps fitted for ``subject``."""
    return {
        name: ridge.RidgeModel.from_arrays(
            store.load_archive(ridge_path(subject, f"{name}.ndta"), PRODUCER),
            store.load_json(ridge_path(subject, f"{name}.json"), PRODUCER),
        )
        for name in TARGETS
    }


def predict_conditioning(store: ArtifactStore, betas: np.ndarray, subject: int) -> Conditioning:
    """Predict row-normalized vision and text embeddings for ``betas[M, V]`` of ``subject``."""
    models = load_ridge_models(store, subject)
    return Conditioning(
        ridge.predict_batch(models["vision"], betas), ridge.predict_batch(models["text"], betas)
    )

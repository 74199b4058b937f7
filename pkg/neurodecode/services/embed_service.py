"""Contrastive embedding and metric classifier service."""

from __future__ import annotations

import logging
from typing import Any

import numpy as np

from neurodecode.contrastive import (
    DualEncoder,
    SemanticClassifier,
    embed_image,
    embed_text,
    train_classifier,
    train_dual_encoder,
)
from neurodecode.metrics import (
    FeatureExtractor,
    classifier_extractor,
    contrastive_extractor,
    random_extractor,
)
from neurodecode.schemas.config import ExperimentConfig
from neurodecode.services import synth_service
from neurodecode.services.common import ArtifactStore, ensure_trainable, stage_rng
from neurodecode.utils.errors import ConfigError

PRODUCER = "train-embed"
ENCODER = "embed/dual_encoder.ndta"
CLASSIFIER = "embed/classifier.ndta"
VISION = "embed/vision.ndtn"
TEXT = "embed/text.ndtn"
logger = logging.getLogger(__name__)


class EmbedService:
    """Train the dual encoder and the semantic classifier; dump true embeddings."""

    def __init__(self, store: ArtifactStore, cfg: ExperimentConfig) -> None:
        self.store = store
        self.cfg = cfg

    def run(self) -> dict[str, Any]:
        """Train on the training split; score retrieval on the test split."""
        ensure_trainable(self.cfg, PRODUCER)
        embed_cfg = self.cfg.embed
        size = self.cfg.dataset.image_size
        rng = stage_rng(self.cfg, "embed")
        with self.store.stage(PRODUCER, self.cfg) as store:
            images = synth_service.load_images(store)
            captions = synth_service.load_captions(store, embed_cfg.max_tokens)
            labels = synth_service.load_labels(store)
            vocabulary = synth_service.load_vocabulary(store)
            train_ids, test_ids = synth_service.load_split(store)
            encoder = DualEncoder(embed_cfg, size, len(vocabulary), rng.derive("encoder"))
            report = train_dual_encoder(
                encoder,
                images[train_ids],
                captions[train_ids],
                embed_cfg,
                rng.derive("train"),
                val=(images[test_ids], captions[test_ids]),
            )
            classifier = SemanticClassifier(
                size, self.cfg.dataset.n_classes, embed_cfg.channels, rng.derive("classifier")
            )
            report.classifier_accuracy = train_classifier(
                classifier, images[train_ids], labels[train_ids], embed_cfg, rng.derive("cls")
            )
            store.save_archive(ENCODER, encoder.state_dict())
            store.save_archive(CLASSIFIER, classifier.state_dict())
            store.save_tensor(VISION, embed_image(encoder, images))
            store.save_tensor(TEXT, embed_text(encoder, captions))
            store.save_json(
                "embed/checkpoint.json",
                {
                    "config": embed_cfg.model_dump(mode="json"),
                    "vocab_size": len(vocabulary),
                    "image_size": size,
                    "n_classes": self.cfg.dataset.n_classes,
                },
            )
            store.save_json("embed/report.json", report.model_dump(mode="json"))
            store.save_csv("embed/report.csv", [row.model_dump() for row in report.rows])
        return report.model_dump(mode="json")


def load_dual_encoder(store: ArtifactStore, cfg: ExperimentConfig) -> DualEncoder:
    """Rebuild the trained dual encoder."""
    meta = store.load_json("embed/checkpoint.json", PRODUCER)
    if meta["config"]["dim"] != cfg.embed.dim or meta["config"]["grid"] != cfg.embed.grid:
        raise ConfigError("embedding checkpoint shape differs from the config; rerun train-embed")
    model = DualEncoder(
        cfg.embed, cfg.dataset.image_size, meta["vocab_size"], stage_rng(cfg, "embed").derive("x")
    )
    model.load_state_dict(store.load_archive(ENCODER, PRODUCER))
    model.trained = True
    model.eval()
    return model


def load_classifier(store: ArtifactStore, cfg: ExperimentConfig) -> SemanticClassifier:
    """Rebuild the trained semantic classifier."""
    model = SemanticClassifier(
        cfg.dataset.image_size,
        cfg.dataset.n_classes,
        cfg.embed.channels,
        stage_rng(cfg, "embed").derive("x"),
    )
    model.load_state_dict(store.load_archive(CLASSIFIER, PRODUCER))
    model.eval()
    return model


def load_embeddings(store: ArtifactStore) -> tuple[np.ndarray, np.ndarray]:
    """Return the true (vision, text) embedding rows of every stimulus."""
    return store.load_tensor(VISION, PRODUCER), store.load_tensor(TEXT, PRODUCER)


def metric_extractors(store: ArtifactStore, cfg: ExperimentConfig) -> list[FeatureExtractor]:
    """Build the feature extractors named in the metric config."""
    names = cfg.metrics.extractors
    extractors: list[FeatureExtractor] = []
    encoder = load_dual_encoder(store, cfg) if "contrastive" in names else None
    classifier = (
        load_classifier(store, cfg) if any(n.startswith("classifier_") for n in names) else None
    )
    for name in names:
        if name == "contrastive":
            extractors.append(contrastive_extractor(encoder))
        elif name.startswith("classifier_"):
            extractors.append(classifier_extractor(classifier, name.removeprefix("classifier_")))
        elif name == "random":
            extractors.append(
                random_extractor(
                    cfg.dataset.image_size,
                    cfg.metrics.random_projection_dim,
                    stage_rng(cfg, "metrics").derive("random"),
                )
            )
        else:
            raise ConfigError(f"unknown feature extractor {name!r}")
    return extractors

"""Two-stage reconstruction of the test split."""

from __future__ import annotations

import logging
from collections.abc import Sequence
from dataclasses import dataclass
from typing import Any

import numpy as np

from neurodecode.core.rng import Rng
from neurodecode.diffusion import Conditioning, img2img_refine
from neurodecode.metrics import evaluate
from neurodecode.schemas.config import ExperimentConfig
from neurodecode.schemas.reports import MetricReport
from neurodecode.services import (
    embed_service,
    glm_service,
    hvae_service,
    ldm_service,
    ridge_embed_service,
    stage1_service,
    synth_service,
)
from neurodecode.services.common import (
    ArtifactStore,
    ensure_trainable,
    stage_rng,
    subject_path,
)
from neurodecode.utils.imageio import quantize

PRODUCER = "reconstruct"
DIRECTORY = "reconstruct"
LABELS = ("stage1", "stage2", "prior")
logger = logging.getLogger(__name__)


def reconstruct_path(subject: int, name: str) -> str:
    """Return a reconstruction artifact path of ``subject``."""
    return subject_path(DIRECTORY, subject, name)


def guess_ppm(subject: int, stimulus_id: int) -> str:
    """Return the stage-1 guess image path of a stimulus."""
    return reconstruct_path(subject, f"guess/{stimulus_id:04d}.ppm")


def refined_ppm(subject: int, stimulus_id: int) -> str:
    """Return the refined image path of a stimulus."""
    return reconstruct_path(subject, f"refined/{stimulus_id:04d}.ppm")


def refine_rng(cfg: ExperimentConfig) -> Rng:
    """Stream shared by reconstruct and every sweep amplitude."""
    return stage_rng(cfg, PRODUCER).derive("refine")


@dataclass
class HeldOutInputs:
    """Everything the refinement stage needs for the test split."""

    stimulus_ids: np.ndarray
    betas: np.ndarray
    truths: np.ndarray
    cond: Conditioning


def load_test_inputs(store: ArtifactStore, cfg: ExperimentConfig) -> HeldOutInputs:
    """Load test truths and predict their conditioning from the subject's test betas."""
    _, test_ids = synth_service.load_split(store)
    betas = glm_service.load_betas(store, cfg.subject)[test_ids]
    truths = synth_service.load_images(store)[test_ids]
    cond = ridge_embed_service.predict_conditioning(store, betas, cfg.subject)
    return HeldOutInputs(test_ids, betas, truths, cond)


def save_metric_report(
    store: ArtifactStore, relative: str, report: MetricReport, stimulus_ids: Sequence[int]
) -> dict[str, Any]:
    """Write per-sample rows keyed by stimulus id and return the aggregate row."""
    rows = [
        {"stimulus_id": int(stimulus_id), **sample}
        for stimulus_id, sample in zip(stimulus_ids, report.samples, strict=True)
    ]
    store.save_csv(relative, rows)
    store.save_json(relative.removesuffix(".csv") + ".json", report.model_dump(mode="json"))
    return {"label": report.label, "n": len(rows), **report.aggregate}


class ReconstructService:
    """Decode stage-1 guesses from betas, then refine them with latent diffusion."""

    def __init__(self, store: ArtifactStore, cfg: ExperimentConfig) -> None:
        self.store = store
        self.cfg = cfg

    def run(self) -> dict[str, Any]:
        """Reconstruct every test stimulus and score both stages."""
        ensure_trainable(self.cfg, PRODUCER)
        rng = stage_rng(self.cfg, PRODUCER)
        subject = self.cfg.subject
        with self.store.stage(PRODUCER, self.cfg, f"s{subject}") as store:
            hvae = hvae_service.load_hvae(store, self.cfg)
            predictor = stage1_service.load_stage1(store, self.cfg)
            ldm = ldm_service.load_ldm(store, self.cfg)
            inputs = load_test_inputs(store, self.cfg)
            test_ids = inputs.stimulus_ids
            latents = predictor(inputs.betas)
            guesses = quantize(hvae.decode_with_injected(latents, rng.derive("guess")))
            refined = img2img_refine(
                ldm.codec,
                ldm.denoiser,
                ldm.schedule,
                guesses,
                inputs.cond,
                self.cfg.diffusion.strength,
                refine_rng(self.cfg),
            )
            prior = hvae.sample(len(test_ids), rng.derive("prior"))
            store.save_tensor(reconstruct_path(subject, "guesses.ndtn"), guesses)
            store.save_tensor(reconstruct_path(subject, "refined.ndtn"), refined)
            for stimulus_id, guess, final in zip(test_ids, guesses, refined, strict=True):
                store.save_ppm(guess_ppm(subject, int(stimulus_id)), guess)
                store.save_ppm(refined_ppm(subject, int(stimulus_id)), final)
            extractors = embed_service.metric_extractors(store, self.cfg)
            aggregates = [
                save_metric_report(
                    store,
                    reconstruct_path(subject, f"metrics_{label}.csv"),
                    evaluate(images, inputs.truths, extractors, self.cfg.metrics, label),
                    test_ids,
                )
                for label, images in zip(LABELS, (guesses, refined, prior), strict=True)
            ]
            store.save_csv(reconstruct_path(subject, "metrics.csv"), aggregates)
        by_label = {row["label"]: row for row in aggregates}
        logger.info(
            "reconstruct subject %s: %s test stimuli, SSIM stage1 %.4f, stage2 %.4f, prior %.4f",
            subject,
            len(test_ids),
            by_label["stage1"]["ssim"],
            by_label["stage2"]["ssim"],
            by_label["prior"]["ssim"],
        )
        return {"subject": subject, "n_test": int(len(test_ids)), "aggregates": aggregates}

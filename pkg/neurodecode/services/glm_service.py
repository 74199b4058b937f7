"""Single-trial beta estimation service."""

from __future__ import annotations

import logging
from typing import Any

import numpy as np

from neurodecode.glm import DesignMatrix, beta_recovery, fit_glmsingle
from neurodecode.hrf import HrfLibrary
from neurodecode.schemas.config import ExperimentConfig
from neurodecode.services import synth_service
from neurodecode.services.common import ArtifactStore, ensure_trainable, stage_rng
from neurodecode.synth import average_repeats, zscore_betas

PRODUCER = "glm"
SHUFFLED = "shuffled"
logger = logging.getLogger(__name__)


def glm_path(name: str, shuffled: bool = False) -> str:
    """Return a GLM artifact path; the shuffled control lives in its own folder."""
    return f"glm/{SHUFFLED}/{name}" if shuffled else f"glm/{name}"


def betas_path(subject: int, shuffled: bool = False) -> str:
    """Return the per-stimulus beta tensor path of ``subject``."""
    return glm_path(f"betas_s{subject}.ndtn", shuffled)


def median_recovery(betas: np.ndarray, truth: np.ndarray) -> float:
    """Median per-voxel correlation with the true amplitudes over voxels that respond."""
    recovery = beta_recovery(betas, truth)
    finite = recovery[np.isfinite(recovery)]
    return float(np.median(finite)) if finite.size else float("nan")


class GlmService:
    """Fit the three-step GLM for every subject and write z-scored stimulus betas."""

    def __init__(self, store: ArtifactStore, cfg: ExperimentConfig) -> None:
        self.store = store
        self.cfg = cfg

    def run(self, shuffled: bool = False) -> dict[str, Any]:
        """Estimate betas; ``shuffled`` permutes trial labels as a negative control.

        The control writes under ``glm/shuffled/`` and leaves the real betas alone.
        """
        ensure_trainable(self.cfg, PRODUCER)
        library = HrfLibrary(self.cfg.dataset.tr)
        rng = stage_rng(self.cfg, PRODUCER)
        summary: dict[str, Any] = {"shuffled": shuffled, "subjects": []}
        variant = SHUFFLED if shuffled else None
        with self.store.stage(PRODUCER, self.cfg, variant) as store:
            for subject in range(self.cfg.dataset.n_subjects):
                bold = store.load_tensor(synth_service.bold_path(subject), synth_service.PRODUCER)
                truth = store.load_tensor(
                    synth_service.amplitudes_path(subject), synth_service.PRODUCER
                )
                schedules = synth_service.load_schedules(store, subject)
                design = DesignMatrix.from_schedules(schedules, self.cfg.glm.poly_degree)
                if shuffled:
                    design = design.shuffled(rng.derive("shuffle", subject))
                fit = fit_glmsingle(bold, design, library, self.cfg.glm)
                records = average_repeats(fit.betas, fit.trial_stimulus.tolist(), subject)
                recovery = median_recovery(np.stack([r.beta for r in records]), truth)
                records, zscore = zscore_betas(records)
                store.save_tensor(
                    betas_path(subject, shuffled), np.stack([r.beta for r in records])
                )
                store.save_tensor(glm_path(f"trial_betas_s{subject}.ndtn", shuffled), fit.betas)
                sidecar = fit.sidecar()
                sidecar.update(
                    {
                        "config": self.cfg.glm.model_dump(mode="json"),
                        "shuffled": shuffled,
                        "stimulus_ids": [r.stimulus_id for r in records],
                        "zero_variance_voxels": zscore.zero_variance_voxels,
                        "median_beta_recovery": recovery,
                    }
                )
                store.save_json(glm_path(f"fit_s{subject}.json", shuffled), sidecar)
                median_cv = float(np.median(fit.r2_cv))
                summary["subjects"].append(
                    {
                        "subject": subject,
                        "betas": betas_path(subject, shuffled),
                        "median_r2_cv": median_cv,
                        "median_beta_recovery": recovery,
                        "n_components": fit.n_components,
                        "noise_pool_skipped": fit.noise_pool_skipped,
                    }
                )
                logger.info(
                    "glm subject %s%s: median CV R2 %.3f, beta recovery r %.3f, "
                    "%s noise components",
                    subject,
                    " (shuffled)" if shuffled else "",
                    median_cv,
                    recovery,
                    fit.n_components,
                )
            store.save_json(glm_path("index.json", shuffled), summary)
        return summary


def load_betas(store: ArtifactStore, subject: int) -> np.ndarray:
    """Return z-scored ``[N, V]`` betas ordered by stimulus id."""
    return store.load_tensor(betas_path(subject), PRODUCER)

"""Noise-sensitivity sweep over perturbed stage-1 guesses."""

from __future__ import annotations

import logging
from typing import Any

from neurodecode.diffusion import img2img_refine, perturb_guess
from neurodecode.metrics import evaluate
from neurodecode.schemas.config import ExperimentConfig
from neurodecode.services import embed_service, ldm_service, reconstruct_service
from neurodecode.services.common import (
    ArtifactStore,
    ensure_trainable,
    stage_rng,
    subject_path,
)
from neurodecode.utils.imageio import from_uint8, to_uint8

PRODUCER = "noise-sweep"
DIRECTORY = "noise_sweep"
DROP_METRICS = ("ssim", "pixcorr")
logger = logging.getLogger(__name__)


def percent_drop(value: float, reference: float) -> float:
    """Return ``100 · (reference − value) / |reference|``; NaN when the reference is zero."""
    if reference == 0:
        return float("nan")
    return 100.0 * (reference - value) / abs(reference)


def sweep_path(subject: int, name: str) -> str:
    """Return a noise-sweep artifact path of ``subject``."""
    return subject_path(DIRECTORY, subject, name)


class SweepService:
    """Perturb every 8-bit guess at each amplitude, refine it and score the result."""

    def __init__(self, store: ArtifactStore, cfg: ExperimentConfig) -> None:
        self.store = store
        self.cfg = cfg

    def run(self) -> dict[str, Any]:
        """Write one aggregate row per amplitude plus per-sample metric files."""
        ensure_trainable(self.cfg, PRODUCER)
        sweep = self.cfg.sweep
        rng = stage_rng(self.cfg, PRODUCER)
        subject = self.cfg.subject
        with self.store.stage(PRODUCER, self.cfg, f"s{subject}") as store:
            ldm = ldm_service.load_ldm(store, self.cfg)
            inputs = reconstruct_service.load_test_inputs(store, self.cfg)
            guesses = to_uint8(
                store.load_tensor(
                    reconstruct_service.reconstruct_path(subject, "guesses.ndtn"),
                    reconstruct_service.PRODUCER,
                )
            )
            extractors = embed_service.metric_extractors(store, self.cfg)
            rows: list[dict[str, Any]] = []
            for amplitude in sweep.amplitudes:
                perturbed = perturb_guess(
                    guesses,
                    amplitude,
                    rng.derive("amplitude", amplitude),
                    allow_arbitrary=sweep.allow_arbitrary,
                )
                refined = img2img_refine(
                    ldm.codec,
                    ldm.denoiser,
                    ldm.schedule,
                    from_uint8(perturbed),
                    inputs.cond,
                    self.cfg.diffusion.strength,
                    reconstruct_service.refine_rng(self.cfg),
                )
                label = f"a{amplitude:03d}"
                report = evaluate(refined, inputs.truths, extractors, self.cfg.metrics, label)
                aggregate = reconstruct_service.save_metric_report(
                    store, sweep_path(subject, f"metrics_{label}.csv"), report, inputs.stimulus_ids
                )
                rows.append({"amplitude": amplitude, **aggregate})
                logger.info(
                    "noise-sweep subject %s amplitude %s: SSIM %.4f pixcorr %.4f",
                    subject,
                    amplitude,
                    aggregate["ssim"],
                    aggregate["pixcorr"],
                )
            reference = next((row for row in rows if row["amplitude"] == 0), None)
            for row in rows:
                for name in DROP_METRICS:
                    row[f"{name}_drop_pct"] = (
                        percent_drop(row[name], reference[name])
                        if reference is not None
                        else float("nan")
                    )
            store.save_csv(sweep_path(subject, "sweep.csv"), rows)
            store.save_json(sweep_path(subject, "sweep.json"), rows)
        return {"subject": subject, "amplitudes": list(sweep.amplitudes), "rows": rows}

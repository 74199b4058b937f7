"""Stage-1 beta to latent regressor service."""

from __future__ import annotations

import logging
from collections.abc import Callable
from typing import Any

import numpy as np

from neurodecode import ridge
from neurodecode.core.rng import Rng
from neurodecode.encoder import NEURAL_KINDS, build_regressor, train_regressor
from neurodecode.metrics import mae, mse
from neurodecode.schemas.config import ExperimentConfig, Stage1Config
from neurodecode.schemas.reports import ComparisonRow
from neurodecode.services import glm_service, hvae_service, synth_service
from neurodecode.services.common import (
    ArtifactStore,
    ensure_trainable,
    stage_rng,
    subject_path,
)
from neurodecode.utils.errors import ConfigError

PRODUCER = "train-stage1"
DIRECTORY = "stage1"
logger = logging.getLogger(__name__)

Predictor = Callable[[np.ndarray], np.ndarray]


def split_validation(train_ids: np.ndarray, fraction: float, rng: Rng) -> tuple[np.ndarray, ...]:
    """Carve a validation subset out of the training stimuli."""
    if train_ids.size < 2:
        raise ConfigError("stage-1 training needs at least two training stimuli")
    order = rng.permutation(train_ids.size)
    n_val = min(train_ids.size - 1, max(1, int(round(fraction * train_ids.size))))
    return train_ids[np.sort(order[n_val:])], train_ids[np.sort(order[:n_val])]


def stage1_path(subject: int, name: str) -> str:
    """Return a stage-1 artifact path of ``subject``."""
    return subject_path(DIRECTORY, subject, name)


class Stage1Service:
    """Fit the configured stage-1 model, optionally next to every alternative."""

    def __init__(self, store: ArtifactStore, cfg: ExperimentConfig) -> None:
        self.store = store
        self.cfg = cfg

    def _fit_kind(
        self,
        kind: str,
        data: dict[str, tuple[np.ndarray, np.ndarray]],
        rng: Rng,
    ) -> tuple[Any, ComparisonRow, Any]:
        stage_cfg = self.cfg.stage1
        x_train, y_train = data["train"]
        if kind == "ridge":
            model = ridge.fit(x_train, y_train, stage_cfg.ridge_alpha)
            predict = model.predict_matrix
            report, params = None, None
        else:
            model = build_regressor(
                kind, stage_cfg, x_train.shape[1], y_train.shape[1], rng.derive(kind, "init")
            )
            report = train_regressor(
                model, data["train"], data["val"], stage_cfg, rng.derive(kind, "train")
            )
            predict = model.predict
            params = model.param_count()
        scores = {}
        for split in ("val", "test"):
            x, y = data[split]
            pred = predict(x)
            scores[f"{split}_mse"] = mse(pred, y)
            scores[f"{split}_mae"] = mae(pred, y)
        row = ComparisonRow(model=kind, param_count=params, **scores)
        logger.info("stage1 %s test_mse=%.5f test_mae=%.5f", kind, row.test_mse, row.test_mae)
        return model, row, report

    def run(self) -> dict[str, Any]:
        """Train on betas of the configured subject against HVAE latent targets."""
        ensure_trainable(self.cfg, PRODUCER)
        stage_cfg = self.cfg.stage1
        rng = stage_rng(self.cfg, "stage1")
        subject = self.cfg.subject
        with self.store.stage(PRODUCER, self.cfg, f"s{subject}") as store:
            betas = glm_service.load_betas(store, subject)
            latents = hvae_service.load_latents(store)
            train_ids, test_ids = synth_service.load_split(store)
            fit_ids, val_ids = split_validation(
                train_ids, stage_cfg.val_fraction, rng.derive("val")
            )
            data = {
                "train": (betas[fit_ids], latents[fit_ids]),
                "val": (betas[val_ids], latents[val_ids]),
                "test": (betas[test_ids], latents[test_ids]),
            }
            model, row, report = self._fit_kind(stage_cfg.kind, data, rng)
            meta = {
                "config": stage_cfg.model_dump(mode="json"),
                "kind": stage_cfg.kind,
                "input_len": int(betas.shape[1]),
                "output_len": int(latents.shape[1]),
                "subject": subject,
            }
            if stage_cfg.kind == "ridge":
                store.save_archive(stage1_path(subject, "checkpoint.ndta"), model.to_arrays())
                meta["ridge"] = model.meta()
            else:
                store.save_archive(stage1_path(subject, "checkpoint.ndta"), model.state_dict())
                epochs = [epoch.model_dump() for epoch in report.rows]
                store.save_csv(stage1_path(subject, "report.csv"), epochs)
                store.save_json(
                    stage1_path(subject, "report.json"), report.model_dump(mode="json")
                )
            store.save_json(stage1_path(subject, "checkpoint.json"), meta)
            rows = [row]
            if stage_cfg.compare:
                for kind in (*NEURAL_KINDS, "ridge"):
                    if kind != stage_cfg.kind:
                        rows.append(self._fit_kind(kind, data, rng)[1])
                comparison = [r.model_dump() for r in rows]
                store.save_csv(stage1_path(subject, "comparison.csv"), comparison)
        return {
            "kind": stage_cfg.kind,
            "subject": subject,
            "rows": [r.model_dump() for r in rows],
        }


def load_stage1(store: ArtifactStore, cfg: ExperimentConfig) -> Predictor:
    """Return the betas → latents predictor fitted for ``cfg.subject``."""
    meta = store.load_json(stage1_path(cfg.subject, "checkpoint.json"), PRODUCER)
    arrays = store.load_archive(stage1_path(cfg.subject, "checkpoint.ndta"), PRODUCER)
    expected = cfg.hvae.latent_length
    if meta["output_len"] != expected:
        raise ConfigError(
            f"stage-1 model emits {meta['output_len']} latents but the HVAE config "
            f"injects {expected}; retrain train-stage1"
        )
    if meta["kind"] == "ridge":
        return ridge.RidgeModel.from_arrays(arrays, meta["ridge"]).predict_matrix
    model = build_regressor(
        meta["kind"],
        Stage1Config.model_validate(meta["config"]),
        meta["input_len"],
        meta["output_len"],
        stage_rng(cfg, "stage1").derive(meta["kind"], "init"),
    )
    model.load_state_dict(arrays)
    model.eval()
    return model.predict

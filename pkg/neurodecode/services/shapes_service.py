"""Shape contract of the configured dimensions, computed without training."""

from __future__ import annotations

import logging
from typing import Any

import numpy as np

from neurodecode import ridge
from neurodecode.encoder import build_regressor
from neurodecode.schemas.config import ExperimentConfig
from neurodecode.services.common import ArtifactStore, stage_rng

PRODUCER = "shapes"
CONTRACT_JSON = "shapes/contract.json"
SHAPE_SAMPLES = 3
logger = logging.getLogger(__name__)


def embedding_rows(cfg: ExperimentConfig) -> dict[str, int]:
    """Return (rows_v, rows_t): a pooled row plus one row per grid cell or token."""
    return {"vision": 1 + cfg.embed.grid**2, "text": 1 + cfg.embed.max_tokens}


class ShapesService:
    """Build the untrained stage-1 network and size the ridge maps at the configured dimensions."""

    def __init__(self, store: ArtifactStore, cfg: ExperimentConfig) -> None:
        self.store = store
        self.cfg = cfg

    def _ridge_shapes(self, rows: dict[str, int]) -> dict[str, list[int]]:
        rng = stage_rng(self.cfg, PRODUCER)
        voxels, dim = self.cfg.dataset.n_voxels, self.cfg.embed.dim
        betas = rng.derive("betas").normal(size=(SHAPE_SAMPLES, voxels))
        shapes = {}
        for name, count in rows.items():
            targets = rng.derive("targets", name).normal(size=(SHAPE_SAMPLES, count, dim))
            model = ridge.fit(betas, targets, self.cfg.ridge_embed.alpha)
            shapes[name] = list(ridge.predict_batch(model, betas[:1]).shape[1:])
        return shapes

    def run(self) -> dict[str, Any]:
        """Write the contract; allowed on every preset including the shapes-only one."""
        hvae = self.cfg.hvae
        stage1 = self.cfg.stage1
        voxels = self.cfg.dataset.n_voxels
        layer_count = hvae.layer_count
        with self.store.stage(PRODUCER, self.cfg) as store:
            network = build_regressor(
                "gru" if stage1.kind == "ridge" else stage1.kind,
                stage1,
                voxels,
                hvae.latent_length,
                stage_rng(self.cfg, PRODUCER).derive("stage1"),
            )
            forward = list(network.predict(np.zeros((1, voxels))).shape)
            rows = embedding_rows(self.cfg)
            contract = {
                "preset": self.cfg.name,
                "stage1": {
                    "kind": network.kind,
                    "input_len": voxels,
                    "output_len": hvae.latent_length,
                    "param_count": network.param_count(),
                    "forward_shape": forward,
                },
                "hvae": {
                    "layers": layer_count,
                    "injected_layers": hvae.injected_layers,
                    "latent_length": hvae.latent_length,
                    "latent_length_by_layers": {
                        str(k): hvae.slots(k) * hvae.latent_width
                        for k in sorted({hvae.injected_layers, layer_count})
                    },
                },
                "embed": {"dim": self.cfg.embed.dim, "rows": rows},
                "ridge_embed": self._ridge_shapes(rows),
            }
            store.save_json(CONTRACT_JSON, contract)
        logger.info(
            "shapes: stage-1 %s has %s parameters, latent length %s, embedding rows %s",
            network.kind,
            contract["stage1"]["param_count"],
            hvae.latent_length,
            rows,
        )
        return contract

"""Pipeline stage services with lazy loading."""

from __future__ import annotations

from importlib import import_module
from typing import Any

_EXPORTS = {
    "ArtifactStore": "neurodecode.services.common",
    "EmbedService": "neurodecode.services.embed_service",
    "GlmService": "neurodecode.services.glm_service",
    "HvaeService": "neurodecode.services.hvae_service",
    "LdmService": "neurodecode.services.ldm_service",
    "ReconstructService": "neurodecode.services.reconstruct_service",
    "ReportService": "neurodecode.services.report_service",
    "RidgeEmbedService": "neurodecode.services.ridge_embed_service",
    "ShapesService": "neurodecode.services.shapes_service",
    "Stage1Service": "neurodecode.services.stage1_service",
    "SweepService": "neurodecode.services.sweep_service",
    "SynthService": "neurodecode.services.synth_service",
}

__all__ = sorted(_EXPORTS.keys())


def __getattr__(name: str) -> Any:
    if name not in _EXPORTS:
        raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
    module = import_module(_EXPORTS[name])
    return getattr(module, name)

"""Shared run-directory data access helpers."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import threading
from collections.abc import Iterator, Mapping, Sequence
from contextlib import contextmanager
from pathlib import Path
from typing import Any

import numpy as np

from neurodecode import __version__
from neurodecode.config import settings
from neurodecode.core import serialization
from neurodecode.core.rng import Rng
from neurodecode.schemas.config import ExperimentConfig
from neurodecode.schemas.manifest import RunManifest, StageRecord
from neurodecode.utils.errors import ConfigError, MissingArtifactError
from neurodecode.utils.imageio import read_ppm, write_ppm
from neurodecode.utils.time import Stopwatch, format_duration, now_utc

MANIFEST = "manifest.json"
CONFIG = "config.json"
logger = logging.getLogger(__name__)
_load_cache: dict[tuple[str, int], Any] = {}
_cache_lock = threading.Lock()


def _cache_get(key: tuple[str, int]) -> Any | None:
    with _cache_lock:
        return _load_cache.get(key)


def _cache_set(key: tuple[str, int], value: Any) -> None:
    with _cache_lock:
        max_entries = max(1, settings.artifact_cache_max_entries)
        while len(_load_cache) >= max_entries:
            oldest_key = next(iter(_load_cache))
            _load_cache.pop(oldest_key, None)
        _load_cache[key] = value


def clear_cache() -> None:
    """Drop every cached artifact."""
    with _cache_lock:
        _load_cache.clear()


def sha256_file(path: str | Path) -> str:
    """Return the hex SHA-256 of a file's bytes."""
    digest = hashlib.sha256()
    with Path(path).open("rb") as handle:
        for chunk in iter(lambda: handle.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _format_cell(value: Any) -> Any:
    if isinstance(value, float | np.floating):
        return repr(float(value))
    return value


def _json_default(value: Any) -> Any:
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    if isinstance(value, Path):
        return str(value)
    raise TypeError(f"{type(value).__name__} is not JSON serializable")


def ensure_trainable(cfg: ExperimentConfig, command: str) -> None:
    """Reject data and training commands on shape-only presets."""
    if cfg.shapes_only:
        raise ConfigError(
            f"preset {cfg.name!r} only supports the shapes command; {command} needs a desk preset"
        )


def stage_rng(cfg: ExperimentConfig, stage: str) -> Rng:
    """Return the seeded stream owned by ``stage``."""
    return Rng(cfg.seed).derive(stage)


def subject_path(directory: str, subject: int, name: str) -> str:
    """Return ``name`` inside the per-subject folder of a stage directory."""
    return f"{directory}/s{subject}/{name}"


class ArtifactStore:
    """Thin helper around one run directory.

    Every save registers the file as an output of the active stage and every
    ``require`` registers an input, so the manifest audits what each stage
    consumed and produced.
    """

    def __init__(self, root: str | Path) -> None:
        self.root = Path(root)
        self._inputs: dict[str, str] | None = None
        self._outputs: dict[str, str] | None = None

    def path(self, relative: str) -> Path:
        """Return the absolute path of an artifact."""
        return self.root / relative

    def exists(self, relative: str) -> bool:
        """Return True when the artifact is on disk."""
        return self.path(relative).is_file()

    def require(self, relative: str, producer: str) -> Path:
        """Return the artifact path or raise naming the command that produces it."""
        path = self.path(relative)
        if not path.is_file():
            raise MissingArtifactError(relative, producer)
        if self._inputs is not None and relative not in self._inputs:
            self._inputs[relative] = sha256_file(path)
        return path

    def _written(self, relative: str) -> Path:
        path = self.path(relative)
        if self._outputs is not None:
            self._outputs[relative] = sha256_file(path)
        return path

    def _target(self, relative: str) -> Path:
        path = self.path(relative)
        path.parent.mkdir(parents=True, exist_ok=True)
        return path

    def _cached(self, relative: str, producer: str, loader: Any) -> Any:
        path = self.require(relative, producer)
        key = (str(path.resolve()), path.stat().st_mtime_ns)
        cached = _cache_get(key)
        if cached is not None:
            return cached
        value = loader(path)
        _cache_set(key, value)
        return value

    # -- tensors ---------------------------------------------------------------
    def save_tensor(self, relative: str, array: np.ndarray) -> Path:
        """Write one NDTN tensor."""
        serialization.save_tensor(self._target(relative), np.asarray(array))
        return self._written(relative)

    def load_tensor(self, relative: str, producer: str) -> np.ndarray:
        """Read one NDTN tensor (cached by path and mtime)."""
        return self._cached(relative, producer, serialization.load_tensor).copy()

    def save_archive(self, relative: str, tensors: Mapping[str, np.ndarray]) -> Path:
        """Write a named tensor bundle."""
        serialization.save_archive(self._target(relative), tensors)
        return self._written(relative)

    def load_archive(self, relative: str, producer: str) -> dict[str, np.ndarray]:
        """Read a named tensor bundle."""
        archive = self._cached(relative, producer, serialization.load_archive)
        return {name: value.copy() for name, value in archive.items()}

    # -- documents ---------------------------------------------------------------
    def save_json(self, relative: str, payload: Any) -> Path:
        """Write sorted, indented JSON."""
        text = json.dumps(payload, indent=2, sort_keys=True, default=_json_default)
        self._target(relative).write_text(text + "\n", encoding="utf-8")
        return self._written(relative)

    def load_json(self, relative: str, producer: str) -> Any:
        """Read a JSON document."""
        return json.loads(self.require(relative, producer).read_text(encoding="utf-8"))

    def save_csv(self, relative: str, rows: Sequence[Mapping[str, Any]]) -> Path:
        """Write rows sharing the first row's columns; floats use shortest round-trip repr."""
        path = self._target(relative)
        columns = list(rows[0]) if rows else []
        with path.open("w", newline="", encoding="utf-8") as handle:
            writer = csv.DictWriter(handle, fieldnames=columns, lineterminator="\n")
            writer.writeheader()
            for row in rows:
                writer.writerow({key: _format_cell(value) for key, value in row.items()})
        return self._written(relative)

    def load_csv(self, relative: str, producer: str) -> list[dict[str, str]]:
        """Read a CSV into string-valued rows."""
        with self.require(relative, producer).open(newline="", encoding="utf-8") as handle:
            return list(csv.DictReader(handle))

    def save_ppm(self, relative: str, image: np.ndarray) -> Path:
        """Write a ``[3, H, W]`` image in [0, 1] as PPM."""
        write_ppm(self._target(relative), image)
        return self._written(relative)

    def load_ppm(self, relative: str, producer: str) -> np.ndarray:
        """Read a PPM image into [0, 1]."""
        return read_ppm(self.require(relative, producer))

    # -- config and manifest --------------------------------------------------------
    def save_config(self, cfg: ExperimentConfig) -> Path:
        """Echo the experiment config into the run directory."""
        return self.save_json(CONFIG, cfg.model_dump(mode="json"))

    def load_config(self) -> ExperimentConfig | None:
        """Return the run directory's config, if one was saved."""
        path = self.path(CONFIG)
        if not path.is_file():
            return None
        return ExperimentConfig.model_validate_json(path.read_text(encoding="utf-8"))

    def manifest(self) -> RunManifest:
        """Return the manifest, or an empty one for a fresh run directory."""
        path = self.path(MANIFEST)
        if not path.is_file():
            return RunManifest(tool_version=__version__)
        return RunManifest.model_validate_json(path.read_text(encoding="utf-8"))

    @contextmanager
    def stage(
        self, name: str, cfg: ExperimentConfig, variant: str | None = None
    ) -> Iterator[ArtifactStore]:
        """Record inputs, outputs and wall time of one stage into the manifest.

        A ``variant`` (a subject folder, a control run) keys the record as
        ``name/variant`` so variants of one stage do not overwrite each other.
        """
        key = name if variant is None else f"{name}/{variant}"
        if self._outputs is not None:
            raise ConfigError(f"stage {name} started while another stage is active")
        self._inputs, self._outputs = {}, {}
        self.root.mkdir(parents=True, exist_ok=True)
        try:
            with Stopwatch(key, settings.slow_stage_log_threshold_s) as watch:
                yield self
            manifest = self.manifest()
            manifest.config = cfg.model_dump(mode="json")
            manifest.stages[key] = StageRecord(
                stage=name,
                inputs=dict(sorted(self._inputs.items())),
                outputs=dict(sorted(self._outputs.items())),
                wall_time_s=watch.elapsed_s,
                finished_at=now_utc(),
                tool_version=__version__,
            )
            self.path(MANIFEST).write_text(manifest.model_dump_json(indent=2), encoding="utf-8")
            logger.info(
                "%s completed in %s with %s outputs",
                key,
                format_duration(watch.elapsed_s),
                len(self._outputs),
            )
        finally:
            self._inputs, self._outputs = None, None

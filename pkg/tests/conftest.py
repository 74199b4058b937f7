"""Pytest fixtures for pipeline tests."""

from __future__ import annotations

import os
from pathlib import Path

import pytest


def _set_default_env() -> None:
    os.environ.setdefault("NEURODECODE_THREADS", "1")
    os.environ.setdefault("NEURODECODE_DTYPE", "float64")
    os.environ.setdefault("NEURODECODE_CHECK_FINITE", "true")
    os.environ.setdefault("NEURODECODE_LOG_LEVEL", "WARNING")


_set_default_env()


@pytest.fixture
def rng():
    """Seeded root stream."""
    from neurodecode.core.rng import Rng

    return Rng(0)


@pytest.fixture
def micro_cfg():
    """The smallest trainable preset."""
    from neurodecode.schemas.config import load_preset

    return load_preset("micro")


@pytest.fixture
def store(tmp_path: Path):
    """Artifact store over an empty run directory."""
    from neurodecode.services.common import ArtifactStore

    return ArtifactStore(tmp_path / "run")


@pytest.fixture(scope="session")
def micro_run(tmp_path_factory: pytest.TempPathFactory) -> Path:
    """Run every stage once on the micro preset and return the run directory."""
    from neurodecode.cli import main

    out = tmp_path_factory.mktemp("micro") / "run"
    code = main(["run-all", "--preset", "micro", "--seed", "7", "--out", str(out)])
    assert code == 0
    return out


@pytest.fixture(scope="session")
def smoke_run(tmp_path_factory: pytest.TempPathFactory) -> Path:
    """Run every stage plus the shuffled GLM control on the smoke preset."""
    from neurodecode.cli import main

    out = tmp_path_factory.mktemp("smoke") / "run"
    argv = ["run-all", "--preset", "smoke", "--seed", "0", "--shuffled", "--out", str(out)]
    assert main(argv) == 0
    return out

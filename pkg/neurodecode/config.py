"""Process settings loaded from environment variables."""

from __future__ import annotations

import numpy as np
from pydantic_settings import BaseSettings


class Settings(BaseSettings):
    """Process-level configuration.

    Values are read from ``NEURODECODE_*`` environment variables (or a `.env`
    file). Experiment parameters live in ``ExperimentConfig`` instead.
    """

    # Runtime
    log_level: str = "INFO"
    threads: int = 1
    default_out_dir: str = "runs/default"

    # Numerics
    dtype: str = "float64"
    check_finite: bool = True

    # Performance tuning
    artifact_cache_max_entries: int = 64
    slow_stage_log_threshold_s: float = 0.0

    @property
    def numpy_dtype(self) -> np.dtype:
        """Return the floating dtype used for new tensors."""
        return np.dtype(np.float32) if self.dtype == "float32" else np.dtype(np.float64)

    @property
    def parallel(self) -> bool:
        """Return True when data-parallel maps may use worker threads."""
        return self.threads > 1

    model_config = {
        "env_prefix": "NEURODECODE_",
        "env_file": ".env",
        "env_file_encoding": "utf-8",
        "extra": "ignore",
    }


settings = Settings()

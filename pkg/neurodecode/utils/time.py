"""Time utility helpers."""

from __future__ import annotations

import logging
import time
from datetime import datetime, timezone

UTC = timezone.utc

logger = logging.getLogger(__name__)


def now_utc() -> datetime:
    """Return current timezone-aware UTC datetime."""
    return datetime.now(tz=UTC)


class Stopwatch:
    """Wall-clock timer used to stamp stage manifests."""

    def __init__(self, label: str, slow_threshold_s: float = 0.0) -> None:
        self.label = label
        self.slow_threshold_s = slow_threshold_s
        self.started = 0.0
        self.elapsed_s = 0.0

    def __enter__(self) -> Stopwatch:
        self.started = time.perf_counter()
        return self

    def __exit__(self, *exc_info: object) -> None:
        self.elapsed_s = time.perf_counter() - self.started
        if self.slow_threshold_s > 0 and self.elapsed_s >= self.slow_threshold_s:
            logger.warning("Slow stage %s %.1fs", self.label, self.elapsed_s)


def format_duration(seconds: float) -> str:
    """Format a duration into a compact human string for log lines."""
    if seconds < 1:
        return f"{seconds * 1000:.0f}ms"
    if seconds < 60:
        return f"{seconds:.1f}s"
    minutes, rest = divmod(int(round(seconds)), 60)
    return f"{minutes}m{rest:02d}s"

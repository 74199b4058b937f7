"""Seeded random streams.

Every stream is numpy's PCG64 bit generator behind a ``Generator``; Gaussian
draws use numpy's ziggurat sampler. Both are documented and produce the same
stream on every platform for a given seed. Named child streams come from
``SeedSequence`` spawn keys, so adding a new consumer never shifts the draws
of an existing one.
"""

from __future__ import annotations

import zlib
from collections.abc import Sequence

import numpy as np

from neurodecode.utils.errors import ConfigError

_U64_MASK = (1 << 64) - 1


def _key_to_int(key: int | str) -> int:
    if isinstance(key, str):
        return zlib.crc32(key.encode("utf-8"))
    if key < 0:
        raise ConfigError(f"rng derivation keys must be non-negative, got {key}")
    return int(key)


class Rng:
    """Deterministic random stream identified by a u64 seed and a key path."""

    algorithm = "PCG64"

    def __init__(self, seed: int, keys: Sequence[int | str] = ()) -> None:
        if not 0 <= int(seed) <= _U64_MASK:
            raise ConfigError(f"seed must be an unsigned 64-bit integer, got {seed}")
        self.seed = int(seed)
        self.keys = tuple(keys)
        sequence = np.random.SeedSequence(
            entropy=self.seed, spawn_key=tuple(_key_to_int(k) for k in self.keys)
        )
        self._generator = np.random.Generator(np.random.PCG64(sequence))

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, keys={self.keys})"

    def derive(self, *keys: int | str) -> Rng:
        """Return an independent child stream named by ``keys``."""
        return Rng(self.seed, self.keys + tuple(keys))

    def normal(
        self, size: int | Sequence[int] | None = None, loc: float = 0.0, scale: float = 1.0
    ) -> np.ndarray:
        """Draw Gaussian samples."""
        return self._generator.normal(loc=loc, scale=scale, size=size)

    def uniform(
        self, size: int | Sequence[int] | None = None, low: float = 0.0, high: float = 1.0
    ) -> np.ndarray:
        """Draw uniform samples on [low, high)."""
        return self._generator.uniform(low=low, high=high, size=size)

    def integers(self, low: int, high: int, size: int | Sequence[int] | None = None) -> np.ndarray:
        """Draw integers on [low, high)."""
        return self._generator.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        """Return a random permutation of ``range(n)``."""
        return self._generator.permutation(n)

    def choice(self, options: int | Sequence[object], size: int | None = None) -> np.ndarray:
        """Sample uniformly with replacement from ``options``."""
        return self._generator.choice(options, size=size)

    def random(self) -> float:
        """Return one uniform float on [0, 1)."""
        return float(self._generator.random())

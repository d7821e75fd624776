"""Counter-based random streams: equal seed + equal call sequence = equal bits.

Built on the Philox bit generator so streams can be split by key instead of
by jumping; a child stream's draws never depend on how much the parent (or
any sibling) has consumed. That makes per-sample direction draws independent
of batch scheduling and of estimator fan-out.
"""

from __future__ import annotations

import numpy as np

_WORD = 0xFFFFFFFF


def _spawn_words(ids: tuple[int, ...]) -> tuple[int, ...]:
    # SeedSequence spawn keys are uint32 words; split 64-bit tags into two.
    words: list[int] = []
    for i in ids:
        if i < 0:
            raise ValueError("stream ids must be nonnegative")
        words.append(i & _WORD)
        words.append((i >> 32) & _WORD)
    return tuple(words)


class Rng:
    """Splittable random source. `stream` is the path of split ids from the root."""

    def __init__(self, seed: int, stream: tuple[int, ...] = ()):
        seed = int(seed)
        if seed < 0:
            raise ValueError("seed must be nonnegative")
        self.seed = seed
        self.stream = tuple(int(s) for s in stream)
        ss = np.random.SeedSequence(self.seed, spawn_key=_spawn_words(self.stream))
        self._gen = np.random.Generator(np.random.Philox(ss))

    def split(self, *ids: int) -> "Rng":
        """Independent child stream keyed by (seed, this path, ids)."""
        return Rng(self.seed, self.stream + ids)

    def normal(self, n: int, sigma: float = 1.0) -> np.ndarray:
        return self._gen.normal(0.0, sigma, n)

    def normal_mat(self, rows: int, cols: int, sigma: float = 1.0) -> np.ndarray:
        return self._gen.normal(0.0, sigma, (rows, cols))

    def uniform(self, n: int) -> np.ndarray:
        return self._gen.random(n)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, stream={self.stream})"


def gaussian_vec(rng: Rng, n: int, sigma: float) -> np.ndarray:
    """n independent draws from Normal(0, sigma^2); advances `rng` deterministically."""
    if n < 1:
        raise ValueError(f"need n >= 1, got {n}")
    if not sigma > 0.0:
        raise ValueError(f"need sigma > 0, got {sigma}")
    return rng.normal(int(n), float(sigma))

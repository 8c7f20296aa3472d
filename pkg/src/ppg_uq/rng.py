"""Purpose-split random streams.

Every consumer of randomness (weight init, dropout masks, logit noise, IVON
parameter draws, data generation/shuffling) gets its own counter-based Philox
stream keyed on ``(seed, stream-id)``.  Sub-streams are derived with
:meth:`RngStream.child`, so adding draws in one place never shifts another.
"""

from __future__ import annotations

import numpy as np

STREAM_IDS = ("init", "dropout", "logit-noise", "ivon-sample", "data")


class RngStream:
    """A reproducible random stream identified by ``(seed, stream_id, path)``."""

    __slots__ = ("seed", "stream_id", "path", "_gen")

    def __init__(self, seed: int, stream_id: str, path: tuple[int, ...] = ()):
        if stream_id not in STREAM_IDS:
            raise ValueError(f"unknown stream id {stream_id!r}; expected one of {STREAM_IDS}")
        seed = int(seed)
        if not 0 <= seed < 2**64:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = seed
        self.stream_id = stream_id
        self.path = tuple(int(p) for p in path)
        code = STREAM_IDS.index(stream_id)
        seq = np.random.SeedSequence(seed, spawn_key=(code, *self.path))
        self._gen = np.random.Generator(np.random.Philox(seq))

    def child(self, index: int) -> "RngStream":
        """Independent sub-stream (e.g. one per epoch, per MC pass, per example)."""
        return RngStream(self.seed, self.stream_id, self.path + (int(index),))

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def normal(self, shape) -> np.ndarray:
        return self._gen.standard_normal(shape, dtype=np.float32)

    def uniform(self, shape, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        u = self._gen.random(shape, dtype=np.float32)
        if low == 0.0 and high == 1.0:
            return u
        return (low + (high - low) * u).astype(np.float32)

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id!r}, path={self.path})"


def streams(seed: int) -> dict[str, RngStream]:
    """All five purpose streams for one seed."""
    return {sid: RngStream(seed, sid) for sid in STREAM_IDS}

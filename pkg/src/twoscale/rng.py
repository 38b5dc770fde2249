"""Deterministic random-number streams for reproducible parallel Monte Carlo.

Every stochastic routine in this package draws from an :class:`RngStream`.
A stream is identified by a 64-bit seed plus a tuple of integer ids; the
same (seed, ids) always produces the same draws, and distinct ids give
statistically independent streams.  Streams can be derived hierarchically
(seed -> replica -> step ...) without any shared mutable state, so replicas
may run in any order, on any number of workers, with identical results.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["RngStream"]


@dataclass(frozen=True)
class RngStream:
    """A stateless handle on a reproducible pseudo-random stream.

    The underlying bit generator is keyed through ``np.random.SeedSequence``
    with ``spawn_key`` set to ``ids``, so derivation is collision-free by
    construction.  ``generator()`` returns a fresh ``np.random.Generator``
    positioned at the start of the stream; calling it twice gives two
    generators that emit identical sequences.
    """

    seed: int
    ids: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        if not (0 <= int(self.seed) < 2**64):
            raise ValueError("seed must fit in 64 bits")

    def substream(self, *ids: int) -> "RngStream":
        """Derive the child stream obtained by appending ``ids``."""
        return RngStream(self.seed, self.ids + tuple(int(i) for i in ids))

    def generator(self) -> np.random.Generator:
        """A fresh generator at the start of this stream."""
        ss = np.random.SeedSequence(entropy=int(self.seed), spawn_key=self.ids)
        return np.random.Generator(np.random.SFC64(ss))

    def normal(self, shape=None) -> np.ndarray:
        """Standard normal draws from the start of the stream (one-shot)."""
        return self.generator().standard_normal(shape)

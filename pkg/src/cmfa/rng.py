"""Keyed random-number streams.

Every stochastic routine in this package draws from a stream that is fully
determined by a 64-bit seed plus an integer key path.  Re-creating a stream
with the same keys reproduces the identical draw sequence, which is what makes
chains, dataset generation and counterfactual prediction bit-reproducible.
Distinct key paths give statistically independent streams (PCG64 seeded via
``numpy.random.SeedSequence`` spawn keys).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class RngStream:
    """Immutable handle for a reproducible random stream.

    Parameters
    ----------
    seed : int
        Master seed (64-bit unsigned).
    stream_id : int or tuple of int
        Key path separating this stream from its siblings.  Entity-keyed
        streams (per chain, per dataset, ...) use distinct ids.
    """

    seed: int
    stream_id: tuple[int, ...] = ()

    def __post_init__(self):
        sid = self.stream_id
        if isinstance(sid, int):
            object.__setattr__(self, "stream_id", (sid,))
        elif not isinstance(sid, tuple):
            object.__setattr__(self, "stream_id", tuple(sid))

    def generator(self) -> np.random.Generator:
        """Instantiate a fresh generator positioned at the start of the stream."""
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=self.stream_id)
        return np.random.Generator(np.random.PCG64(ss))

    def substream(self, *keys: int) -> "RngStream":
        """Derive an independent child stream keyed by ``keys``."""
        return RngStream(self.seed, self.stream_id + tuple(int(k) for k in keys))


def as_generator(rng) -> np.random.Generator:
    """Accept either an RngStream or a ready Generator."""
    if isinstance(rng, RngStream):
        return rng.generator()
    if isinstance(rng, np.random.Generator):
        return rng
    raise TypeError(f"expected RngStream or numpy Generator, got {type(rng)!r}")

"""Seeded, independent random streams.

Every consumer of randomness (weight init, dropout masks, augmentation,
EM initialization, GMM sampling) draws from its own stream keyed by
``(seed, stream_id)``, so draws never depend on what other streams did.
"""
from __future__ import annotations

import numpy as np


class RngStream:
    """A named random stream.

    Parameters
    ----------
    seed : int
        Root seed (64-bit).
    stream_id : int or tuple of int
        Stream key. Tuples let callers namespace streams, e.g.
        ``(TAG_AUGMENT, origin_id, aug_index)``.
    """

    def __init__(self, seed, stream_id=0):
        if isinstance(stream_id, (int, np.integer)):
            stream_id = (int(stream_id),)
        self.seed = int(seed)
        self.stream_id = tuple(int(s) for s in stream_id)
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=self.stream_id)
        self.generator = np.random.Generator(np.random.PCG64(ss))

    def child(self, *ids):
        """Independent stream nested under this one."""
        return RngStream(self.seed, self.stream_id + tuple(ids))

    def __repr__(self):
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id})"


# stream namespaces
TAG_INIT = 1
TAG_DROPOUT = 2
TAG_AUGMENT = 3
TAG_SPLIT = 4
TAG_SYNTH = 5
TAG_EM = 6
TAG_SAMPLE = 7
TAG_ORDER = 8


def as_stream(random_state, *ids):
    """Coerce ``None`` / int / RngStream to an RngStream."""
    if isinstance(random_state, RngStream):
        return random_state.child(*ids) if ids else random_state
    seed = 0 if random_state is None else int(random_state)
    return RngStream(seed, ids if ids else 0)

"""Seed-substream convention: every consumer derives its generator from
(seed, stream id, ...) so independent stages never share random state."""

from __future__ import annotations

import numpy as np

# Stream ids. Keeping them in one place prevents accidental collisions.
STREAM_INIT = 0
STREAM_SHUFFLE = 1
STREAM_TRAIN_MASK = 2
STREAM_VAL_MASK = 3
STREAM_SPLIT = 4
STREAM_FLEET = 5
STREAM_NOVEL = 6
STREAM_FINETUNE = 7
STREAM_CALIBRATE = 8


def substream(seed: int, *key: int) -> np.random.Generator:
    """Deterministic generator for (seed, *key)."""
    return np.random.default_rng([int(seed)] + [int(k) for k in key])

"""Seed handling: one root seed fans out into named substreams."""

import hashlib

import numpy as np


def substream(seed: int, name: str) -> np.random.Generator:
    """Independent generator derived deterministically from (seed, name).

    Different names give statistically independent streams; the same
    (seed, name) pair always yields the same stream, regardless of what
    other streams were drawn from in between.
    """
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    key = int.from_bytes(digest[:8], "little")
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), key])))

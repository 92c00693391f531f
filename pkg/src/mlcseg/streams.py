"""Named substreams of one master seed.

Every random draw in the package comes from a counter-based Philox
generator keyed by the master seed plus a path of names, so augmentation,
perturbation, batch sampling, and shape generation consume independent
streams and any single stage can be replayed in isolation.
"""

import hashlib

import numpy as np


def _hash_token(token) -> int:
    digest = hashlib.sha256(repr(token).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def substream(seed: int, *path) -> np.random.Generator:
    """Generator for ``(seed, *path)``; identical arguments give an
    identical stream on every platform."""
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF] + [_hash_token(t) for t in path]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))

"""Named random-number substreams derived from one root seed.

Each consumer (data synthesis, parameter init, training, generation) gets its
own generator so that changing how much randomness one stage uses never shifts
the draws seen by another stage.
"""

import hashlib

import numpy as np

_MASK64 = 0xFFFFFFFFFFFFFFFF


def substream(seed: int, name: str) -> np.random.Generator:
    """Return an independent generator for one named role under ``seed``."""
    tag = int.from_bytes(hashlib.sha256(name.encode("utf-8")).digest()[:8], "little")
    sequence = np.random.SeedSequence([int(seed) & _MASK64, tag])
    return np.random.default_rng(sequence)

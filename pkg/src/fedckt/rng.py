"""Named, seed-derived RNG substreams.

All randomness in the package flows from one master seed through named
substreams so any component reproduces in isolation and independent
components never share a stream (required for the bitwise reduction
identities between algorithms that consume different random quantities).
"""

from __future__ import annotations

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def _encode(part: int | str) -> int:
    if isinstance(part, str):
        digest = hashlib.sha256(part.encode("utf-8")).digest()
        return int.from_bytes(digest[:8], "little")
    return int(part) & _MASK64


def substream(master_seed: int, *path: int | str) -> np.random.Generator:
    """Generator for the substream identified by (master_seed, *path).

    Identical (seed, path) pairs always yield identical streams; distinct
    paths yield statistically independent streams.
    """
    entropy = [_encode(master_seed)] + [_encode(p) for p in path]
    return np.random.default_rng(np.random.SeedSequence(entropy))


def derive_seed(master_seed: int, *path: int | str) -> int:
    """A plain integer seed derived from the named substream, for APIs that
    take a seed rather than a generator."""
    return int(substream(master_seed, *path).integers(0, 2**63 - 1))

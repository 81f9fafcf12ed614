"""Seeded random streams keyed by (seed, client, round, purpose).

Every stochastic decision in a run draws from its own stream so results do
not depend on the order in which clients are executed.
"""

from __future__ import annotations

import hashlib

import numpy as np

SERVER = -1


def stream_key(seed: int, client: int, round_idx: int, purpose: str) -> int:
    """Stable 64-bit key for one stream."""
    payload = f"{seed}|{client}|{round_idx}|{purpose}".encode()
    return int.from_bytes(hashlib.blake2b(payload, digest_size=8).digest(), "little")


def derive_rng(seed: int, client: int, round_idx: int, purpose: str) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(stream_key(seed, client, round_idx, purpose)))

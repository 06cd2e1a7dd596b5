"""Deterministic named RNG streams.

All randomness in the package flows through generators created here, so a
single integer seed reproduces corpora, batches, prior draws and reports
byte-for-byte. Stream names are hashed into the SeedSequence spawn key,
which keeps differently named streams statistically independent.
"""

import hashlib

import numpy as np


def named_stream(seed: int, name: str) -> np.random.Generator:
    """Generator for stream `name`, derived from the run-level `seed`."""
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    words = tuple(int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4))
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=words))


def child_seeds(rng: np.random.Generator, n: int) -> np.ndarray:
    """Draw n independent child seeds (for per-item streams in one batch)."""
    return rng.integers(0, 2**63 - 1, size=n, dtype=np.int64)

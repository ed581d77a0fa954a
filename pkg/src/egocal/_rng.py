"""Deterministic RNG stream derivation from structured keys."""

import hashlib

import numpy as np


def stable_hash(*parts) -> int:
    """64-bit hash of mixed string/int/array keys, stable across processes."""
    h = hashlib.blake2b(digest_size=8)
    for p in parts:
        if isinstance(p, str):
            h.update(b"s")
            h.update(p.encode())
        elif isinstance(p, (bool, int, np.integer)):
            h.update(b"i")
            h.update(int(p).to_bytes(16, "little", signed=True))
        else:
            arr = np.ascontiguousarray(np.asarray(p, dtype=np.float64))
            h.update(b"a")
            h.update(arr.tobytes())
    return int.from_bytes(h.digest(), "little")


def derive_seed(*parts) -> int:
    return stable_hash(*parts)


def derive_rng(*parts) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(stable_hash(*parts)))

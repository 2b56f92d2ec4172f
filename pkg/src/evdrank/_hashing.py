"""Stable string hashing and tokenization.

Python's builtin ``hash`` is salted per process, so everything that must be
reproducible across restarts goes through blake2b here.
"""

from __future__ import annotations

import hashlib
import re
from functools import lru_cache

_WORD = re.compile(r"\w+", re.UNICODE)


def tokenize(text: str) -> list[str]:
    return _WORD.findall(text.lower())


@lru_cache(maxsize=1 << 18)
def stable_hash64(token: str, seed: int) -> int:
    h = hashlib.blake2b(token.encode("utf-8"), digest_size=8, salt=seed.to_bytes(8, "little", signed=True)[:8])
    return int.from_bytes(h.digest(), "little")


def bucket_and_sign(token: str, seed: int, dim: int) -> tuple[int, float]:
    """Bucket in ``[0, dim)`` and a +/-1 sign drawn from an independent hash."""
    bucket = stable_hash64(token, seed) % dim
    sign = 1.0 if stable_hash64(token, seed ^ 0x5DEECE66D) & 1 else -1.0
    return bucket, sign


def seed_from(*parts: object) -> int:
    """Derive a 63-bit RNG seed from arbitrary printable parts."""
    blob = "\x1f".join(repr(p) for p in parts).encode("utf-8")
    return int.from_bytes(hashlib.blake2b(blob, digest_size=8).digest(), "little") >> 1

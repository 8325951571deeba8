"""Deterministic sub-seed derivation.

``derive_seed(seed, *names)`` hashes ``"seed/name1/name2..."`` with SHA-256 and
keeps the low 63 bits, so every pipeline stage gets an independent, stable
seed from one global seed.
"""
from __future__ import annotations

import hashlib


def derive_seed(seed: int, *names) -> int:
    key = "/".join([str(int(seed))] + [str(n) for n in names])
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & ((1 << 63) - 1)

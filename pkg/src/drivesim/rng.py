"""Hierarchical deterministic random streams.

One root seed, one independent substream per (purpose, entity). Streams are
keyed by stable strings hashed through SHA-256, so adding or removing an
entity never perturbs any other entity's draws.
"""

from __future__ import annotations

import hashlib

import numpy as np


def substream(root_seed: int, purpose: str, ident: object = "") -> np.random.Generator:
    """Fresh generator for (root_seed, purpose, ident); same key, same stream."""
    key = f"{root_seed}|{purpose}|{ident}".encode("utf-8")
    digest = hashlib.sha256(key).digest()
    return np.random.default_rng(int.from_bytes(digest[:16], "little"))

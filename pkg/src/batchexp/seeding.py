"""Deterministic seed derivation.

All randomness in a run flows from one master seed. Child seeds are derived by
XOR-ing a tag into the parent and passing it through the splitmix64 finalizer,
so that adding a stream (or an agent) never shifts any other stream.
"""

from __future__ import annotations

import hashlib

import numpy as np

MASK64 = (1 << 64) - 1

# stream tags used by environments and the harness
CONTEXT_STREAM = 0x636F6E74657874  # "context"
NOISE_STREAM = 0x6E6F697365  # "noise"
BOOTSTRAP_STREAM = 0x626F6F74  # "boot"
POST_STREAM = 0x706F7374  # "post"
POLICY_STREAM = 0x706F6C6963  # "polic"
ASSIGN_STREAM = 0x61737369676E  # "assign"
ENV_STREAM = 0x656E76  # "env"


def mix64(x: int) -> int:
    """splitmix64 finalizer over a 64-bit integer."""
    x &= MASK64
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & MASK64
    return x ^ (x >> 31)


def derive(seed: int, *parts: int) -> int:
    """Fold ``parts`` into ``seed`` one at a time: ``mix64(acc ^ part)``."""
    acc = mix64(seed)
    for part in parts:
        acc = mix64(acc ^ (part & MASK64))
    return acc


def stream(seed: int, tag: int) -> np.random.Generator:
    """Independent numpy generator for stream ``tag`` under ``seed``."""
    return np.random.default_rng(derive(seed, tag))


def name_hash(name: str) -> int:
    """Stable 64-bit hash of a string (independent of PYTHONHASHSEED)."""
    return int.from_bytes(hashlib.sha256(name.encode("utf-8")).digest()[:8], "little")

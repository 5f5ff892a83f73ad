"""Per-stage random streams derived from one master seed.

Every stochastic stage asks for ``stream(master, stage, unit)`` so two stages
never share (or shift) each other's draws.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(master: int, *parts: object) -> int:
    key = "/".join([str(int(master)), *map(str, parts)]).encode()
    return int.from_bytes(hashlib.blake2b(key, digest_size=8).digest(), "big")


def stream(master: int, *parts: object) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master, *parts))

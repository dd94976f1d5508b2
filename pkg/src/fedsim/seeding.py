"""Deterministic seed derivation.

Every random draw in a run flows from a single master seed.  Independent
streams (per client, per round, per purpose) are derived by hashing a label
tuple, so adding a new consumer never perturbs existing streams.
"""

from __future__ import annotations

import hashlib

import numpy as np
import torch

_MASK63 = (1 << 63) - 1


def derive_seed(*parts) -> int:
    """Hash a tuple of labels (strings, ints) into a stable 63-bit seed."""
    text = "/".join(str(p) for p in parts)
    digest = hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little") & _MASK63


def numpy_rng(*parts) -> np.random.Generator:
    return np.random.default_rng(derive_seed(*parts))


def torch_generator(*parts) -> torch.Generator:
    gen = torch.Generator()
    gen.manual_seed(derive_seed(*parts))
    return gen

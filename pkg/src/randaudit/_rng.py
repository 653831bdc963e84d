"""Seed derivation and generator construction.

Every random draw in the package goes through :func:`make_rng`, which wraps
numpy's Philox4x64-10 counter-based bit generator. Child seeds are derived
with :func:`derive_seed` (BLAKE2b over the decimal text of the parts), so a
resample's stream depends only on ``(master_seed, index)`` and never on the
order in which workers happen to process resamples.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(*parts: int | str) -> int:
    """Stable 63-bit seed from an ordered tuple of ints/strings."""
    text = "/".join(str(p) for p in parts).encode("utf-8")
    digest = hashlib.blake2b(text, digest_size=8, person=b"randaudit").digest()
    return int.from_bytes(digest, "little") >> 1


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(int(seed)))

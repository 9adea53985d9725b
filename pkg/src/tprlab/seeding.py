"""Named random streams derived from a single root seed.

Every stochastic component draws from a stream addressed by a string path
(e.g. ``train/expert/3``), so runs are reproducible from one integer and
independent components never share a stream.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(root_seed: int, *names: str | int) -> int:
    """Map (root_seed, name path) to a stable 63-bit stream seed."""
    key = str(int(root_seed)) + "/" + "/".join(str(n) for n in names)
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & ((1 << 63) - 1)


def derive_rng(root_seed: int, *names: str | int) -> np.random.Generator:
    """Generator for the named stream under ``root_seed``."""
    return np.random.Generator(np.random.PCG64(derive_seed(root_seed, *names)))

"""Named, counter-based random substreams.

Every random draw in the package comes from a Philox generator keyed by the run seed and a
tuple of names (for example ``("fit", "delta_init")`` or ``("clayton", "frailty")``), so a
given variable sees the same numbers on every platform regardless of what else was drawn.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _name_key(name: str | int) -> int:
    if isinstance(name, (int, np.integer)):
        return int(name)
    digest = hashlib.sha256(str(name).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def substream(seed: int, *names: str | int) -> np.random.Generator:
    """Return the generator for ``names`` under ``seed``."""
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF, *(_name_key(n) for n in names)]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))

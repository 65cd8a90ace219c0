"""Named, order-independent random streams.

Every random draw in a run is taken from a generator keyed by
``(master seed, purpose, round, client)``, so a round can be replayed in
isolation and two policies run on the same seed see the same environment.
"""

from __future__ import annotations

import numpy as np

POPULATION = 1
DATA = 2
PARTITION = 3
STATUS = 4
SAMPLE = 5
LOCAL = 6
CANDIDATES = 7
INIT = 8


def stream(seed: int, purpose: int, *keys: int) -> np.random.Generator:
    """Return a fresh generator for ``(seed, purpose, *keys)``."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), purpose, *map(int, keys)]))

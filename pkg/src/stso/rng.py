"""Deterministic random streams for parallel simulation.

Every random draw in the library comes from a Philox counter-based
generator whose 128-bit key encodes (seed, domain, a, b). Streams with
distinct keys are statistically independent and a key always reproduces
the same draw sequence, no matter how many other streams were consumed
or in what order. Rollouts can therefore run in any batching or worker
arrangement without changing results.

Domains partition the key space so unrelated consumers (noise sampling,
parameter initialization, actuator placement, evaluation rollouts) can
never collide.
"""

from __future__ import annotations

import numpy as np

NOISE = 0
INIT = 1
ACTUATORS = 2
EVAL = 3

_MASK32 = (1 << 32) - 1


def stream(seed: int, domain: int, a: int = 0, b: int = 0) -> np.random.Generator:
    """Generator keyed by (seed, domain, a, b).

    For rollout noise the convention is a = iteration index and
    b = rollout index; draws within the stream advance with time.
    """
    key = (
        ((seed & _MASK32) << 96)
        | ((domain & _MASK32) << 64)
        | ((a & _MASK32) << 32)
        | (b & _MASK32)
    )
    return np.random.Generator(np.random.Philox(key=key))

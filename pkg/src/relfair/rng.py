"""Counter-based random streams keyed by (seed, client, round, step).

Every stochastic draw in a simulation comes from its own Philox stream whose
counter encodes the position of the draw.  Evaluation order therefore never
affects the numbers a client sees, which is what makes threaded client
execution replay bit-for-bit against the serial loop.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1
# Second key word separates these streams from any other Philox use of the seed.
_KEY_SALT = 0x5CAFF0D1A


def stream(seed: int, client: int = 0, round_: int = 0, step: int = 0) -> np.random.Generator:
    """Return the generator for one (client, round, step) slot."""
    for name, v in (("client", client), ("round", round_), ("step", step)):
        if v < 0:
            raise ValueError(f"{name} index must be nonnegative, got {v}")
    key = np.array([int(seed) & _MASK64, _KEY_SALT], dtype=np.uint64)
    counter = np.array([0, step, round_, client], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key, counter=counter))


class RngStreams:
    """Factory bound to a seed; ``streams(i, r, j)`` is ``stream(seed, i, r, j)``."""

    def __init__(self, seed: int):
        self.seed = int(seed)

    def __call__(self, client: int, round_: int, step: int) -> np.random.Generator:
        return stream(self.seed, client, round_, step)

    def __repr__(self) -> str:
        return f"RngStreams(seed={self.seed})"

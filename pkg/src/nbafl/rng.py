"""Counter-based random streams keyed by (master seed, purpose, round, client).

Every draw in a simulation comes from its own Philox stream, so results do not
depend on the order in which clients are processed or on the number of worker
threads. A stream must never be shared between threads.
"""

import numpy as np

# Purpose tags are part of the key; never renumber existing entries.
PURPOSES = {
    "init": 1,
    "uplink": 2,
    "downlink": 3,
    "schedule": 4,
    "partition": 5,
    "synth": 6,
    "regularity": 7,
    "audit": 8,
    "subset": 9,
}

_U64 = (1 << 64) - 1


def _key(master_seed: int, purpose: str, round_: int, client: int) -> np.random.SeedSequence:
    if purpose not in PURPOSES:
        raise KeyError(f"Unknown stream purpose: {purpose}")
    if round_ < 0 or client < 0:
        raise ValueError("round and client must be non-negative")
    return np.random.SeedSequence([int(master_seed) & _U64, PURPOSES[purpose], round_, client])


def stream(master_seed: int, purpose: str, round_: int = 0, client: int = 0) -> np.random.Generator:
    """Return a fresh generator for one (seed, purpose, round, client) cell."""
    return np.random.Generator(np.random.Philox(_key(master_seed, purpose, round_, client)))

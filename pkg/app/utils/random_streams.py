"""
Seeded random streams
Counter-based generators keyed by (seed, block, purpose) so that results do
not depend on how work is split across workers.
"""

import enum

import numpy as np

from app.core.exceptions import InvalidArgumentError

MAX_SEED = 2 ** 64


class StreamPurpose(enum.IntEnum):
    ENERGIES = 0
    LOADING = 1
    PROJECTION = 2
    PUSHOUT = 3
    FRAME = 4
    REFERENCE = 5
    BOOTSTRAP = 6


def validate_seed(seed: int) -> int:
    if isinstance(seed, bool) or not isinstance(seed, (int, np.integer)):
        raise InvalidArgumentError(f"seed must be an integer, got {seed!r}")
    if not 0 <= int(seed) < MAX_SEED:
        raise InvalidArgumentError(f"seed must lie in [0, 2**64), got {seed}")
    return int(seed)


def rng_stream(seed: int, block: int = 0, purpose: StreamPurpose = StreamPurpose.ENERGIES,
               offset: int = 0) -> np.random.Generator:
    """
    Independent Philox stream

    The key is the run seed; the upper counter words hold the block index,
    the purpose tag and a caller offset (e.g. a time index or site index).
    """
    seed = validate_seed(seed)
    if block < 0 or not 0 <= offset < 2 ** 32:
        raise InvalidArgumentError("block must be >= 0 and offset in [0, 2**32)")
    counter = (int(block) << 192) | (int(purpose) << 160) | (int(offset) << 128)
    return np.random.Generator(np.random.Philox(key=seed, counter=counter))


def derive_seed(seed: int, *path: int) -> int:
    """Child seed for a sub-task (e.g. one register site), stable across runs"""
    sequence = np.random.SeedSequence(validate_seed(seed), spawn_key=tuple(int(p) for p in path))
    return int(sequence.generate_state(1, dtype=np.uint64)[0])

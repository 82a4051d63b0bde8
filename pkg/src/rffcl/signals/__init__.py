"""
Physical-layer simulation: transmitter packets and impairments, the fading channel,
and receiver-side channel estimation/equalisation.

Seeds are accepted as ints, int sequences, `numpy.random.SeedSequence` or an already
built `numpy.random.Generator` (used as is); every random draw in this subpackage goes
through a Generator.
"""
from typing import List, Sequence, Union

import numpy as np

Seed = Union[int, Sequence[int], np.random.SeedSequence, np.random.Generator]


def seed_sequence(seed: Seed) -> np.random.SeedSequence:
    """Normalise any accepted seed into a SeedSequence

    >>> seed_sequence([1, 2]).entropy
    [1, 2]
    """
    if isinstance(seed, np.random.SeedSequence):
        return seed
    if isinstance(seed, np.random.Generator):
        # fresh entropy from the generator keeps successive calls independent
        return np.random.SeedSequence(seed.integers(0, 2**62, size=4).tolist())
    if isinstance(seed, (int, np.integer)):
        return np.random.SeedSequence(int(seed))
    return np.random.SeedSequence([int(s) for s in seed])


def child_rngs(seed: Seed, n: int) -> List[np.random.Generator]:
    """`n` independent generators derived from one seed"""
    return [np.random.default_rng(s) for s in seed_sequence(seed).spawn(n)]

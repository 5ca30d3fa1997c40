"""Seeded random streams.

All randomness in the package flows through :class:`RngState`, which wraps
numpy's PCG64 bit generator. PCG64 output depends only on the seed, so a
stream is reproducible across platforms and numpy releases that keep the
``Generator`` API stable.
"""

import zlib

import numpy as np

ALGORITHM = "PCG64"


class RngState:
    """A deterministic random stream identified by a 64-bit seed.

    ``child(tag)`` derives an independent stream for a named purpose (for
    example ``"dropout"`` or ``"init"``) so that adding draws to one purpose
    never shifts another.
    """

    def __init__(self, seed=0):
        seed = int(seed)
        if not 0 <= seed < 2**64:
            raise ValueError(f"seed must fit in 64 unsigned bits, got {seed}")
        self.seed = seed
        self.algorithm = ALGORITHM
        self.generator = np.random.Generator(np.random.PCG64(seed))

    def __repr__(self):
        return f"RngState(seed={self.seed})"

    def child(self, tag):
        if isinstance(tag, str):
            tag = zlib.crc32(tag.encode("utf-8"))
        entropy = np.random.SeedSequence([self.seed & 0xFFFFFFFF, self.seed >> 32, int(tag)])
        return RngState(int(entropy.generate_state(1, dtype=np.uint64)[0]))

    def random(self, shape):
        return self.generator.random(shape)

    def uniform(self, low, high, shape):
        return self.generator.uniform(low, high, shape)

    def permutation(self, n):
        return self.generator.permutation(n)

    def choice(self, n, size, replace=True):
        return self.generator.choice(n, size=size, replace=replace)

    def integers(self, low, high, size=None):
        return self.generator.integers(low, high, size=size)


def as_rng(rng):
    if isinstance(rng, RngState):
        return rng
    if rng is None:
        return RngState(0)
    return RngState(rng)

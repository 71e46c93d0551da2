"""Named random streams.

Every consumer of randomness asks for a stream by purpose (``"corpus"``,
``"noise"``, ``"init"``, ...). Streams are PCG64 generators seeded from
``SeedSequence([seed, crc32(purpose), *extra])`` so they are independent of
each other, of call order, and reproducible across platforms.
"""

from __future__ import annotations

import zlib

import numpy as np


def stream(seed: int, purpose: str, *extra: int) -> np.random.Generator:
    key = [int(seed), zlib.crc32(purpose.encode("utf-8")), *(int(e) for e in extra)]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(key)))

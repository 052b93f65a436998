"""Seeded random streams.

Every random draw in the package goes through :func:`stream`, which returns a
``numpy.random.Generator`` backed by Philox, a counter-based bit generator.
The key is derived from ``SeedSequence([seed, *path])`` where string path
components are mapped to integers with CRC-32, so a stream is a pure function
of the master seed and its name. There is no module-level generator.
"""

import zlib

import numpy as np


def _component(part):
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    part = int(part)
    if part < 0:
        raise ValueError(f"stream components must be non-negative, got {part}")
    return part


def stream(seed, *path):
    """Return an independent Philox generator for ``(seed, *path)``."""
    entropy = [_component(seed)] + [_component(p) for p in path]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


def derive_seed(seed, *path):
    """A 63-bit integer seed derived from ``(seed, *path)``."""
    ss = np.random.SeedSequence([_component(seed)] + [_component(p) for p in path])
    hi, lo = (int(w) for w in ss.generate_state(2, dtype=np.uint32))
    return ((hi << 32) | lo) & ((1 << 63) - 1)

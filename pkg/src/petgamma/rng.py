"""Counter-based random streams keyed by (seed, *keys)."""
import zlib

import numpy as np


def tag(name):
    """Stable integer tag for a stream purpose string."""
    return zlib.crc32(name.encode("utf-8"))


def stream(seed, *keys):
    """Return an independent Philox generator for ``(seed, *keys)``.

    Keys may be ints or strings; strings are hashed with :func:`tag`.
    Identical arguments always give bit-identical draws.
    """
    entropy = [int(seed)] + [tag(k) if isinstance(k, str) else int(k) for k in keys]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))

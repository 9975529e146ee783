"""Keyed random streams.

Every random draw in the package comes from a generator obtained through
:func:`stream`, keyed by a master seed and a tuple of non-negative integers
(replicate, imputed dataset, iteration, step tag, ...). Two calls with the
same key return generators producing identical sequences, which makes
results independent of how work is scheduled across processes.
"""

import numpy as np

# step tags
TAG_GENERATE = 0
TAG_AMPUTE = 1
TAG_IMPUTE = 2
TAG_FILL = 3
TAG_PARAMS = 4
TAG_CURE_STATUS = 5
TAG_COVARIATE = 6
TAG_BOOTSTRAP = 7


def stream(seed, *keys):
    """Return a counter-based generator for ``(seed, *keys)``."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in keys))
    return np.random.Generator(np.random.Philox(ss))


def derive_seed(seed, *keys):
    """Derive a fresh 63-bit integer seed from ``(seed, *keys)``."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in keys))
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))

"""Named counter-based RNG streams.

Every stochastic site gets its own Philox generator keyed by
``(seed, tag)`` with the stream indices loaded into the counter block,
so draws never depend on call order, batching, or parallel scheduling.
Two runs with the same seed are bit-identical; resuming from a step
number reproduces the remaining stream exactly.
"""

from __future__ import annotations

import numpy as np

# Stream tags. Values are stable identifiers; checkpoints only store the
# seed and step, the streams themselves are stateless.
INIT = 1
BATCH = 2
DROPOUT = 3
DECODE = 4
SYNTH = 5
EVAL = 6


def stream(seed: int, tag: int, *indices: int) -> np.random.Generator:
    """Return the generator for one named stream.

    ``(seed, tag)`` selects the 128-bit Philox key; up to three extra
    indices (e.g. sequence, step, stage during decoding) select the
    counter block, giving mutually independent streams.
    """
    if len(indices) > 3:
        raise ValueError("at most three stream indices are supported")
    if seed < 0 or tag < 0 or any(i < 0 for i in indices):
        raise ValueError("seed, tag and stream indices must be non-negative")
    counter = np.zeros(4, dtype=np.uint64)
    counter[: len(indices)] = indices
    key = np.array([seed, tag], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(counter=counter, key=key))

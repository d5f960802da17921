"""Counter-based random streams.

Every stochastic quantity in the package is drawn from a Philox generator
whose 128-bit key is derived from a stable hash of (seed, *labels).  Streams
are therefore independent of evaluation order: the noise used for video v,
frame i, timestep t is the same whether the frame is processed inside a full
sequence or a truncated prefix, serially or in parallel.
"""

from __future__ import annotations

import hashlib

import numpy as np

__all__ = ["stream", "noise_block", "spawn_seed"]


def _key(seed: int, labels: tuple) -> int:
    text = repr((int(seed),) + tuple(labels)).encode("utf-8")
    digest = hashlib.blake2b(text, digest_size=16).digest()
    return int.from_bytes(digest, "little")


def stream(seed: int, *labels) -> np.random.Generator:
    """Generator keyed by (seed, *labels); identical labels give identical draws."""
    return np.random.Generator(np.random.Philox(key=_key(seed, labels)))


def noise_block(seed: int, labels: tuple, shape: tuple, dtype=np.float64) -> np.ndarray:
    """Standard-normal block from the stream keyed by `labels`.

    Row/element order inside the block is part of the key contract: callers
    index rows by trajectory (or frame) so each (labels, index) pair maps to
    a fixed draw.
    """
    out = stream(seed, *labels).standard_normal(shape)
    return out.astype(dtype, copy=False)


def spawn_seed(seed: int, *labels) -> int:
    """Derive a 63-bit child seed; used to key whole sub-experiments."""
    return _key(seed, labels) & ((1 << 63) - 1)

"""Named, counter-based random substreams derived from one master seed.

Every stochastic step in the package asks for a generator by *name* and an
optional tuple of integer indices (rep number, chain number, ...).  The
generator is a Philox (counter-based) stream keyed on the master seed and a
stable hash of the name, so results never depend on call order, worker
count or scheduling.
"""

from __future__ import annotations

import hashlib

import numpy as np

__all__ = ["stream", "stream_key"]

_MASK64 = (1 << 64) - 1


def stream_key(name: str, *indices: int) -> tuple[int, ...]:
    """Deterministic integer key for a named substream."""
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    head = int.from_bytes(digest[:4], "little")
    return (head,) + tuple(int(i) for i in indices)


def stream(seed: int, name: str, *indices: int) -> np.random.Generator:
    """Return the generator for substream ``name[indices]`` of ``seed``.

    Parameters
    ----------
    seed : int
        64-bit master seed.
    name : str
        Purpose of the stream, e.g. ``"mcmc"`` or ``"trial"``.
    *indices : int
        Further non-negative integers (rep index, chain index, ...).
    """
    if int(seed) < 0:
        raise ValueError("seed must be non-negative")
    ss = np.random.SeedSequence(int(seed) & _MASK64, spawn_key=stream_key(name, *indices))
    return np.random.Generator(np.random.Philox(ss))

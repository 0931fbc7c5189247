"""Seedable, splittable counter-based random streams.

Every random decision in a run draws from a substream named by a path,
e.g. ``stream(seed, "scene", "val", 17)`` or
``stream(seed, "step", epoch, step, "cutmix")``.  The path is folded into a
``numpy.random.SeedSequence`` spawn key and drives a Philox generator, so
substreams are independent of one another and of the order in which they
are created.  Nothing in a run keeps mutable generator state across steps;
resuming from an epoch cursor therefore replays the identical streams.
"""
from __future__ import annotations

import zlib

import numpy as np

SCHEME = "philox-seedseq-path-v1"


def _path_key(part) -> int:
    if isinstance(part, (bool, np.bool_)):
        raise TypeError("booleans are not valid stream path parts")
    if isinstance(part, (int, np.integer)):
        if part < 0:
            raise ValueError("stream path integers must be non-negative")
        return int(part)
    if isinstance(part, str):
        # tag strings so "3" and 3 never collide
        return (1 << 40) | zlib.crc32(part.encode("utf-8"))
    raise TypeError(f"unsupported stream path part {part!r}")


def stream(seed: int, *path) -> np.random.Generator:
    """Independent generator for ``path`` under root ``seed``."""
    if seed < 0:
        raise ValueError("seed must be non-negative")
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(_path_key(p) for p in path))
    return np.random.Generator(np.random.Philox(ss))


def derive_seed(seed: int, *path) -> int:
    """A 63-bit integer seed derived from ``path`` (for model initialisation)."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(_path_key(p) for p in path))
    return int(ss.generate_state(2, dtype=np.uint32).view(np.uint64)[0] >> np.uint64(1))

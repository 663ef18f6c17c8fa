"""Named, counter-based random streams.

Every consumer of randomness (a rollout member, one diffusion trajectory,
the data sampler, parameter init) gets its own stream addressed by a root
seed plus a path of name parts. Streams are Philox generators keyed by a
hash of the path, so the draw order of one stream never depends on how
many other streams exist or in what order they are consumed. Serial and
parallel execution therefore sample identically.
"""

from __future__ import annotations

import hashlib

import numpy as np


def stream_name(root_seed: int, *path) -> str:
    return f"{int(root_seed)}:" + "/".join(str(p) for p in path)


def stream(root_seed: int, *path) -> np.random.Generator:
    """Return the generator for one named stream. Same name, same draws."""
    name = stream_name(root_seed, *path)
    digest = hashlib.blake2b(name.encode("utf-8"), digest_size=16).digest()
    key = int.from_bytes(digest, "little")
    return np.random.Generator(np.random.Philox(key=key))


def derive_seed(root_seed: int, *path) -> int:
    """Fold a stream path into a new root seed.

    Used where an API wants a single integer seed (e.g. per-iteration
    rollout roots) without risking collisions between call sites.
    """
    name = stream_name(root_seed, *path)
    digest = hashlib.blake2b(name.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")

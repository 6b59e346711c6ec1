"""Seed derivation, deterministic parallelism, and file helpers.

Every random draw in the package comes from a generator derived via
``derive_rng(seed, *key)``. The key encodes what the stream is for (attack
start, shuffle, init, ...) plus indices such as example and restart, so
results never depend on scheduling, chunking, or thread count.
"""
from __future__ import annotations

import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, Sequence, TypeVar

import numpy as np

# Stream kinds used as the first spawn-key component.
STREAM_INIT = 1
STREAM_SHUFFLE = 2
STREAM_ATTACK = 3
STREAM_BASELINE = 4
STREAM_AUGMENT = 5
STREAM_SPLIT = 6
STREAM_SYNTH = 7

# Fixed row-chunk size for batched per-example work. Chunk boundaries depend
# only on this constant, never on the thread count, so outputs are identical
# for any --threads value.
CHUNK_ROWS = 64

T = TypeVar("T")
R = TypeVar("R")


def derive_rng(seed: int, *key: int) -> np.random.Generator:
    """Generator for the stream identified by (seed, *key)."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.PCG64(ss))


def derive_seed(seed: int, *key: int) -> int:
    """A 64-bit sub-seed for handing to another component."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in key))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def chunk_slices(n: int, chunk: int = CHUNK_ROWS) -> list[slice]:
    """Fixed decomposition of ``range(n)`` into row slices."""
    return [slice(i, min(i + chunk, n)) for i in range(0, n, chunk)]


def parallel_map(fn: Callable[[T], R], items: Sequence[T], threads: int = 1) -> list[R]:
    """Map ``fn`` over ``items``, preserving order.

    Items must be independent; with ``threads > 1`` they are dispatched to a
    thread pool (numpy releases the GIL inside BLAS kernels).
    """
    if threads <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def stable_json(obj) -> str:
    """Canonical JSON used everywhere a file must be byte-reproducible."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)

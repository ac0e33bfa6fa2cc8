"""Seed derivation, content hashing, and the shared worker pool."""

from __future__ import annotations

import hashlib
import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, Sequence, TypeVar

import numpy as np

T = TypeVar("T")
U = TypeVar("U")

THREADS_ENV = "CATMOUSE_THREADS"


def stable_digest(*parts) -> bytes:
    """SHA-256 over a flat tag tuple. Only ints, floats, strings and bools
    are accepted so the digest never depends on repr() quirks."""
    h = hashlib.sha256()
    for p in parts:
        if isinstance(p, bool):
            h.update(b"b" + (b"1" if p else b"0"))
        elif isinstance(p, int):
            h.update(b"i" + str(p).encode())
        elif isinstance(p, float):
            h.update(b"f" + p.hex().encode())
        elif isinstance(p, str):
            h.update(b"s" + p.encode("utf-8"))
        else:
            raise TypeError(f"unhashable seed part {p!r} of type {type(p).__name__}")
        h.update(b"\x00")
    return h.digest()


def derive_seed(*parts) -> int:
    """64-bit seed derived from a tag tuple."""
    return int.from_bytes(stable_digest(*parts)[:8], "little")


def rng_for(*parts) -> np.random.Generator:
    """Deterministic generator keyed by a tag tuple.

    Uses the counter-based Philox bit generator so distinct keys give
    independent streams regardless of how many draws each stream makes.
    """
    key = np.frombuffer(stable_digest(*parts)[:16], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def worker_count() -> int:
    """Worker count for parallelizable stages; CATMOUSE_THREADS overrides."""
    raw = os.environ.get(THREADS_ENV, "")
    if raw.strip():
        try:
            n = int(raw)
        except ValueError as e:
            raise ValueError(f"{THREADS_ENV} must be an integer, got {raw!r}") from e
        if n < 1:
            raise ValueError(f"{THREADS_ENV} must be >= 1, got {n}")
        return n
    return os.cpu_count() or 1


def parallel_map(fn: Callable[[T], U], items: Sequence[T]) -> list[U]:
    """Order-preserving map over independent items.

    Each item is computed independently and results are merged in input
    order, so the output is identical at any worker count.
    """
    n = worker_count()
    if n == 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))

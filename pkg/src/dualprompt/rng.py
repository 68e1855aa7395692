"""Deterministic random-stream derivation.

Every stochastic component draws from its own stream derived from the
single per-run 64-bit seed plus a textual tag (and optional integer
counters such as epoch/step). Streams with distinct tags are
statistically independent, and the same (seed, tags) pair always yields
the same stream, across processes and platforms.
"""

from __future__ import annotations

import zlib

import numpy as np


def _tag_to_int(tag: str | int) -> int:
    if isinstance(tag, int):
        return tag & 0xFFFFFFFF
    return zlib.crc32(tag.encode("utf-8"))


def derive_rng(seed: int, *tags: str | int) -> np.random.Generator:
    """Return a Generator for the stream identified by (seed, *tags).

    Philox is counter-based, so distinct entropy keys give independent
    streams without any shared mutable state.
    """
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF] + [_tag_to_int(t) for t in tags]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))

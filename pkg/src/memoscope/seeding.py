"""Deterministic derivation of independent random streams.

A root seed plus a tuple of labels (strings or ints) maps to one
``numpy.random.Generator``.  Labels are hashed individually with CRC-32, so
a stream depends only on its own labels: adding new sweep cells or reordering
an experiment never perturbs the streams of existing cells.
"""

from __future__ import annotations

import zlib

import numpy as np


def _label_word(label) -> int:
    if isinstance(label, (int, np.integer)):
        return int(label) & 0xFFFFFFFF
    return zlib.crc32(str(label).encode("utf-8"))


def seed_sequence(root_seed: int, *labels) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(root_seed) & 0xFFFFFFFF] + [_label_word(l) for l in labels])


def stream(root_seed: int, *labels) -> np.random.Generator:
    """Generator for (root_seed, labels); equal arguments give equal streams."""
    return np.random.Generator(np.random.PCG64(seed_sequence(root_seed, *labels)))


def child_seed(root_seed: int, *labels) -> int:
    """A derived 32-bit seed, for handing to code that wants a plain int."""
    return int(seed_sequence(root_seed, *labels).generate_state(1, np.uint32)[0])

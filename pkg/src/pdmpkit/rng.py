"""Per-path random streams.

Each path owns a Philox (counter-based) generator keyed by a 128-bit hash of
``(seed, path_index)``. Streams are therefore independent of how paths are
distributed over workers.
"""

from __future__ import annotations

import hashlib

import numpy as np

_BLOCK = 128


def substream_key(seed: int, index: int, tag: str = "path") -> int:
    blob = f"{tag}:{int(seed)}:{int(index)}".encode()
    return int.from_bytes(hashlib.blake2b(blob, digest_size=16).digest(), "little")


class PathRng:
    """Buffered scalar draws from a keyed Philox stream.

    Exposes ``uniform()`` and ``normal()`` with the same zero-argument
    signatures as :class:`numpy.random.Generator`, so either can be passed to
    the samplers.
    """

    __slots__ = ("_gen", "_ubuf", "_upos", "_nbuf", "_npos")

    def __init__(self, seed: int, index: int, tag: str = "path"):
        self._gen = np.random.Generator(np.random.Philox(key=substream_key(seed, index, tag)))
        self._ubuf = []
        self._upos = 0
        self._nbuf = []
        self._npos = 0

    def uniform(self) -> float:
        if self._upos >= len(self._ubuf):
            self._ubuf = self._gen.random(_BLOCK).tolist()
            self._upos = 0
        u = self._ubuf[self._upos]
        self._upos += 1
        return u

    def normal(self) -> float:
        if self._npos >= len(self._nbuf):
            self._nbuf = self._gen.standard_normal(_BLOCK).tolist()
            self._npos = 0
        z = self._nbuf[self._npos]
        self._npos += 1
        return z

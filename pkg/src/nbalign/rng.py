"""Deterministic random-stream management.

Every run owns a single root seed. Independent streams are derived from it
by hashing a path of labels (strings or integers) into a Philox key, so the
stream named ("rollout", 2, 5) is identical across reruns and unrelated to
("rollout", 2, 6). Counter-based generation means no stream ever has to be
advanced past another's draws.
"""

from __future__ import annotations

import hashlib

import numpy as np

__all__ = ["stream", "stream_key"]


def stream_key(root_seed: int, *path: int | str) -> np.ndarray:
    """Derive a 128-bit Philox key from a root seed and a label path."""
    h = hashlib.sha256()
    h.update(int(root_seed).to_bytes(8, "little", signed=False))
    for part in path:
        if isinstance(part, (int, np.integer)):
            h.update(b"i" + int(part).to_bytes(8, "little", signed=True))
        elif isinstance(part, str):
            raw = part.encode("utf-8")
            h.update(b"s" + len(raw).to_bytes(4, "little") + raw)
        else:
            raise TypeError(f"stream path element {part!r} must be int or str")
    digest = h.digest()[:16]
    return np.frombuffer(digest, dtype=np.uint64)


def stream(root_seed: int, *path: int | str) -> np.random.Generator:
    """Return the generator for the stream identified by ``path``."""
    return np.random.Generator(np.random.Philox(key=stream_key(root_seed, *path)))

"""Small shared helpers: deterministic RNG derivation and atomic file writes."""

from __future__ import annotations

import os
import tempfile
import zlib
from pathlib import Path

import numpy as np


def derive_rng(seed: int, *tags: int | str) -> np.random.Generator:
    """Return a Generator keyed by ``seed`` plus a stable tag path.

    Tags keep independent random streams (init, shuffling, dropout, per-image
    noise, ...) from colliding while staying reproducible across runs and
    platforms.  String tags are folded to integers with CRC32 so the key
    material is plain ints, which SeedSequence hashes identically everywhere.
    """
    material = [int(seed) & 0xFFFFFFFF]
    for tag in tags:
        if isinstance(tag, str):
            material.append(zlib.crc32(tag.encode("utf-8")))
        else:
            material.append(int(tag) & 0xFFFFFFFF)
    return np.random.default_rng(np.random.SeedSequence(material))


def atomic_write_bytes(path: str | Path, payload: bytes) -> None:
    """Write ``payload`` to ``path`` via a temp file + rename.

    Readers never observe a half-written file; a crash leaves either the old
    content or nothing.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str | Path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))

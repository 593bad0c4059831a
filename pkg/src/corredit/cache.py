"""MD5-keyed on-disk store for correspondence fields.

Keys are the digest of a canonical byte serialization of an ordered image
group, so re-running the same group skips extraction entirely.
"""
from __future__ import annotations

import hashlib
import logging
import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .corrfield import CorrField
from .errors import IntegrityError, ParameterError
from .imageio import check_image, quantize

log = logging.getLogger(__name__)

_ENTRY_MAGIC = b"ECE1"
_ENTRY_VERSION = 1


def md5_hex(data: bytes) -> str:
    return hashlib.md5(data).hexdigest()


def canonical_bytes(images: list[np.ndarray]) -> bytes:
    """Per image: big-endian uint32 height, width, channels, then the
    8-bit quantized pixels in row-major order."""
    parts = []
    for image in images:
        image = check_image(image)
        h, w, c = image.shape
        parts.append(struct.pack(">3I", h, w, c))
        parts.append(quantize(image).tobytes(order="C"))
    return b"".join(parts)


def cache_key(images: list[np.ndarray]) -> str:
    if not images:
        raise ParameterError("cache_key needs at least one image")
    return md5_hex(canonical_bytes(images))


@dataclass
class CorrCacheEntry:
    """Cached fields for an ordered pair: ``forward`` maps the second image
    to the first, ``backward`` the first to the second."""

    key: str
    forward: CorrField
    backward: CorrField

    def to_bytes(self) -> bytes:
        a, b = self.forward.to_bytes(), self.backward.to_bytes()
        body = (_ENTRY_MAGIC + struct.pack("<I", _ENTRY_VERSION) + self.key.encode("ascii")
                + struct.pack("<Q", len(a)) + a + struct.pack("<Q", len(b)) + b)
        return body + hashlib.md5(body).digest()

    @classmethod
    def from_bytes(cls, blob: bytes, key: str | None = None) -> "CorrCacheEntry":
        try:
            body, digest = blob[:-16], blob[-16:]
            if len(blob) < 16 + 8 + 32 or hashlib.md5(body).digest() != digest:
                raise ValueError("checksum mismatch")
            if body[:4] != _ENTRY_MAGIC:
                raise ValueError("bad magic")
            (version,) = struct.unpack("<I", body[4:8])
            if version != _ENTRY_VERSION:
                raise ValueError(f"unsupported version {version}")
            stored_key = body[8:40].decode("ascii")
            pos = 40
            (na,) = struct.unpack("<Q", body[pos:pos + 8])
            fwd = CorrField.from_bytes(body[pos + 8:pos + 8 + na])
            pos += 8 + na
            (nb,) = struct.unpack("<Q", body[pos:pos + 8])
            bwd = CorrField.from_bytes(body[pos + 8:pos + 8 + nb])
            if pos + 8 + nb != len(body):
                raise ValueError("trailing bytes")
        except (ValueError, struct.error, UnicodeDecodeError) as exc:
            raise IntegrityError(f"corrupt cache entry {key}: {exc}", key=key) from exc
        if key is not None and stored_key != key:
            raise IntegrityError(f"cache entry {key} holds key {stored_key}", key=key)
        return cls(stored_key, fwd, bwd)


class CorrCache:
    """One file per key under ``directory``; writes are atomic renames."""

    def __init__(self, directory: str | Path):
        self.directory = Path(directory)

    def path(self, key: str) -> Path:
        return self.directory / key

    def get(self, key: str) -> CorrCacheEntry | None:
        path = self.path(key)
        try:
            blob = path.read_bytes()
        except FileNotFoundError:
            return None
        except OSError as exc:
            raise IntegrityError(f"unreadable cache entry {key}: {exc}", key=key) from exc
        return CorrCacheEntry.from_bytes(blob, key)

    def put(self, entry: CorrCacheEntry) -> Path:
        self.directory.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=self.directory, prefix=".tmp-")
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(entry.to_bytes())
            os.replace(tmp, self.path(entry.key))
        except BaseException:
            Path(tmp).unlink(missing_ok=True)
            raise
        log.debug("cached correspondence %s", entry.key)
        return self.path(entry.key)

    def discard(self, key: str) -> None:
        self.path(key).unlink(missing_ok=True)


class MemoryCache:
    """In-process stand-in for :class:`CorrCache` with the same interface."""

    def __init__(self):
        self._blobs: dict[str, bytes] = {}

    def get(self, key: str) -> CorrCacheEntry | None:
        blob = self._blobs.get(key)
        return None if blob is None else CorrCacheEntry.from_bytes(blob, key)

    def put(self, entry: CorrCacheEntry) -> None:
        self._blobs[entry.key] = entry.to_bytes()

    def discard(self, key: str) -> None:
        self._blobs.pop(key, None)

"""Framed binary file helpers.

Every binary artifact (feature store, model checkpoint, search index) shares
one envelope: an 8-byte ASCII magic, a little-endian uint32 format version,
the payload, and a trailing CRC-32 of the payload. Readers reject wrong
magic, unknown versions and checksum mismatches before any payload parsing.
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

from .errors import DataError

MAGIC_LEN = 8

FEATURES_MAGIC = b"OVIS.FTR"
CHECKPOINT_MAGIC = b"OVIS.MDL"
INDEX_MAGIC = b"OVIS.IDX"


class FileFormatError(DataError):
    """Corrupt or foreign binary file: bad magic, bad CRC, truncated data."""


def frame(magic: bytes, payload: bytes, version: int = 1) -> bytes:
    if len(magic) != MAGIC_LEN:
        raise ValueError(f"magic must be {MAGIC_LEN} bytes, got {len(magic)}")
    return magic + struct.pack("<I", version) + payload + struct.pack("<I", zlib.crc32(payload))


def write_framed(path: str | Path, magic: bytes, payload: bytes, version: int = 1) -> None:
    Path(path).write_bytes(frame(magic, payload, version))


def read_framed(path: str | Path, magic: bytes, max_version: int = 1) -> tuple[int, bytes]:
    """Return (version, payload) after validating magic and CRC-32."""
    blob = Path(path).read_bytes()
    if len(blob) < MAGIC_LEN + 8:
        raise FileFormatError(f"{path}: truncated file ({len(blob)} bytes)")
    if blob[:MAGIC_LEN] != magic:
        raise FileFormatError(
            f"{path}: bad magic {blob[:MAGIC_LEN]!r}, expected {magic!r}"
        )
    (version,) = struct.unpack_from("<I", blob, MAGIC_LEN)
    if version < 1 or version > max_version:
        raise FileFormatError(f"{path}: unsupported format version {version}")
    payload = blob[MAGIC_LEN + 4 : -4]
    (stored_crc,) = struct.unpack_from("<I", blob, len(blob) - 4)
    actual_crc = zlib.crc32(payload)
    if stored_crc != actual_crc:
        raise FileFormatError(
            f"{path}: CRC mismatch (stored {stored_crc:#010x}, computed {actual_crc:#010x})"
        )
    return version, payload


class PayloadReader:
    """Sequential little-endian reader with bounds checking."""

    def __init__(self, payload: bytes, source: str = "<payload>") -> None:
        self._buf = payload
        self._pos = 0
        self._source = source

    def _take(self, n: int) -> bytes:
        if self._pos + n > len(self._buf):
            raise FileFormatError(f"{self._source}: truncated payload")
        out = self._buf[self._pos : self._pos + n]
        self._pos += n
        return out

    def u8(self) -> int:
        return self._take(1)[0]

    def u16(self) -> int:
        return struct.unpack("<H", self._take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self._take(4))[0]

    def f32(self) -> float:
        return struct.unpack("<f", self._take(4))[0]

    def raw(self, n: int) -> bytes:
        return self._take(n)

    def string(self) -> str:
        n = self.u16()
        return self._take(n).decode("utf-8")

    def done(self) -> bool:
        return self._pos == len(self._buf)

    def expect_done(self) -> None:
        if not self.done():
            raise FileFormatError(
                f"{self._source}: {len(self._buf) - self._pos} unexpected trailing bytes"
            )


class PayloadWriter:
    """Sequential little-endian writer mirroring PayloadReader."""

    def __init__(self) -> None:
        self._parts: list[bytes] = []

    def u8(self, x: int) -> None:
        self._parts.append(struct.pack("<B", x))

    def u16(self, x: int) -> None:
        self._parts.append(struct.pack("<H", x))

    def u32(self, x: int) -> None:
        self._parts.append(struct.pack("<I", x))

    def f32(self, x: float) -> None:
        self._parts.append(struct.pack("<f", x))

    def raw(self, b: bytes) -> None:
        self._parts.append(b)

    def string(self, s: str) -> None:
        data = s.encode("utf-8")
        self.u16(len(data))
        self._parts.append(data)

    def getvalue(self) -> bytes:
        return b"".join(self._parts)

"""Little-endian binary container shared by bank and checkpoint files.

Layout: 8-byte magic, u32 format version, u64 payload length, payload,
u32 CRC-32 of the payload.
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import ChecksumError, FormatError, TruncatedError, VersionError

_HEADER = struct.Struct("<8sIQ")
_CRC = struct.Struct("<I")


class Writer:
    def __init__(self):
        self._parts: list[bytes] = []

    def u64(self, v: int) -> None:
        self._parts.append(struct.pack("<Q", int(v)))

    def i64(self, v: int) -> None:
        self._parts.append(struct.pack("<q", int(v)))

    def f64(self, v: float) -> None:
        self._parts.append(struct.pack("<d", float(v)))

    def boolean(self, v: bool) -> None:
        self._parts.append(b"\x01" if v else b"\x00")

    def text(self, s: str) -> None:
        raw = s.encode("utf-8")
        self.u64(len(raw))
        self._parts.append(raw)

    def array(self, a) -> None:
        a = np.asarray(a, dtype="<f8")
        self.u64(a.ndim)
        for d in a.shape:
            self.u64(d)
        self._parts.append(np.ascontiguousarray(a).tobytes())

    def int_array(self, a) -> None:
        a = np.asarray(a, dtype="<i8").ravel()
        self.u64(a.size)
        self._parts.append(a.tobytes())

    def payload(self) -> bytes:
        return b"".join(self._parts)


class Reader:
    def __init__(self, data: bytes):
        self._data = data
        self._pos = 0

    def _take(self, n: int) -> bytes:
        end = self._pos + n
        if end > len(self._data):
            raise TruncatedError("payload ended early")
        out = self._data[self._pos:end]
        self._pos = end
        return out

    def u64(self) -> int:
        return struct.unpack("<Q", self._take(8))[0]

    def i64(self) -> int:
        return struct.unpack("<q", self._take(8))[0]

    def f64(self) -> float:
        return struct.unpack("<d", self._take(8))[0]

    def boolean(self) -> bool:
        return self._take(1) != b"\x00"

    def text(self) -> str:
        return self._take(self.u64()).decode("utf-8")

    def array(self) -> np.ndarray:
        ndim = self.u64()
        shape = tuple(self.u64() for _ in range(ndim))
        count = int(np.prod(shape)) if shape else 1
        raw = self._take(8 * count)
        return np.frombuffer(raw, dtype="<f8").astype(float).reshape(shape)

    def int_array(self) -> np.ndarray:
        n = self.u64()
        return np.frombuffer(self._take(8 * n), dtype="<i8").astype(np.int64)

    def done(self) -> None:
        if self._pos != len(self._data):
            raise FormatError("trailing bytes in payload")


def write_container(path, magic: bytes, version: int, payload: bytes) -> None:
    blob = _HEADER.pack(magic, version, len(payload)) + payload + _CRC.pack(zlib.crc32(payload))
    Path(path).write_bytes(blob)


def read_container(path, magic: bytes, version: int) -> bytes:
    blob = Path(path).read_bytes()
    if len(blob) < _HEADER.size:
        raise TruncatedError(f"{path}: file shorter than header")
    got_magic, got_version, length = _HEADER.unpack_from(blob)
    if got_magic != magic:
        raise FormatError(f"{path}: bad magic {got_magic!r}")
    if got_version != version:
        raise VersionError(f"{path}: format version {got_version}, expected {version}")
    end = _HEADER.size + length
    if len(blob) < end + _CRC.size:
        raise TruncatedError(f"{path}: expected {end + _CRC.size} bytes, found {len(blob)}")
    if len(blob) > end + _CRC.size:
        raise FormatError(f"{path}: trailing bytes after checksum")
    payload = blob[_HEADER.size:end]
    (crc,) = _CRC.unpack_from(blob, end)
    if crc != zlib.crc32(payload):
        raise ChecksumError(f"{path}: CRC mismatch")
    return payload

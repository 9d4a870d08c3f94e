"""Little-endian binary container helpers shared by the on-disk formats.

Every dicekit artifact starts with a 4-byte magic, a uint32 format version,
and (for container formats) a JSON metadata blob that echoes the effective
configuration that produced the file.  All multi-byte integers are unsigned
little-endian; all floats are IEEE-754 binary32 unless noted.
"""

from __future__ import annotations

import json
import struct
from typing import BinaryIO

import numpy as np

MAGIC_SCENARIOS = b"DICE"
MAGIC_OUTCOMES = b"DICO"
MAGIC_CHECKPOINT = b"DICP"
MAGIC_EMBEDDINGS = b"DICM"
MAGIC_CENTROIDS = b"DICC"


class BinaryFormatError(Exception):
    """Raised for malformed, truncated, or inconsistent binary files.

    Carries the source path and the byte offset at which the problem was
    detected so corrupt files can be diagnosed without a hex editor.
    """

    def __init__(self, message: str, *, path: str | None = None, offset: int | None = None):
        self.path = path
        self.offset = offset
        where = []
        if path is not None:
            where.append(f"file {path!r}")
        if offset is not None:
            where.append(f"byte offset {offset}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)


class Reader:
    """Cursor over a binary stream with typed reads and offset tracking."""

    def __init__(self, f: BinaryIO, path: str | None = None):
        self._f = f
        self.path = path
        self.offset = 0

    def fail(self, message: str, offset: int | None = None) -> BinaryFormatError:
        return BinaryFormatError(
            message, path=self.path, offset=self.offset if offset is None else offset
        )

    def read_exact(self, n: int, what: str) -> bytes:
        start = self.offset
        buf = self._f.read(n)
        if len(buf) != n:
            raise BinaryFormatError(
                f"truncated file while reading {what}: wanted {n} bytes, got {len(buf)}",
                path=self.path,
                offset=start,
            )
        self.offset += n
        return buf

    def u8(self, what: str) -> int:
        return self.read_exact(1, what)[0]

    def u16(self, what: str) -> int:
        return struct.unpack("<H", self.read_exact(2, what))[0]

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.read_exact(4, what))[0]

    def i32(self, what: str) -> int:
        return struct.unpack("<i", self.read_exact(4, what))[0]

    def f32(self, what: str) -> float:
        return struct.unpack("<f", self.read_exact(4, what))[0]

    def str16(self, what: str) -> str:
        n = self.u16(what + " length")
        raw = self.read_exact(n, what)
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError as e:
            raise self.fail(f"{what} is not valid UTF-8: {e}") from e

    def f32_array(self, shape: tuple[int, ...], what: str) -> np.ndarray:
        count = 1
        for s in shape:
            count *= int(s)
        buf = self.read_exact(4 * count, what)
        return np.frombuffer(buf, dtype="<f4").reshape(shape).copy()

    def typed_array(self, dtype: str, count: int, what: str) -> np.ndarray:
        dt = np.dtype(dtype)
        buf = self.read_exact(dt.itemsize * int(count), what)
        return np.frombuffer(buf, dtype=dt).copy()

    def json_blob(self, what: str) -> dict:
        start = self.offset
        n = self.u32(what + " length")
        if n == 0:
            return {}
        raw = self.read_exact(n, what)
        try:
            return json.loads(raw.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise BinaryFormatError(
                f"malformed {what}: {e}", path=self.path, offset=start
            ) from e

    def expect_magic(self, magic: bytes, kind: str) -> None:
        start = self.offset
        got = self.read_exact(len(magic), f"{kind} magic")
        if got != magic:
            raise BinaryFormatError(
                f"malformed header: expected {kind} magic {magic!r}, got {got!r}",
                path=self.path,
                offset=start,
            )

    def expect_version(self, version: int, kind: str) -> None:
        start = self.offset
        got = self.u32(f"{kind} version")
        if got != version:
            raise BinaryFormatError(
                f"unsupported {kind} version {got}, expected {version}",
                path=self.path,
                offset=start,
            )


class Writer:
    """Mirror of Reader for serialization; tracks offsets for symmetry."""

    def __init__(self, f: BinaryIO, path: str | None = None):
        self._f = f
        self.path = path
        self.offset = 0

    def raw(self, data: bytes) -> None:
        self._f.write(data)
        self.offset += len(data)

    def u8(self, v: int) -> None:
        self.raw(struct.pack("<B", v))

    def u16(self, v: int) -> None:
        self.raw(struct.pack("<H", v))

    def u32(self, v: int) -> None:
        self.raw(struct.pack("<I", v))

    def i32(self, v: int) -> None:
        self.raw(struct.pack("<i", v))

    def f32(self, v: float) -> None:
        self.raw(struct.pack("<f", v))

    def str16(self, s: str) -> None:
        raw = s.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ValueError(f"string too long for str16 field: {len(raw)} bytes")
        self.u16(len(raw))
        self.raw(raw)

    def f32_array(self, arr: np.ndarray) -> None:
        self.raw(np.ascontiguousarray(arr, dtype="<f4").tobytes())

    def typed_array(self, arr: np.ndarray, dtype: str) -> None:
        self.raw(np.ascontiguousarray(arr, dtype=dtype).tobytes())

    def json_blob(self, obj: dict | None) -> None:
        if not obj:
            self.u32(0)
            return
        # sort_keys keeps byte-identical output for identical configs
        raw = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")
        self.u32(len(raw))
        self.raw(raw)

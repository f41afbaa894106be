"""Binary file helpers shared by the dataset and checkpoint formats."""

from __future__ import annotations

import os
import struct
import tempfile

import numpy as np


class FormatError(ValueError):
    """Corrupt or truncated file; the message names the failing offset."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class VersionError(FormatError):
    """File carries an unsupported format version."""


def atomic_write(path: str, payload: bytes) -> None:
    """Write via a temp file in the same directory, then rename."""
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class Reader:
    """Cursor over a byte buffer that reports offsets on truncation."""

    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(
                f"truncated payload: wanted {n} bytes, {len(self.buf) - self.pos} left",
                offset=self.pos,
            )
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        vals = struct.unpack(fmt, self.take(struct.calcsize(fmt)))
        return vals if len(vals) > 1 else vals[0]

    def text(self) -> str:
        n = self.unpack("<H")
        return self.take(n).decode("utf-8")

    def f64(self, count: int) -> np.ndarray:
        raw = self.take(8 * count)
        return np.frombuffer(raw, dtype="<f8").astype(np.float64)

    def f32(self, count: int) -> np.ndarray:
        raw = self.take(4 * count)
        return np.frombuffer(raw, dtype="<f4").astype(np.float64)

    def done(self) -> None:
        if self.pos != len(self.buf):
            raise FormatError(
                f"{len(self.buf) - self.pos} unexpected trailing bytes", offset=self.pos
            )


class Writer:
    """Byte buffer assembler mirroring :class:`Reader`."""

    def __init__(self):
        self.parts: list[bytes] = []

    def raw(self, b: bytes) -> None:
        self.parts.append(b)

    def pack(self, fmt: str, *vals) -> None:
        self.parts.append(struct.pack(fmt, *vals))

    def text(self, s: str) -> None:
        enc = s.encode("utf-8")
        self.pack("<H", len(enc))
        self.raw(enc)

    def f64(self, arr: np.ndarray) -> None:
        self.raw(np.ascontiguousarray(arr, dtype="<f8").tobytes())

    def f32(self, arr: np.ndarray) -> None:
        self.raw(np.ascontiguousarray(arr, dtype="<f4").tobytes())

    def getvalue(self) -> bytes:
        return b"".join(self.parts)

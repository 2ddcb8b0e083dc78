"""Little-endian binary helpers shared by the file containers."""

from __future__ import annotations

import struct


class ContainerError(ValueError):
    """Malformed container. ``code`` is one of BAD_MAGIC, SHORT_READ, DIM_OVERFLOW, TRAILING_BYTES, BAD_VALUE, MISSING_RECORD."""

    def __init__(self, code: str, message: str):
        super().__init__(f"{code}: {message}")
        self.code = code


class Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise ContainerError(
                "SHORT_READ", f"wanted {n} bytes at offset {self.pos}, file has {len(self.buf)}"
            )
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self, count: int = 1) -> tuple[int, ...]:
        return struct.unpack(f"<{count}I", self.take(4 * count))

    def magic(self, expected: bytes) -> None:
        got = self.buf[:4]
        if got != expected:
            raise ContainerError("BAD_MAGIC", f"expected {expected!r}, got {got!r}")
        self.pos = 4

    @property
    def done(self) -> bool:
        return self.pos == len(self.buf)

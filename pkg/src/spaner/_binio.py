"""Little-endian byte cursor shared by the binary file formats."""

from __future__ import annotations

import struct

from .errors import FormatError


class ByteReader:
    """Walks a byte string; every failure reports its byte offset."""

    def __init__(self, blob: bytes, path):
        self.blob = blob
        self.offset = 0
        self.path = str(path)

    def take(self, count: int, what: str) -> bytes:
        if self.offset + count > len(self.blob):
            raise FormatError(
                f"{self.path}: truncated reading {what} at byte {self.offset} "
                f"(wanted {count}, have {len(self.blob) - self.offset})")
        out = self.blob[self.offset:self.offset + count]
        self.offset += count
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def u8(self, what: str) -> int:
        return self.take(1, what)[0]

    def expect_end(self) -> None:
        if self.offset != len(self.blob):
            raise FormatError(
                f"{self.path}: {len(self.blob) - self.offset} trailing bytes "
                f"at byte {self.offset}")

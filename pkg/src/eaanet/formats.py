"""Shared helpers and error types for the binary volume/checkpoint formats."""

import struct
import zlib


class FormatError(ValueError):
    """Base class for unreadable files."""


class BadMagicError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass


class ChecksumError(FormatError):
    pass


def checksum(payload: bytes) -> int:
    return zlib.crc32(payload) & 0xFFFFFFFF


def seal(magic: bytes, payload: bytes) -> bytes:
    """Prefix ``magic`` and append the CRC-32 of ``payload`` as little-endian u32."""
    return magic + payload + struct.pack("<I", checksum(payload))


def verify(checksum_bytes: bytes, payload: bytes) -> None:
    (stored,) = struct.unpack("<I", checksum_bytes)
    actual = checksum(payload)
    if stored != actual:
        raise ChecksumError(f"checksum mismatch: stored {stored:#010x}, computed {actual:#010x}")


class Reader:
    """Cursor over a byte buffer that raises :class:`TruncatedFileError` on overrun."""

    def __init__(self, buf: bytes, pos: int = 0):
        self.buf = buf
        self.pos = pos

    def take(self, n: int) -> bytes:
        end = self.pos + n
        if end > len(self.buf):
            raise TruncatedFileError(f"need {n} bytes at offset {self.pos}, file has {len(self.buf)}")
        out = self.buf[self.pos:end]
        self.pos = end
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

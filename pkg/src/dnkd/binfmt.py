"""Helpers for the CRC32-trailed little-endian file formats."""

import os
import struct
import zlib

from .errors import BadMagic, ChecksumError, TruncatedFile, VersionMismatch

PREFIX = struct.Struct("<4sI")


def crc32(data):
    return zlib.crc32(data) & 0xFFFFFFFF


def seal(body):
    """Append the CRC32 of ``body``."""
    return body + struct.pack("<I", crc32(body))


def write_atomic(path, data):
    path = os.fspath(path)
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def check_prefix(data, magic, version, min_size):
    """Validate magic and version; ``min_size`` is the fixed header length."""
    if len(data) < 4 or data[:4] != magic:
        raise BadMagic(f"bad magic: expected {magic!r}, got {bytes(data[:4])!r}")
    if len(data) < PREFIX.size:
        raise TruncatedFile("file shorter than its header")
    _, found = PREFIX.unpack_from(data)
    if found != version:
        raise VersionMismatch(f"version mismatch: expected {version}, got {found}")
    if len(data) < min_size:
        raise TruncatedFile("file shorter than its header")


def check_body(data, expected_len):
    """``expected_len`` excludes the trailing CRC."""
    if len(data) < expected_len + 4:
        raise TruncatedFile(f"truncated file: {len(data)} bytes, expected {expected_len + 4}")
    if len(data) > expected_len + 4:
        raise ChecksumError(f"trailing garbage: {len(data) - expected_len - 4} extra bytes")
    (stored,) = struct.unpack_from("<I", data, expected_len)
    if crc32(data[:expected_len]) != stored:
        raise ChecksumError("checksum failure: CRC32 does not match contents")

"""Internet checksum (one's-complement sum of 16-bit words) and pseudo-headers."""

from __future__ import annotations

import struct


def ones_complement_sum(data: bytes) -> int:
    """16-bit one's-complement sum of ``data``, zero-padded to even length."""
    if len(data) % 2:
        data = bytes(data) + b"\x00"
    total = sum(struct.unpack(f"!{len(data) // 2}H", data))
    while total >> 16:
        total = (total & 0xFFFF) + (total >> 16)
    return total


def internet_checksum(data: bytes) -> int:
    return ~ones_complement_sum(data) & 0xFFFF


def pseudo_header(src: bytes, dst: bytes, protocol: int, length: int) -> bytes:
    """IPv4 (12-byte) or IPv6 (40-byte) pseudo-header for transport checksums."""
    if len(src) == 4:
        return src + dst + struct.pack("!BBH", 0, protocol, length)
    if len(src) == 16:
        return src + dst + struct.pack("!IxxxB", length, protocol)
    raise ValueError(f"address length {len(src)} is neither 4 nor 16")

"""Protocol-wide hashing helpers.

Every digest in the protocol is SHA-256.  Multi-argument hashes frame each
argument with a 2-byte big-endian length so tuples hash unambiguously.
"""
from __future__ import annotations

from hashlib import sha256

DIGEST_SIZE = 32
ZERO_DIGEST = bytes(DIGEST_SIZE)


def H(data: bytes) -> bytes:
    return sha256(data).digest()


def hash_args(*parts: bytes) -> bytes:
    """hash(a, b, ...) over length-framed arguments."""
    try:
        framed = b"".join([len(p).to_bytes(2, "big") + p for p in parts])
    except OverflowError:
        raise ValueError("hash argument longer than 65535 bytes") from None
    return sha256(framed).digest()


def u64(value: int) -> bytes:
    return value.to_bytes(8, "big")


def u32(value: int) -> bytes:
    return value.to_bytes(4, "big")


def u16(value: int) -> bytes:
    return value.to_bytes(2, "big")


def top_bits(digest: bytes, mu: int) -> int:
    """The leading ``mu`` bits of a digest as an unsigned integer."""
    if not 1 <= mu <= 8 * len(digest):
        raise ValueError(f"mu out of range: {mu}")
    return int.from_bytes(digest, "big") >> (8 * len(digest) - mu)

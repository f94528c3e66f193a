"""Bit-exact byte layouts for the transfer protocols.

Pure encode/decode with no transport dependency. All multi-byte fields are
little-endian. See FORMATS.md at the repository root for annotated hex
dumps of each layout.

Layouts:

* Statically placed region: ``payload . flag`` where ``flag`` is one byte at
  the tail (0x00 empty, 0x01 ready). Writes land in ascending address
  order, so an observed flag implies a complete payload.
* Metadata block (fixed rank D): ``elem_type u8 . ndims u8 . reserved 6x00 .
  dims D*u64 . remote_addr u64 . remote_token u64 . payload_len u64 . flag u8``
  for a total of ``8*D + 33`` bytes.
* Address-exchange message: ``edge_id u64 . base_addr u64 . token u64 .
  region_len u64 . mechanism u8`` - fixed 33 bytes.
"""
from __future__ import annotations

import enum
import struct
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import errors

FLAG_EMPTY = 0x00
FLAG_READY = 0x01

META_FIXED_BYTES = 33  # head (8) + trailer (24) + flag (1)


class ElemType(enum.IntEnum):
    """Element-type codes carried on the wire."""

    F32 = 0
    F64 = 1
    I32 = 2
    I64 = 3
    U8 = 4

    @property
    def size(self) -> int:
        return _ELEM_SIZES[self]

    @property
    def np_dtype(self) -> np.dtype:
        return _ELEM_DTYPES[self]


_ELEM_SIZES = {ElemType.F32: 4, ElemType.F64: 8, ElemType.I32: 4,
               ElemType.I64: 8, ElemType.U8: 1}
_ELEM_DTYPES = {ElemType.F32: np.dtype("<f4"), ElemType.F64: np.dtype("<f8"),
                ElemType.I32: np.dtype("<i4"), ElemType.I64: np.dtype("<i8"),
                ElemType.U8: np.dtype("u1")}


class Mechanism(enum.IntEnum):
    """Per-edge transfer mechanism code."""

    STATIC = 0
    DYNAMIC = 1


def payload_bytes(dims: Sequence[int], elem_type: ElemType) -> int:
    n = 1
    for d in dims:
        n *= d
    return n * elem_type.size


def static_region_size(dims: Sequence[int], elem_type: ElemType) -> int:
    """Region length for a statically placed tensor: payload plus tail flag."""
    return payload_bytes(dims, elem_type) + 1


def meta_block_size(rank: int) -> int:
    """Encoded metadata size for a fixed-rank edge."""
    return 8 * rank + META_FIXED_BYTES


@dataclass(frozen=True)
class MetaBlock:
    """Decoded tensor metadata for a dynamically allocated transfer."""

    dims: tuple[int, ...]
    elem_type: ElemType
    remote_addr: int
    remote_token: int
    payload_len: int

    @property
    def rank(self) -> int:
        return len(self.dims)


def encode_meta(dims: Sequence[int], elem_type: ElemType,
                remote_addr: int, remote_token: int) -> bytes:
    """Encode a metadata block with the tail flag already set.

    The sender transfers metadata with the flag byte set so that, written in
    ascending order, the flag is the last byte to land.
    """
    dims = tuple(int(d) for d in dims)
    rank = len(dims)
    if rank < 1:
        raise errors.RankZero("metadata requires rank >= 1")
    for d in dims:
        if d < 0:
            raise errors.LengthMismatch(f"negative dimension {d}")
    head = struct.pack("<BB6x", int(elem_type), rank)
    body = struct.pack(f"<{rank}Q", *dims)
    tail = struct.pack("<QQQB", remote_addr, remote_token,
                       payload_bytes(dims, elem_type), FLAG_READY)
    return head + body + tail


def decode_meta(data: bytes, expected_rank: int) -> MetaBlock:
    """Parse and validate a metadata block of known rank."""
    if len(data) < 2:
        raise errors.LengthMismatch(f"metadata truncated: {len(data)} bytes")
    elem_code, ndims = struct.unpack_from("<BB", data, 0)
    if ndims != expected_rank:
        raise errors.RankMismatch(f"encoded rank {ndims}, edge expects {expected_rank}")
    expected_len = meta_block_size(expected_rank)
    if len(data) != expected_len:
        raise errors.LengthMismatch(
            f"metadata is {len(data)} bytes, rank {expected_rank} needs {expected_len}")
    try:
        elem = ElemType(elem_code)
    except ValueError:
        raise errors.BadElemType(f"unknown element-type code {elem_code}") from None
    if data[-1] != FLAG_READY:
        raise errors.WireError("metadata flag byte is not set")
    dims = struct.unpack_from(f"<{ndims}Q", data, 8)
    remote_addr, remote_token, payload_len = struct.unpack_from("<QQQ", data, 8 + 8 * ndims)
    if payload_len != payload_bytes(dims, elem):
        raise errors.LengthMismatch(
            f"payload_len field {payload_len} != dims product {payload_bytes(dims, elem)}")
    return MetaBlock(dims, elem, remote_addr, remote_token, payload_len)


ADDR_MSG_BYTES = 33
_ADDR_FMT = "<QQQQB"


@dataclass(frozen=True)
class AddrExchangeMsg:
    """Receiver-side buffer coordinates shipped to the sender before a run."""

    edge_id: int
    base_addr: int
    token: int
    region_len: int
    mechanism: Mechanism

    def encode(self) -> bytes:
        return struct.pack(_ADDR_FMT, self.edge_id, self.base_addr, self.token,
                           self.region_len, int(self.mechanism))

    @staticmethod
    def decode(data: bytes) -> "AddrExchangeMsg":
        if len(data) != ADDR_MSG_BYTES:
            raise errors.LengthMismatch(
                f"address message is {len(data)} bytes, expected {ADDR_MSG_BYTES}")
        edge_id, base, token, length, mech = struct.unpack(_ADDR_FMT, data)
        if mech not in (0, 1):
            raise errors.BadElemType(f"unknown mechanism code {mech}")
        return AddrExchangeMsg(edge_id, base, token, length, Mechanism(mech))

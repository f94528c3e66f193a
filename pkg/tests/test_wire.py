import random
import struct

import pytest

from rdmaflow import errors
from rdmaflow.wire import (ADDR_MSG_BYTES, AddrExchangeMsg, ElemType, Mechanism,
                           decode_meta, encode_meta, meta_block_size,
                           static_region_size)


def reparse_meta(data: bytes):
    """Independent field-by-field parser used as the roundtrip oracle."""
    elem, ndims = data[0], data[1]
    assert data[2:8] == b"\x00" * 6
    dims = tuple(struct.unpack_from("<Q", data, 8 + 8 * i)[0] for i in range(ndims))
    off = 8 + 8 * ndims
    addr = struct.unpack_from("<Q", data, off)[0]
    token = struct.unpack_from("<Q", data, off + 8)[0]
    payload_len = struct.unpack_from("<Q", data, off + 16)[0]
    flag = data[off + 24]
    return elem, ndims, dims, addr, token, payload_len, flag


class TestMetaBlock:
    def test_reference_layout(self):
        data = encode_meta((3, 4), ElemType.F32, 0x1000, 0x42)
        assert len(data) == 49
        assert data[0] == 0x00  # F32
        assert data[1] == 0x02  # rank
        elem, ndims, dims, addr, token, payload_len, flag = reparse_meta(data)
        assert (elem, ndims, dims) == (0, 2, (3, 4))
        assert (addr, token) == (0x1000, 0x42)
        assert payload_len == 48
        assert flag == 0x01

    def test_flag_is_the_last_byte(self):
        data = encode_meta((5,), ElemType.U8, 0, 0)
        assert data[-1] == 0x01
        assert all(b != 0x01 or i == len(data) - 1
                   for i, b in enumerate(data[-9:], start=len(data) - 9) if i >= len(data) - 1)

    def test_empty_tensor(self):
        data = encode_meta((0,), ElemType.F64, 1, 2)
        meta = decode_meta(data, 1)
        assert meta.payload_len == 0
        assert meta.dims == (0,)

    def test_rank_zero(self):
        with pytest.raises(errors.RankZero):
            encode_meta((), ElemType.F32, 0, 0)

    def test_roundtrip_random_shapes(self):
        rng = random.Random(2024)
        for _ in range(1000):
            rank = rng.randint(1, 6)
            dims = tuple(rng.randint(0, 50) for _ in range(rank))
            elem = ElemType(rng.randint(0, 4))
            addr = rng.getrandbits(48)
            token = rng.getrandbits(64)
            data = encode_meta(dims, elem, addr, token)
            assert len(data) == meta_block_size(rank)
            # oracle: independent parser agrees field by field
            p_elem, p_rank, p_dims, p_addr, p_token, p_len, p_flag = reparse_meta(data)
            assert (p_elem, p_rank, p_dims) == (int(elem), rank, dims)
            assert (p_addr, p_token, p_flag) == (addr, token, 1)
            meta = decode_meta(data, rank)
            assert meta.dims == dims
            assert meta.elem_type == elem
            assert meta.remote_addr == addr
            assert meta.remote_token == token
            assert meta.payload_len == p_len

    def test_encode_of_decode_is_identity(self):
        rng = random.Random(77)
        for _ in range(200):
            rank = rng.randint(1, 5)
            dims = tuple(rng.randint(0, 9) for _ in range(rank))
            data = encode_meta(dims, ElemType(rng.randint(0, 4)),
                               rng.getrandbits(40), rng.getrandbits(64))
            meta = decode_meta(data, rank)
            again = encode_meta(meta.dims, meta.elem_type, meta.remote_addr,
                                meta.remote_token)
            assert again == data

    def test_rank_mismatch(self):
        data = encode_meta((1, 2, 3), ElemType.F32, 0, 0)
        with pytest.raises(errors.RankMismatch):
            decode_meta(data, 2)

    def test_bad_elem_type(self):
        data = bytearray(encode_meta((2, 2), ElemType.F32, 0, 0))
        data[0] = 9
        with pytest.raises(errors.BadElemType):
            decode_meta(bytes(data), 2)

    def test_payload_length_mismatch(self):
        data = bytearray(encode_meta((3, 4), ElemType.F32, 0, 0))
        off = 8 + 16 + 16  # head, dims, addr+token
        struct.pack_into("<Q", data, off, 47)
        with pytest.raises(errors.LengthMismatch):
            decode_meta(bytes(data), 2)

    def test_truncated_buffer(self):
        data = encode_meta((3, 4), ElemType.F32, 0, 0)
        with pytest.raises(errors.LengthMismatch):
            decode_meta(data[:-1] , 2)

    def test_unset_flag_rejected(self):
        data = bytearray(encode_meta((3,), ElemType.F32, 0, 0))
        data[-1] = 0
        with pytest.raises(errors.WireError):
            decode_meta(bytes(data), 1)


class TestStaticRegion:
    def test_sizes(self):
        assert static_region_size((3, 4), ElemType.F32) == 49
        assert static_region_size((1,), ElemType.U8) == 2
        assert static_region_size((1024, 1024), ElemType.F32) == 4_194_305


class TestAddrExchange:
    def test_fixed_size_roundtrip(self):
        msg = AddrExchangeMsg(7, 0xDEAD0000, 0xBEEF, 4096, Mechanism.DYNAMIC)
        data = msg.encode()
        assert len(data) == ADDR_MSG_BYTES == 33
        assert AddrExchangeMsg.decode(data) == msg

    def test_mechanism_byte(self):
        data = AddrExchangeMsg(1, 2, 3, 4, Mechanism.STATIC).encode()
        assert data[-1] == 0
        data = AddrExchangeMsg(1, 2, 3, 4, Mechanism.DYNAMIC).encode()
        assert data[-1] == 1

    def test_bad_length(self):
        with pytest.raises(errors.LengthMismatch):
            AddrExchangeMsg.decode(b"\x00" * 32)

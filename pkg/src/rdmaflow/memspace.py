"""Per-server simulated memory: regions, access tokens, arena sub-allocation.

Each simulated server owns one :class:`MemorySpace`, a flat byte-addressable
buffer. Registered regions model memory that remote devices may read or
write, gated by a random 64-bit access token (the moral equivalent of an
rkey). An :class:`ArenaAllocator` carves small buffers out of one large
registered region so transfer paths can hand out remotely accessible
addresses without registering a region per tensor.

All payload copies performed by transfer code go through
:meth:`MemorySpace.copy_bytes`, which feeds :class:`CopyCounters`; this is
the instrumentation the copy-elimination metrics are built on. Direct
reads/writes (``read_at``/``write_at``/``write_raw``) model DMA or local
compute and are deliberately not counted.
"""
from __future__ import annotations

import bisect
import random
import threading
from dataclasses import dataclass, replace
from typing import Callable, Optional

import numpy as np

from . import errors

DEFAULT_CAPACITY = 256 * 1024 * 1024
DEFAULT_ARENA_BYTES = 64 * 1024 * 1024
DEFAULT_MAX_REGIONS = 1024

_ALIGN = 8


def _align_up(n: int) -> int:
    return (n + _ALIGN - 1) & ~(_ALIGN - 1)


@dataclass(frozen=True)
class RegionHandle:
    """Value-like reference to a byte range inside some memory space.

    Arena allocations share the region id and token of their backing
    region, exactly like sub-ranges of one registered memory region.
    """

    region_id: int
    base_addr: int
    length: int
    access_token: int

    @property
    def end(self) -> int:
        return self.base_addr + self.length


@dataclass
class CopyCounters:
    """Monotone per-space counters; reset only between runs."""

    payload_bytes_copied: int = 0
    payload_copy_events: int = 0
    serialize_bytes: int = 0

    def snapshot(self) -> "CopyCounters":
        return replace(self)

    def reset(self) -> None:
        self.payload_bytes_copied = 0
        self.payload_copy_events = 0
        self.serialize_bytes = 0


class _Region:
    __slots__ = ("region_id", "base", "length", "registered", "token")

    def __init__(self, region_id: int, base: int, length: int, registered: bool, token: int):
        self.region_id = region_id
        self.base = base
        self.length = length
        self.registered = registered
        self.token = token

    @property
    def end(self) -> int:
        return self.base + self.length


class MemorySpace:
    """Byte-addressable memory of one simulated server.

    Byte reads/writes may come from fabric delivery (remote writers) and
    from the local scheduler concurrently; each call is atomic under the
    space lock. Region allocation is bump-pointer (regions live for the
    whole run) with 8-byte-aligned bases.
    """

    def __init__(self, server_id: int, capacity: int = DEFAULT_CAPACITY, *,
                 max_regions: int = DEFAULT_MAX_REGIONS, seed: int = 0):
        self.server_id = server_id
        self.capacity = capacity
        self.max_regions = max_regions
        self.next_addr = 0
        self.counters = CopyCounters()
        #: optional hook called as on_copy(nbytes) after each counted copy
        self.on_copy: Optional[Callable[[int], None]] = None
        # np.zeros gets lazily zeroed pages, so big spaces are cheap to make
        self._mem = np.zeros(capacity, dtype=np.uint8)
        self._regions: dict[int, _Region] = {}
        self._next_region_id = 0
        self._lock = threading.RLock()
        self._rng = random.Random(((seed & 0xFFFFFFFF) << 20) ^ (server_id * 0x9E3779B1) ^ 0x5EED)

    # -- region management --------------------------------------------------

    def allocate_region(self, length: int, register: bool = False) -> RegionHandle:
        if length < 1:
            raise errors.ZeroLength(f"region length must be >= 1, got {length}")
        with self._lock:
            if len(self._regions) >= self.max_regions:
                raise errors.OutOfMemory(
                    f"server {self.server_id}: region table full ({self.max_regions})")
            base = _align_up(self.next_addr)
            if base + length > self.capacity:
                raise errors.OutOfMemory(
                    f"server {self.server_id}: need {length} bytes at {base}, "
                    f"capacity {self.capacity}")
            token = self._rng.getrandbits(64) if register else 0
            rid = self._next_region_id
            self._next_region_id += 1
            self._regions[rid] = _Region(rid, base, length, register, token)
            self.next_addr = base + length
            return RegionHandle(rid, base, length, token)

    def region_count(self) -> int:
        with self._lock:
            return len(self._regions)

    def _find_registered(self, addr: int, length: int) -> Optional[_Region]:
        for region in self._regions.values():
            if region.registered and region.base <= addr and addr + length <= region.end:
                return region
        return None

    def check_remote_access(self, addr: int, length: int, token: int) -> None:
        """Validate a remote read/write target; raises, never mutates."""
        with self._lock:
            region = self._find_registered(addr, length)
            if region is None:
                raise errors.RemoteOutOfBounds(
                    f"server {self.server_id}: [{addr}, {addr + length}) is not "
                    f"inside a registered region")
            if region.token != token:
                raise errors.BadToken(
                    f"server {self.server_id}: token mismatch for region {region.region_id}")

    def check_registered(self, handle: RegionHandle, offset: int = 0,
                         length: Optional[int] = None) -> None:
        """Verify a local range is registered (verb source/target rule)."""
        if length is None:
            length = handle.length - offset
        addr = handle.base_addr + offset
        with self._lock:
            region = self._find_registered(addr, length)
            if region is None or region.token != handle.access_token:
                raise errors.NotRegistered(
                    f"server {self.server_id}: [{addr}, {addr + length}) is not registered")

    # -- byte IO -------------------------------------------------------------

    def _check_handle_range(self, handle: RegionHandle, offset: int, length: int) -> int:
        if offset < 0 or length < 0 or offset + length > handle.length:
            raise errors.OutOfBounds(
                f"range [{offset}, {offset + length}) escapes handle of {handle.length} bytes")
        addr = handle.base_addr + offset
        if addr < 0 or addr + length > self.capacity:
            raise errors.OutOfBounds(f"address range [{addr}, {addr + length}) escapes space")
        return addr

    def read_at(self, handle: RegionHandle, offset: int, length: int) -> bytes:
        addr = self._check_handle_range(handle, offset, length)
        with self._lock:
            return self._mem[addr:addr + length].tobytes()

    def write_at(self, handle: RegionHandle, offset: int, data: bytes) -> None:
        addr = self._check_handle_range(handle, offset, len(data))
        with self._lock:
            self._mem[addr:addr + len(data)] = np.frombuffer(data, dtype=np.uint8)

    def view(self, handle: RegionHandle, offset: int = 0,
             length: Optional[int] = None) -> np.ndarray:
        """Writable uint8 view for local compute; caller synchronizes with transfers."""
        if length is None:
            length = handle.length - offset
        addr = self._check_handle_range(handle, offset, length)
        return self._mem[addr:addr + length]

    def read_raw(self, addr: int, length: int) -> bytes:
        """Raw read used by fabric delivery after access validation."""
        if addr < 0 or addr + length > self.capacity:
            raise errors.OutOfBounds(f"raw read [{addr}, {addr + length})")
        with self._lock:
            return self._mem[addr:addr + length].tobytes()

    def view_raw(self, addr: int, length: int) -> np.ndarray:
        """Unlocked view for fabric delivery sources, post-validation."""
        if addr < 0 or addr + length > self.capacity:
            raise errors.OutOfBounds(f"raw view [{addr}, {addr + length})")
        return self._mem[addr:addr + length]

    def write_raw(self, addr: int, data) -> None:
        """Raw write used by fabric delivery; atomic per call."""
        if addr < 0 or addr + len(data) > self.capacity:
            raise errors.OutOfBounds(f"raw write [{addr}, {addr + len(data)})")
        with self._lock:
            if isinstance(data, np.ndarray):
                self._mem[addr:addr + len(data)] = data
            else:
                self._mem[addr:addr + len(data)] = np.frombuffer(data, dtype=np.uint8)

    # -- instrumented copy ----------------------------------------------------

    def copy_bytes(self, src: RegionHandle, src_off: int,
                   dst: RegionHandle, dst_off: int, length: int) -> None:
        """Local memcpy counted against the payload-copy budget."""
        if length == 0:
            return
        src_addr = self._check_handle_range(src, src_off, length)
        dst_addr = self._check_handle_range(dst, dst_off, length)
        with self._lock:
            data = self._mem[src_addr:src_addr + length].copy()
            self._mem[dst_addr:dst_addr + length] = data
            self.counters.payload_bytes_copied += length
            self.counters.payload_copy_events += 1
        if self.on_copy is not None:
            self.on_copy(length)


class ArenaAllocator:
    """First-fit sub-allocator over one backing region.

    Block starts stay 8-byte aligned because reserved lengths are rounded
    up to 8; resident accounting is in requested bytes so ledgers stay
    exact. Freed blocks coalesce with neighbours.
    """

    def __init__(self, space: MemorySpace, backing: RegionHandle):
        self.space = space
        self.backing = backing
        self.current_resident = 0
        self.peak_resident = 0
        self._free: list[tuple[int, int]] = [(0, _align_down_len(backing.length))]
        self._live: dict[int, tuple[int, int]] = {}  # base_addr -> (requested, reserved)
        self._lock = threading.Lock()

    def alloc(self, length: int) -> RegionHandle:
        if length < 1:
            raise errors.ZeroLength(f"arena allocation must be >= 1 byte, got {length}")
        reserved = _align_up(length)
        with self._lock:
            for i, (off, block_len) in enumerate(self._free):
                if block_len >= reserved:
                    if block_len == reserved:
                        del self._free[i]
                    else:
                        self._free[i] = (off + reserved, block_len - reserved)
                    base = self.backing.base_addr + off
                    self._live[base] = (length, reserved)
                    self.current_resident += length
                    if self.current_resident > self.peak_resident:
                        self.peak_resident = self.current_resident
                    return RegionHandle(self.backing.region_id, base, length,
                                        self.backing.access_token)
        raise errors.ArenaExhausted(
            f"server {self.space.server_id}: no free block of {length} bytes "
            f"(resident {self.current_resident}/{self.backing.length})")

    def free(self, handle: RegionHandle) -> None:
        with self._lock:
            entry = self._live.pop(handle.base_addr, None)
            if entry is None:
                raise ValueError(f"not a live arena block: addr {handle.base_addr}")
            requested, reserved = entry
            off = handle.base_addr - self.backing.base_addr
            self._insert_free(off, reserved)
            self.current_resident -= requested

    def _insert_free(self, off: int, length: int) -> None:
        i = bisect.bisect_left(self._free, (off, 0))
        # coalesce with the previous block
        if i > 0 and self._free[i - 1][0] + self._free[i - 1][1] == off:
            prev_off, prev_len = self._free[i - 1]
            off, length = prev_off, prev_len + length
            del self._free[i - 1]
            i -= 1
        # coalesce with the next block
        if i < len(self._free) and off + length == self._free[i][0]:
            length += self._free[i][1]
            del self._free[i]
        self._free.insert(i, (off, length))

    def live_blocks(self) -> list[tuple[int, int]]:
        """(offset, reserved_length) of live blocks, sorted; for consistency scans."""
        with self._lock:
            out = []
            for base, (_req, reserved) in self._live.items():
                out.append((base - self.backing.base_addr, reserved))
            return sorted(out)


def _align_down_len(n: int) -> int:
    return n & ~(_ALIGN - 1)


class BufferRef:
    """Refcounted hold on an arena block, or a non-owned view.

    ``arena is None`` marks a view (static receive buffers, persistent
    variable storage wrappers, empty tensors); releases are then no-ops
    beyond the count.
    """

    __slots__ = ("handle", "arena", "_refs", "_lock")

    def __init__(self, handle: RegionHandle, arena: Optional[ArenaAllocator] = None,
                 refs: int = 1):
        self.handle = handle
        self.arena = arena
        self._refs = refs
        self._lock = threading.Lock()

    @property
    def nbytes(self) -> int:
        return self.handle.length

    @property
    def refs(self) -> int:
        return self._refs

    def retain(self, n: int = 1) -> "BufferRef":
        with self._lock:
            self._refs += n
        return self

    def release(self, n: int = 1) -> None:
        free_now = False
        with self._lock:
            self._refs -= n
            if self._refs < 0:
                raise AssertionError("buffer over-released")
            free_now = self._refs == 0 and self.arena is not None
        if free_now:
            self.arena.free(self.handle)

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        kind = "owned" if self.arena is not None else "view"
        return f"BufferRef({kind}, addr={self.handle.base_addr}, len={self.handle.length}, refs={self._refs})"


_NULL_HANDLE = RegionHandle(-1, 0, 0, 0)


def null_buffer() -> BufferRef:
    """Zero-length placeholder buffer for empty tensors."""
    return BufferRef(_NULL_HANDLE, None, refs=1)

"""Transfer protocol state machines: static placement, dynamic allocation,
and the copy-heavy fragmented RPC baseline.

These objects are driven by the per-server executors but are deliberately
self-contained so protocol tests can exercise them against a bare fabric.

Static placement: the sender writes payload and tail flag as one gather
verb; ascending delivery makes the flag byte land last, so the receiver's
flag poll doubles as a completeness check. Dynamic allocation: the sender
writes a fixed-rank metadata block (flag at its tail); the receiver then
allocates payload storage in registered memory and pulls the bytes with a
one-sided read. The RPC baseline serializes metadata plus payload into
fixed 4 KiB fragments flowing through a bounded ring of posted receive
slots, copying once into the ring at the sender and once out of it at the
receiver.
"""
from __future__ import annotations

import struct
from typing import Optional

from .. import errors
from ..analyzer import PlanEntry, TraceState
from ..fabric import Channel, MemRange
from ..graph import Tensor
from ..memspace import (ArenaAllocator, BufferRef, MemorySpace, RegionHandle,
                        null_buffer)
from ..wire import (FLAG_EMPTY, FLAG_READY, MetaBlock, decode_meta, encode_meta,
                    meta_block_size)

FRAGMENT_BYTES = 4096
FRAG_HEADER_FMT = "<QII"  # msg_id, frag_index, frag_count
FRAG_HEADER_BYTES = struct.calcsize(FRAG_HEADER_FMT)
FRAG_PAYLOAD_BYTES = FRAGMENT_BYTES - FRAG_HEADER_BYTES
RING_CAPACITY_BYTES = 64 * 1024
RING_SLOTS = RING_CAPACITY_BYTES // FRAGMENT_BYTES


class ZeroCopyViolation(errors.ProtocolError):
    """A send saw a non-registered payload after the tracing iteration."""


def _require_remote(entry: PlanEntry) -> None:
    if entry.remote_addr is None or entry.remote_token is None or entry.remote_len is None:
        raise errors.ProtocolError(
            f"edge {entry.edge_id}: address exchange has not completed")


class StaticSender:
    """Sender half of a statically placed edge."""

    def __init__(self, entry: PlanEntry, space: MemorySpace, arena: ArenaAllocator,
                 channel: Channel, flag_cell: RegionHandle):
        _require_remote(entry)
        self.entry = entry
        self.space = space
        self.arena = arena
        self.channel = channel
        self.flag_cell = flag_cell  # 1-byte registered cell holding 0x01
        self.sends = 0
        self.zero_copy_checks = 0

    def send(self, tensor: Tensor, *, stage_copy: bool,
             trace: Optional[TraceState] = None) -> None:
        entry = self.entry
        expected = entry.remote_len - 1
        if tensor.nbytes != expected:
            raise errors.SizeMismatch(
                f"edge {entry.edge_id}: tensor is {tensor.nbytes} bytes, "
                f"plan expects {expected}")
        if trace is not None and tensor.nbytes > 0:
            trace.record_transfer(tensor.buffer.handle.base_addr)
        self._assert_receiver_consumed()
        staging = None
        ranges = []
        if tensor.nbytes > 0:
            if stage_copy:
                staging = self.arena.alloc(tensor.nbytes)
                self.space.copy_bytes(tensor.buffer.handle, 0, staging, 0, tensor.nbytes)
                ranges.append(MemRange(staging))
            else:
                self._check_zero_copy(tensor)
                ranges.append(MemRange(tensor.buffer.handle, 0, tensor.nbytes))
        ranges.append(MemRange(self.flag_cell, 0, 1))
        verb = self.channel.one_sided_write(ranges, entry.remote_addr,
                                            entry.remote_token,
                                            tag=("static", entry.edge_id))
        self.channel.take_completion(verb)
        if staging is not None:
            self.arena.free(staging)
        self.sends += 1

    def _check_zero_copy(self, tensor: Tensor) -> None:
        self.zero_copy_checks += 1
        try:
            self.space.check_registered(tensor.buffer.handle, 0, tensor.nbytes)
        except errors.NotRegistered as exc:
            raise ZeroCopyViolation(
                f"edge {self.entry.edge_id}: payload not in registered memory "
                f"after tracing") from exc

    def _assert_receiver_consumed(self) -> None:
        # Simulation-level check of the iteration-barrier argument: the
        # previous transfer must have been consumed (flag cleared) before
        # the next write starts.
        rspace = self.channel.fabric.device_at(self.channel.qp.peer_endpoint).space
        flag_addr = self.entry.remote_addr + self.entry.remote_len - 1
        if rspace.read_raw(flag_addr, 1)[0] != FLAG_EMPTY:
            raise errors.ProtocolError(
                f"edge {self.entry.edge_id}: receiver has not consumed the "
                f"previous transfer")


class StaticReceiver:
    """Receiver half of a statically placed edge; poll-driven."""

    def __init__(self, entry: PlanEntry, space: MemorySpace):
        if entry.recv_buffer is None:
            raise errors.ProtocolError(f"edge {entry.edge_id}: no preallocated buffer")
        self.entry = entry
        self.space = space
        self.polls = 0

    def poll(self) -> Optional[Tensor]:
        """Pending -> None; ready -> clear the flag and hand out a view."""
        self.polls += 1
        buf = self.entry.recv_buffer
        flag_off = buf.length - 1
        if self.space.read_at(buf, flag_off, 1)[0] != FLAG_READY:
            return None
        self.space.write_at(buf, flag_off, bytes([FLAG_EMPTY]))
        payload_len = buf.length - 1
        dims = self.entry.shape.static_dims()
        if payload_len == 0:
            return Tensor(dims, self.entry.elem_type, null_buffer(), self.space.server_id)
        view = BufferRef(
            RegionHandle(buf.region_id, buf.base_addr, payload_len, buf.access_token))
        return Tensor(dims, self.entry.elem_type, view, self.space.server_id)


class DynSender:
    """Sender half of a dynamically allocated edge.

    Only the metadata travels by write; the payload stays put (it must be
    registered) until the receiver pulls it. The payload buffer is retained
    until this sender's next activation, which the iteration barrier makes
    safe.
    """

    def __init__(self, entry: PlanEntry, space: MemorySpace, arena: ArenaAllocator,
                 channel: Channel):
        _require_remote(entry)
        self.entry = entry
        self.space = space
        self.arena = arena
        self.channel = channel
        self.meta_stage = arena.alloc(meta_block_size(entry.rank))
        self._held: Optional[BufferRef] = None
        self._held_staging = False
        self.sends = 0
        self.zero_copy_checks = 0

    def send(self, tensor: Tensor, *, stage_copy: bool,
             trace: Optional[TraceState] = None) -> None:
        entry = self.entry
        if tensor.rank != entry.rank:
            raise errors.RankChanged(
                f"edge {entry.edge_id}: rank {tensor.rank}, metadata is fixed at "
                f"rank {entry.rank}")
        if trace is not None and tensor.nbytes > 0:
            trace.record_transfer(tensor.buffer.handle.base_addr)
        self.release_held()
        payload_ref = tensor.buffer
        if tensor.nbytes > 0:
            if stage_copy:
                staging = self.arena.alloc(tensor.nbytes)
                self.space.copy_bytes(tensor.buffer.handle, 0, staging, 0, tensor.nbytes)
                payload_ref = BufferRef(staging, self.arena)
                self._held = payload_ref
                self._held_staging = True
            else:
                self.zero_copy_checks += 1
                try:
                    self.space.check_registered(tensor.buffer.handle, 0, tensor.nbytes)
                except errors.NotRegistered as exc:
                    raise ZeroCopyViolation(
                        f"edge {entry.edge_id}: payload not in registered memory "
                        f"after tracing") from exc
                self._held = payload_ref.retain()
                self._held_staging = False
        meta = encode_meta(tensor.dims, tensor.elem_type,
                           payload_ref.handle.base_addr,
                           payload_ref.handle.access_token)
        self._assert_receiver_consumed()
        self.space.write_at(self.meta_stage, 0, meta)
        self.space.counters.serialize_bytes += len(meta)
        verb = self.channel.one_sided_write(MemRange(self.meta_stage),
                                            entry.remote_addr, entry.remote_token,
                                            tag=("meta", entry.edge_id))
        self.channel.take_completion(verb)
        self.sends += 1

    def release_held(self) -> None:
        if self._held is not None:
            self._held.release()
            self._held = None
            self._held_staging = False

    def _assert_receiver_consumed(self) -> None:
        rspace = self.channel.fabric.device_at(self.channel.qp.peer_endpoint).space
        flag_addr = self.entry.remote_addr + self.entry.remote_len - 1
        if rspace.read_raw(flag_addr, 1)[0] != FLAG_EMPTY:
            raise errors.ProtocolError(
                f"edge {self.entry.edge_id}: receiver has not consumed the "
                f"previous metadata")

    def close(self) -> None:
        self.release_held()


class DynReceiver:
    """Receiver half of a dynamic edge: poll metadata, then pull the payload."""

    def __init__(self, entry: PlanEntry, space: MemorySpace, arena: ArenaAllocator,
                 channel: Channel):
        if entry.recv_buffer is None:
            raise errors.ProtocolError(f"edge {entry.edge_id}: no preallocated meta block")
        self.entry = entry
        self.space = space
        self.arena = arena
        self.channel = channel  # toward the producer, used for the pull read
        self.polls = 0

    def poll(self) -> Optional[MetaBlock]:
        """Pending -> None; ready -> clear the flag and decode the metadata."""
        self.polls += 1
        buf = self.entry.recv_buffer
        raw = self.space.read_at(buf, 0, buf.length)
        if raw[-1] != FLAG_READY:
            return None
        self.space.write_at(buf, buf.length - 1, bytes([FLAG_EMPTY]))
        return decode_meta(raw, self.entry.rank)

    def fetch(self, meta: MetaBlock) -> Tensor:
        """Allocate payload storage and pull the bytes with a one-sided read."""
        if meta.payload_len == 0:
            return Tensor(meta.dims, meta.elem_type, null_buffer(), self.space.server_id)
        handle = self.arena.alloc(meta.payload_len)
        ref = BufferRef(handle, self.arena)
        verb = self.channel.one_sided_read(meta.remote_addr, meta.remote_token,
                                           MemRange(handle, 0, meta.payload_len),
                                           tag=("pull", self.entry.edge_id))
        self.channel.take_completion(verb)
        return Tensor(meta.dims, meta.elem_type, ref, self.space.server_id)


# -- copy-heavy RPC baseline ---------------------------------------------------


class RpcSender:
    """Fragmenting sender of the baseline path.

    Serializes metadata plus payload into fixed-size fragments through a
    staging buffer (both copies counted), then pushes each fragment with a
    send verb. Pumping is incremental so a full receive ring just pauses
    the sender instead of deadlocking a shared scheduler.
    """

    def __init__(self, edge_id: int, rank: int, space: MemorySpace,
                 arena: ArenaAllocator, channel: Channel):
        self.edge_id = edge_id
        self.rank = rank
        self.space = space
        self.arena = arena
        self.channel = channel
        self.frag_stage = arena.alloc(FRAGMENT_BYTES)
        self.meta_stage = arena.alloc(meta_block_size(rank))
        self._msg_ids = 0
        self._active: Optional[dict] = None
        self._frag_ready = False
        self.fragments_sent = 0

    def start(self, tensor: Tensor) -> None:
        if self._active is not None:
            raise errors.ProtocolError(f"edge {self.edge_id}: send already in progress")
        if tensor.rank != self.rank:
            raise errors.RankChanged(
                f"edge {self.edge_id}: rank {tensor.rank} != {self.rank}")
        meta = encode_meta(tensor.dims, tensor.elem_type, 0, 0)
        self.space.write_at(self.meta_stage, 0, meta)
        self.space.counters.serialize_bytes += len(meta)
        meta_len = len(meta)
        total = meta_len + tensor.nbytes
        self._msg_ids += 1
        self._active = {
            "tensor": tensor,
            "meta_len": meta_len,
            "total": total,
            "count": -(-total // FRAG_PAYLOAD_BYTES),
            "index": 0,
            "offset": 0,
        }

    def pump(self) -> bool:
        """Send fragments while the peer ring has room; True when done."""
        st = self._active
        if st is None:
            return True
        while st["index"] < st["count"]:
            if not self._frag_ready:
                self._build_fragment(st)
                self._frag_ready = True
            frag_len = FRAG_HEADER_BYTES + st["chunk_len"]
            data = self.space.read_at(self.frag_stage, 0, frag_len)
            verb = self.channel.post_send(data, tag=("frag", self.edge_id), block=False)
            if verb is None:
                return False
            self.channel.take_completion(verb)
            self._frag_ready = False
            st["index"] += 1
            st["offset"] += st["chunk_len"]
            self.fragments_sent += 1
        self._active = None
        return True

    def _build_fragment(self, st: dict) -> None:
        offset = st["offset"]
        chunk_len = min(FRAG_PAYLOAD_BYTES, st["total"] - offset)
        header = struct.pack(FRAG_HEADER_FMT, self._msg_ids, st["index"], st["count"])
        self.space.write_at(self.frag_stage, 0, header)
        pos = FRAG_HEADER_BYTES
        remaining = chunk_len
        cursor = offset
        meta_len = st["meta_len"]
        if cursor < meta_len and remaining > 0:
            n = min(meta_len - cursor, remaining)
            self.space.copy_bytes(self.meta_stage, cursor, self.frag_stage, pos, n)
            pos += n
            cursor += n
            remaining -= n
        if remaining > 0:
            payload_off = cursor - meta_len
            tensor = st["tensor"]
            self.space.copy_bytes(tensor.buffer.handle, payload_off,
                                  self.frag_stage, pos, remaining)
        st["chunk_len"] = chunk_len

    @property
    def busy(self) -> bool:
        return self._active is not None


class RpcReceiver:
    """Ring-buffer receiver of the baseline path.

    Keeps a fixed set of receive slots posted; drains completed fragments
    in index order, parses the metadata prefix raw, and copies payload
    bytes (counted) into a freshly allocated tensor buffer.
    """

    def __init__(self, edge_id: int, rank: int, space: MemorySpace,
                 rdma_arena: ArenaAllocator, tensor_arena: ArenaAllocator,
                 channel: Channel, gap_poll_limit: int = 100_000):
        self.edge_id = edge_id
        self.rank = rank
        self.space = space
        self.tensor_arena = tensor_arena
        self.channel = channel
        self.gap_poll_limit = gap_poll_limit
        self.slots = [rdma_arena.alloc(FRAGMENT_BYTES) for _ in range(RING_SLOTS)]
        for i, slot in enumerate(self.slots):
            channel.post_recv(MemRange(slot), tag=i)
        self.polls = 0
        self.fragments_received = 0
        self._state: Optional[dict] = None
        self._stalled_polls = 0

    def poll(self) -> Optional[Tensor]:
        """Drain available fragments; returns the tensor once complete."""
        self.polls += 1
        events = self.channel.drain_completions("recv")
        if not events and self._state is not None:
            self._stalled_polls += 1
            if self._stalled_polls > self.gap_poll_limit:
                raise errors.ReassemblyGap(
                    f"edge {self.edge_id}: message stalled at fragment "
                    f"{self._state['next_index']}/{self._state['count']}")
        result = None
        for ev in events:
            self._stalled_polls = 0
            self.fragments_received += 1
            done = self._consume_fragment(ev)
            if done is not None:
                result = done
        return result

    def _consume_fragment(self, ev) -> Optional[Tensor]:
        slot = self.slots[ev.tag]
        header = self.space.read_at(slot, 0, FRAG_HEADER_BYTES)
        msg_id, index, count = struct.unpack(FRAG_HEADER_FMT, header)
        frag_len = ev.nbytes - FRAG_HEADER_BYTES
        st = self._state
        if st is None:
            if index != 0:
                raise errors.ReassemblyGap(
                    f"edge {self.edge_id}: message {msg_id} starts at fragment {index}")
            st = self._state = {
                "msg_id": msg_id, "count": count, "next_index": 0, "cursor": 0,
                "meta": bytearray(), "meta_len": meta_block_size(self.rank),
                "tensor": None, "payload_len": None,
            }
        if msg_id != st["msg_id"] or index != st["next_index"]:
            raise errors.ReassemblyGap(
                f"edge {self.edge_id}: expected fragment {st['next_index']} of "
                f"message {st['msg_id']}, got {index} of {msg_id}")
        pos = FRAG_HEADER_BYTES
        remaining = frag_len
        while remaining > 0:
            if st["cursor"] < st["meta_len"]:
                n = min(st["meta_len"] - st["cursor"], remaining)
                st["meta"] += self.space.read_at(slot, pos, n)
                if len(st["meta"]) == st["meta_len"]:
                    self._open_tensor(st)
            else:
                n = remaining
                payload_off = st["cursor"] - st["meta_len"]
                tensor = st["tensor"]
                self.space.copy_bytes(slot, pos, tensor.buffer.handle, payload_off, n)
            pos += n
            st["cursor"] += n
            remaining -= n
        st["next_index"] += 1
        # slot drained; hand it back to the ring
        self.channel.post_recv(MemRange(slot), tag=ev.tag)
        if st["next_index"] == st["count"]:
            tensor = st["tensor"]
            self._state = None
            return tensor
        return None

    def _open_tensor(self, st: dict) -> None:
        meta = decode_meta(bytes(st["meta"]), self.rank)
        if meta.payload_len == 0:
            ref = null_buffer()
        else:
            ref = BufferRef(self.tensor_arena.alloc(meta.payload_len), self.tensor_arena)
        st["tensor"] = Tensor(meta.dims, meta.elem_type, ref, self.space.server_id)
        st["payload_len"] = meta.payload_len

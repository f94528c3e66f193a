"""Simulated RDMA verbs: devices, queue pairs, completion queues, channels.

The fabric delivers every verb synchronously in the caller's thread.
One-sided transfers land at the target as a sequence of chunks at strictly
ascending addresses; chunk boundaries are randomized by default and can be
scripted through :class:`FaultConfig` for protocol tests. Reliable
connected semantics only: verbs posted on one queue pair complete in post
order, and every posted verb yields exactly one completion event.

Simulated time is a single monotone accumulator charged per verb
(``alpha + beta * bytes``) and, via the memory-space copy hook, per counted
payload copy (``gamma * bytes``).
"""
from __future__ import annotations

import itertools
import random
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np

from . import errors
from .memspace import MemorySpace, RegionHandle

Endpoint = tuple[int, int]  # (server_id, port)

DEFAULT_MAX_CHUNK = 4096


@dataclass
class CostModel:
    """Time cost of fabric and memory operations, all configurable."""

    alpha_s: float = 1e-6             # per-verb one-way latency
    beta_s_per_byte: float = 0.08e-9  # wire time per byte (100 Gbps)
    gamma_s_per_byte: float = 0.05e-9  # local memory-copy time per byte

    def __post_init__(self):
        if self.alpha_s < 0 or self.beta_s_per_byte < 0 or self.gamma_s_per_byte < 0:
            raise errors.InvalidConfig("cost-model coefficients must be >= 0")

    def verb_cost(self, nbytes: int) -> float:
        return self.alpha_s + self.beta_s_per_byte * nbytes

    def copy_cost(self, nbytes: int) -> float:
        return self.gamma_s_per_byte * nbytes


class SimClock:
    """Monotone simulated clock shared by the whole fabric."""

    def __init__(self):
        self._t = 0.0
        self._lock = threading.Lock()

    def now(self) -> float:
        with self._lock:
            return self._t

    def advance(self, dt: float) -> None:
        if dt < 0:
            raise AssertionError("clock cannot run backwards")
        with self._lock:
            self._t += dt


@dataclass
class FaultConfig:
    """Test-only knobs: scripted chunking, delivery hooks, drops."""

    max_chunk: int = DEFAULT_MAX_CHUNK
    #: each entry is one verb's chunk-size list; consumed FIFO by one-sided verbs
    chunk_schedules: deque = field(default_factory=deque)
    #: called after each delivered chunk: fn(kind, chunk_index, dst_addr, nbytes)
    chunk_callback: Optional[Callable[[str, int, int, int], None]] = None
    yield_between_chunks: bool = False
    #: number of upcoming rpc calls to black-hole (caller sees Timeout)
    drop_rpc_calls: int = 0
    #: number of upcoming post_send payloads to black-hole (receiver never completes)
    drop_sends: int = 0


@dataclass(frozen=True)
class MemRange:
    """A byte range inside a handle, for gather lists and verb targets."""

    handle: RegionHandle
    offset: int = 0
    length: Optional[int] = None

    @property
    def nbytes(self) -> int:
        return self.handle.length - self.offset if self.length is None else self.length


RangeArg = Union[MemRange, RegionHandle, Sequence[Union[MemRange, RegionHandle]]]


def _as_ranges(arg: RangeArg) -> list[MemRange]:
    if isinstance(arg, RegionHandle):
        return [MemRange(arg)]
    if isinstance(arg, MemRange):
        return [arg]
    out = []
    for item in arg:
        out.append(item if isinstance(item, MemRange) else MemRange(item))
    return out


@dataclass
class CompletionEvent:
    verb_id: int
    kind: str  # 'write' | 'read' | 'send' | 'recv'
    qp_id: int
    nbytes: int
    tag: object = None
    seq: int = 0
    status: str = "ok"


class CompletionQueue:
    """FIFO of completion events; every pop is linearizable."""

    def __init__(self, index: int):
        self.index = index
        self._events: deque[CompletionEvent] = deque()
        self._lock = threading.Lock()

    def push(self, event: CompletionEvent) -> None:
        with self._lock:
            self._events.append(event)

    def poll(self) -> Optional[CompletionEvent]:
        with self._lock:
            return self._events.popleft() if self._events else None

    def __len__(self) -> int:
        with self._lock:
            return len(self._events)


class QueuePair:
    """One endpoint of a reliable connected pairing."""

    def __init__(self, qp_id: int, device: "RdmaDevice", peer_endpoint: Endpoint,
                 cq_index: int):
        self.qp_id = qp_id
        self.device = device
        self.peer_endpoint = peer_endpoint
        self.cq_index = cq_index
        self.peer_qp: Optional["QueuePair"] = None
        self.posted_recvs: deque[tuple[MemRange, object, int]] = deque()
        self.recv_cond = threading.Condition()
        self.stash: deque[CompletionEvent] = deque()
        self._seq = itertools.count()

    def next_seq(self) -> int:
        return next(self._seq)


class Fabric:
    """Registry of devices plus the shared clock, RNG and counters."""

    def __init__(self, cost_model: Optional[CostModel] = None, *, seed: int = 0,
                 faults: Optional[FaultConfig] = None, send_timeout_s: float = 10.0):
        self.cost = cost_model or CostModel()
        self.clock = SimClock()
        self.faults = faults or FaultConfig()
        self.send_timeout_s = send_timeout_s
        self._devices: dict[Endpoint, RdmaDevice] = {}
        self._rng = random.Random(seed ^ 0xFAB51C)
        self._verb_ids = itertools.count(1)
        self._stats_lock = threading.Lock()
        self.verbs_posted = 0
        self.completions_posted = 0
        self.rpc_verbs = 0
        self.wire_bytes = 0

    # -- device registry -----------------------------------------------------

    def create_device(self, space: MemorySpace, port: int = 1, *, num_cqs: int = 1,
                      qps_per_peer: int = 1, listening: bool = True) -> "RdmaDevice":
        endpoint = (space.server_id, port)
        if endpoint in self._devices:
            raise errors.InvalidConfig(f"endpoint {endpoint} already exists")
        device = RdmaDevice(self, endpoint, space, num_cqs, qps_per_peer, listening)
        self._devices[endpoint] = device
        return device

    def device_at(self, endpoint: Endpoint) -> Optional["RdmaDevice"]:
        return self._devices.get(endpoint)

    # -- accounting -----------------------------------------------------------

    def next_verb_id(self) -> int:
        return next(self._verb_ids)

    def _count(self, *, verbs: int = 0, completions: int = 0, rpc: int = 0,
               wire: int = 0) -> None:
        with self._stats_lock:
            self.verbs_posted += verbs
            self.completions_posted += completions
            self.rpc_verbs += rpc
            self.wire_bytes += wire

    def outstanding_recvs(self) -> int:
        n = 0
        for dev in self._devices.values():
            for qps in dev.peers.values():
                for qp in qps:
                    n += len(qp.posted_recvs)
        return n

    def chunk_plan(self, total: int) -> list[int]:
        """Sizes of the ascending-address chunks for one one-sided verb."""
        if self.faults.chunk_schedules:
            plan = list(self.faults.chunk_schedules.popleft())
            if sum(plan) != total:
                raise ValueError(f"scripted chunks sum to {sum(plan)}, verb is {total} bytes")
            if any(c < 1 for c in plan):
                raise ValueError("scripted chunk sizes must be >= 1")
            return plan
        max_chunk = self.faults.max_chunk
        if total <= max_chunk:
            first = self._rng.randint(1, max_chunk)
            if first >= total:
                return [total]
            plan, covered = [first], first
        else:
            plan, covered = [], 0
        # draw in bulk; one randint per chunk is too slow for large verbs
        np_rng = np.random.Generator(np.random.PCG64(self._rng.getrandbits(64)))
        while covered < total:
            need = max(8, int((total - covered) * 2 / (max_chunk + 1)) + 8)
            sizes = np_rng.integers(1, max_chunk + 1, size=need)
            for size in sizes:
                size = int(min(size, total - covered))
                plan.append(size)
                covered += size
                if covered >= total:
                    break
        return plan


class RdmaDevice:
    """Simulated NIC bound to one memory space.

    Queue pairs are created per connected peer; the i-th QP a device
    creates lands on completion queue ``i mod num_cqs``, with the counter
    shared across peers so load spreads globally.
    """

    def __init__(self, fabric: Fabric, endpoint: Endpoint, space: MemorySpace,
                 num_cqs: int, qps_per_peer: int, listening: bool):
        if num_cqs < 1 or qps_per_peer < 1:
            raise errors.InvalidConfig("num_cqs and qps_per_peer must be >= 1")
        self.fabric = fabric
        self.endpoint = endpoint
        self.space = space
        self.num_cqs = num_cqs
        self.qps_per_peer = qps_per_peer
        self.listening = listening
        self.cqs = [CompletionQueue(i) for i in range(num_cqs)]
        self.peers: dict[Endpoint, list[QueuePair]] = {}
        self.rpc_handler: Optional[Callable[[bytes], bytes]] = None
        self._qp_counter = 0
        self._qp_by_id: dict[int, QueuePair] = {}
        self._lock = threading.RLock()
        self._next_qp_id = itertools.count(0)

    # -- connection management -------------------------------------------------

    def _new_qp(self, peer_endpoint: Endpoint) -> QueuePair:
        cq_index = self._qp_counter % self.num_cqs
        self._qp_counter += 1
        qp = QueuePair(next(self._next_qp_id) * 1000 + self.endpoint[0],
                       self, peer_endpoint, cq_index)
        self._qp_by_id[qp.qp_id] = qp
        self.peers.setdefault(peer_endpoint, []).append(qp)
        return qp

    def connect(self, peer_endpoint: Endpoint) -> list["Channel"]:
        """Create this device's QPs to a peer, paired with passive QPs there.

        The passive side assigns its QPs to its own CQs through its own
        round-robin counter.
        """
        peer = self.fabric.device_at(peer_endpoint)
        if peer is None or not peer.listening:
            raise errors.PeerUnreachable(f"no listening device at {peer_endpoint}")
        first, second = sorted([self, peer], key=lambda d: d.endpoint)
        with first._lock:
            with second._lock:
                local_qps = [self._new_qp(peer_endpoint) for _ in range(self.qps_per_peer)]
                remote_qps = [peer._new_qp(self.endpoint) for _ in range(self.qps_per_peer)]
                for lqp, rqp in zip(local_qps, remote_qps):
                    lqp.peer_qp = rqp
                    rqp.peer_qp = lqp
        return [Channel(self, qp) for qp in local_qps]

    def channels_to(self, peer_endpoint: Endpoint) -> list["Channel"]:
        """Channels over this device's existing QPs toward a peer."""
        qps = self.peers.get(peer_endpoint, [])
        return [Channel(self, qp) for qp in qps]

    # -- completions -------------------------------------------------------------

    def poll_cq(self, cq_index: int = 0) -> Optional[CompletionEvent]:
        return self.cqs[cq_index].poll()

    def push_completion(self, qp: QueuePair, event: CompletionEvent) -> None:
        self.cqs[qp.cq_index].push(event)
        self.fabric._count(completions=1)

    def stash_event(self, event: CompletionEvent) -> None:
        qp = self._qp_by_id.get(event.qp_id)
        if qp is None:
            raise AssertionError(f"completion for unknown qp {event.qp_id}")
        qp.stash.append(event)

    def register_rpc_handler(self, handler: Callable[[bytes], bytes]) -> None:
        self.rpc_handler = handler


class Channel:
    """User-facing handle over one specific queue pair.

    A channel is used by one thread at a time; distinct channels are
    independent.
    """

    def __init__(self, device: RdmaDevice, qp: QueuePair):
        self.device = device
        self.qp = qp

    @property
    def fabric(self) -> Fabric:
        return self.device.fabric

    def _remote_space(self) -> MemorySpace:
        return self.fabric.device_at(self.qp.peer_endpoint).space

    # -- one-sided verbs -----------------------------------------------------

    def one_sided_write(self, src: RangeArg, dst_addr: int, dst_token: int,
                        tag: object = None) -> int:
        """Write a gather list of local registered ranges to a remote address.

        Delivery happens as chunks at strictly ascending remote addresses, so
        the final byte of the gather list lands last.
        """
        ranges = _as_ranges(src)
        total = sum(r.nbytes for r in ranges)
        if total < 1:
            raise errors.InvalidLength("zero-length write")
        space = self.device.space
        for r in ranges:
            space.check_registered(r.handle, r.offset, r.nbytes)
        rspace = self._remote_space()
        rspace.check_remote_access(dst_addr, total, dst_token)
        segments = [space.view(r.handle, r.offset, r.nbytes)
                    for r in ranges if r.nbytes]
        verb_id = self._deliver_chunks("write", segments, total, rspace, dst_addr)
        self._finish_verb(verb_id, "write", total, tag)
        return verb_id

    def one_sided_read(self, src_addr: int, src_token: int, dst: RangeArg,
                       tag: object = None) -> int:
        """Read a remote range into one local registered range."""
        ranges = _as_ranges(dst)
        if len(ranges) != 1:
            raise errors.InvalidLength("read target must be a single range")
        r = ranges[0]
        total = r.nbytes
        if total < 1:
            raise errors.InvalidLength("zero-length read")
        space = self.device.space
        space.check_registered(r.handle, r.offset, total)
        rspace = self._remote_space()
        rspace.check_remote_access(src_addr, total, src_token)
        segments = [rspace.view_raw(src_addr, total)]
        dst_addr = r.handle.base_addr + r.offset
        verb_id = self._deliver_chunks("read", segments, total, space, dst_addr)
        self._finish_verb(verb_id, "read", total, tag)
        return verb_id

    def _deliver_chunks(self, kind: str, segments, total: int,
                        target: MemorySpace, base_addr: int) -> int:
        """Apply a gather list to the target in ascending-address chunks.

        Sources are live views; callers guarantee the source is not
        mutated while the verb is in flight.
        """
        faults = self.fabric.faults
        verb_id = self.fabric.next_verb_id()
        self.fabric._count(verbs=1)
        seg_iter = iter(segments)
        segment = next(seg_iter, None)
        seg_pos = 0
        pos = 0
        for index, size in enumerate(self.fabric.chunk_plan(total)):
            chunk_start = base_addr + pos
            chunk_len = size
            while size > 0:
                take = min(size, len(segment) - seg_pos)
                target.write_raw(base_addr + pos, segment[seg_pos:seg_pos + take])
                seg_pos += take
                pos += take
                size -= take
                if seg_pos == len(segment):
                    segment = next(seg_iter, None)
                    seg_pos = 0
            if faults.chunk_callback is not None:
                faults.chunk_callback(kind, index, chunk_start, chunk_len)
            if faults.yield_between_chunks:
                time.sleep(0)
        return verb_id

    def _finish_verb(self, verb_id: int, kind: str, nbytes: int, tag: object) -> None:
        self.fabric.clock.advance(self.fabric.cost.verb_cost(nbytes))
        self.fabric._count(wire=nbytes)
        event = CompletionEvent(verb_id, kind, self.qp.qp_id, nbytes, tag,
                                self.qp.next_seq())
        self.device.push_completion(self.qp, event)

    # -- messaging verbs ---------------------------------------------------------

    def post_recv(self, dst: Union[MemRange, RegionHandle], tag: object = None) -> int:
        """Post a receive buffer; completes when a matching send delivers."""
        r = dst if isinstance(dst, MemRange) else MemRange(dst)
        if r.nbytes < 1:
            raise errors.InvalidLength("zero-length receive buffer")
        self.device.space.check_registered(r.handle, r.offset, r.nbytes)
        verb_id = self.fabric.next_verb_id()
        self.fabric._count(verbs=1)
        with self.qp.recv_cond:
            self.qp.posted_recvs.append((r, tag, verb_id))
            self.qp.recv_cond.notify_all()
        return verb_id

    def post_send(self, data: bytes, tag: object = None, *, block: bool = True,
                  timeout: Optional[float] = None) -> Optional[int]:
        """Send a message into the oldest receive posted on the peer QP.

        With ``block=False`` returns None when no receive is posted (no verb
        consumed); otherwise waits up to the fabric send timeout and raises
        :class:`NoPostedReceive`.
        """
        if len(data) < 1:
            raise errors.InvalidLength("zero-length send")
        peer_qp = self.qp.peer_qp
        if peer_qp is None:
            raise errors.PeerUnreachable("channel is not connected")
        faults = self.fabric.faults
        if faults.drop_sends > 0:
            faults.drop_sends -= 1
            verb_id = self.fabric.next_verb_id()
            self.fabric._count(verbs=1, wire=len(data))
            self.fabric.clock.advance(self.fabric.cost.verb_cost(len(data)))
            event = CompletionEvent(verb_id, "send", self.qp.qp_id, len(data), tag,
                                    self.qp.next_seq())
            self.device.push_completion(self.qp, event)
            return verb_id

        deadline = time.monotonic() + (timeout if timeout is not None
                                       else self.fabric.send_timeout_s)
        with peer_qp.recv_cond:
            while not peer_qp.posted_recvs:
                if not block:
                    return None
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    raise errors.NoPostedReceive(
                        f"no receive posted on peer of qp {self.qp.qp_id}")
                peer_qp.recv_cond.wait(remaining)
            r, rtag, recv_verb = peer_qp.posted_recvs[0]
            if r.nbytes < len(data):
                raise errors.RecvBufferTooSmall(
                    f"message of {len(data)} bytes, receive buffer {r.nbytes}")
            peer_qp.posted_recvs.popleft()

        remote_space = peer_qp.device.space
        remote_space.write_raw(r.handle.base_addr + r.offset, data)
        verb_id = self.fabric.next_verb_id()
        self.fabric._count(verbs=1, wire=len(data))
        self.fabric.clock.advance(self.fabric.cost.verb_cost(len(data)))
        send_ev = CompletionEvent(verb_id, "send", self.qp.qp_id, len(data), tag,
                                  self.qp.next_seq())
        self.device.push_completion(self.qp, send_ev)
        recv_ev = CompletionEvent(recv_verb, "recv", peer_qp.qp_id, len(data), rtag,
                                  peer_qp.next_seq())
        peer_qp.device.push_completion(peer_qp, recv_ev)
        return verb_id

    # -- RPC -----------------------------------------------------------------

    def rpc_call(self, request: bytes, timeout: float = 10.0) -> bytes:
        """Blocking request/response used to distribute buffer addresses.

        Modeled over the send/recv machinery: the remote service keeps an
        implicit receive posted and its handler runs inline; both verbs are
        charged to the clock and tallied separately from the data path.
        """
        del timeout  # the inline handler cannot stall; kept for interface parity
        remote = self.fabric.device_at(self.qp.peer_endpoint)
        if remote is None:
            raise errors.PeerUnreachable(f"no device at {self.qp.peer_endpoint}")
        handler = remote.rpc_handler
        if handler is None:
            raise errors.HandlerMissing(f"device {remote.endpoint} has no rpc handler")
        if self.fabric.faults.drop_rpc_calls > 0:
            self.fabric.faults.drop_rpc_calls -= 1
            raise errors.Timeout("rpc response dropped")
        self.fabric._count(rpc=1, wire=len(request))
        self.fabric.clock.advance(self.fabric.cost.verb_cost(len(request)))
        response = handler(bytes(request))
        self.fabric._count(rpc=1, wire=len(response))
        self.fabric.clock.advance(self.fabric.cost.verb_cost(len(response)))
        return response

    # -- completion harvesting -----------------------------------------------

    def take_completion(self, verb_id: int) -> CompletionEvent:
        """Pop this channel's completion for ``verb_id``.

        Events belonging to other QPs on the same CQ are routed to their
        QP's stash instead of being dropped.
        """
        for i, ev in enumerate(self.qp.stash):
            if ev.verb_id == verb_id:
                del self.qp.stash[i]
                return ev
        while True:
            ev = self.device.poll_cq(self.qp.cq_index)
            if ev is None:
                raise errors.Timeout(f"completion {verb_id} not found on cq")
            if ev.qp_id == self.qp.qp_id and ev.verb_id == verb_id:
                return ev
            self.device.stash_event(ev)

    def drain_completions(self, kind: str) -> list[CompletionEvent]:
        """Collect all currently available events of one kind for this QP."""
        out = []
        keep = deque()
        while self.qp.stash:
            ev = self.qp.stash.popleft()
            (out if ev.kind == kind else keep).append(ev)
        self.qp.stash.extend(keep)
        while True:
            ev = self.device.poll_cq(self.qp.cq_index)
            if ev is None:
                break
            if ev.qp_id == self.qp.qp_id and ev.kind == kind:
                out.append(ev)
            else:
                self.device.stash_event(ev)
        return out

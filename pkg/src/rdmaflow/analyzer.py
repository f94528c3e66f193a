"""Communication-aware graph analysis.

Three responsibilities, all executed before the mini-batch loop:

* classify every cross edge as STATIC (receiver data buffer fixed for the
  whole run) or DYNAMIC (only a fixed-size metadata block is fixed); an
  edge is STATIC only when its shape is fully static *and* the received
  tensor does not feed a variable, because statically placed buffers for
  variable updates pile up per worker;
* preallocate the receiver-side buffers in registered memory and ship
  their addresses to the producer servers over the fabric RPC;
* run first-iteration allocation-site tracing, building the set of
  (node, allocation ordinal) sites whose buffers get transferred, so later
  iterations can allocate those tensors in registered memory directly.
"""
from __future__ import annotations

import struct
import threading
from dataclasses import dataclass, field
from typing import Callable, Optional

from . import errors
from .fabric import Channel
from .graph import (IN_PLACE_KINDS, NodeKind, PartitionedGraph, TensorShape)
from .memspace import ArenaAllocator, MemorySpace, RegionHandle
from .wire import (AddrExchangeMsg, ElemType, Mechanism, meta_block_size,
                   static_region_size)

PlanKey = tuple[int, int]  # (edge_id, consumer_server)


@dataclass
class PlanEntry:
    """Everything both ends need to know about one cross-edge transfer."""

    edge_id: int
    producer_server: int
    consumer_server: int
    mechanism: Mechanism
    shape: TensorShape
    elem_type: ElemType
    rank: int
    # consumer side, filled by preallocation
    recv_buffer: Optional[RegionHandle] = None
    # producer side, filled by address exchange
    remote_addr: Optional[int] = None
    remote_token: Optional[int] = None
    remote_len: Optional[int] = None

    @property
    def key(self) -> PlanKey:
        return (self.edge_id, self.consumer_server)


class TransferPlan:
    """Per-cross-edge transfer decisions and exchanged addresses."""

    def __init__(self):
        self.entries: dict[PlanKey, PlanEntry] = {}

    def add(self, entry: PlanEntry) -> None:
        self.entries[entry.key] = entry

    def for_consumer(self, server: int) -> list[PlanEntry]:
        return [e for e in self.entries.values() if e.consumer_server == server]

    def for_producer(self, server: int) -> list[PlanEntry]:
        return [e for e in self.entries.values() if e.producer_server == server]

    def dump_table(self) -> str:
        lines = [f"{'edge':>6} {'to':>4} {'mechanism':<9} {'addr':>12} {'size':>10}"]
        for key in sorted(self.entries):
            e = self.entries[key]
            addr = "-" if e.recv_buffer is None else f"0x{e.recv_buffer.base_addr:x}"
            size = "-" if e.recv_buffer is None else str(e.recv_buffer.length)
            lines.append(f"{e.edge_id:>6} {e.consumer_server:>4} "
                         f"{e.mechanism.name.lower():<9} {addr:>12} {size:>10}")
        return "\n".join(lines)


def feeds_variable(pgraph: PartitionedGraph, edge_id: int, server: int) -> bool:
    """Does the received tensor's buffer reach a Variable or ApplyGrad node?

    Follows only buffer-forwarding consumers (in-place kinds) within the
    consumer server's subgraph; an allocating consumer breaks the chain.
    """
    frontier = [edge_id]
    seen = set()
    while frontier:
        e = frontier.pop()
        if e in seen:
            continue
        seen.add(e)
        for node_id in pgraph.consumers_on(e, server):
            node = pgraph.node(node_id)
            if node.kind in (NodeKind.VARIABLE, NodeKind.APPLY_GRAD):
                return True
            if node.kind in IN_PLACE_KINDS and node.inputs and node.inputs[0] == e:
                if node.output is not None:
                    frontier.append(node.output)
    return False


def classify_edges(pgraph: PartitionedGraph, shapes: dict[int, TensorShape],
                   override: Optional[str] = None) -> dict[PlanKey, Mechanism]:
    """Choose STATIC or DYNAMIC per cross edge.

    ``override`` forces 'static' (where the shape allows it) or 'dynamic'
    for experiments; the default applies the shape rule plus the
    variable-feeding rule.
    """
    out: dict[PlanKey, Mechanism] = {}
    for ce in pgraph.cross:
        shape = shapes[ce.edge_id]
        if override == "dynamic":
            mech = Mechanism.DYNAMIC
        elif override == "static":
            if not shape.is_static:
                raise errors.InvalidConfig(
                    f"edge {ce.edge_id} has dynamic shape {shape}; cannot force static")
            mech = Mechanism.STATIC
        else:
            static_ok = shape.is_static and not feeds_variable(
                pgraph, ce.edge_id, ce.consumer_server)
            mech = Mechanism.STATIC if static_ok else Mechanism.DYNAMIC
        out[(ce.edge_id, ce.consumer_server)] = mech
    return out


def build_plan(pgraph: PartitionedGraph, shapes: dict[int, TensorShape],
               mechanisms: dict[PlanKey, Mechanism],
               elem_types: dict[int, ElemType]) -> TransferPlan:
    plan = TransferPlan()
    for ce in pgraph.cross:
        key = (ce.edge_id, ce.consumer_server)
        shape = shapes[ce.edge_id]
        plan.add(PlanEntry(ce.edge_id, ce.producer_server, ce.consumer_server,
                           mechanisms[key], shape, elem_types[ce.edge_id], shape.rank))
    return plan


# -- preallocation and address distribution ------------------------------------

ADDR_REQUEST_FMT = "<4sQ"
ADDR_REQUEST_OP = b"ADDR"


def preallocate_receiver_buffers(plan: TransferPlan, server: int,
                                 space: MemorySpace, arena: ArenaAllocator) -> None:
    """Reserve the data buffer (STATIC) or metadata block (DYNAMIC) per entry.

    Buffers come from the registered arena and live for the whole run;
    every flag byte starts cleared.
    """
    for entry in sorted(plan.for_consumer(server), key=lambda e: e.key):
        if entry.mechanism is Mechanism.STATIC:
            size = static_region_size(entry.shape.static_dims(), entry.elem_type)
        else:
            size = meta_block_size(entry.rank)
        handle = arena.alloc(size)
        space.write_at(handle, size - 1, b"\x00")
        entry.recv_buffer = handle


def make_addr_handler(plan: TransferPlan, server: int) -> Callable[[bytes], bytes]:
    """RPC dispatcher answering address-exchange requests for one server."""

    def handler(request: bytes) -> bytes:
        if len(request) != struct.calcsize(ADDR_REQUEST_FMT):
            raise errors.LengthMismatch(f"bad address request of {len(request)} bytes")
        op, edge_id = struct.unpack(ADDR_REQUEST_FMT, request)
        if op != ADDR_REQUEST_OP:
            raise errors.HandlerMissing(f"unknown rpc op {op!r}")
        entry = plan.entries.get((edge_id, server))
        if entry is None or entry.recv_buffer is None:
            raise errors.UnknownAddress(f"no preallocated buffer for edge {edge_id}")
        buf = entry.recv_buffer
        return AddrExchangeMsg(edge_id, buf.base_addr, buf.access_token,
                               buf.length, entry.mechanism).encode()

    return handler


def exchange_addresses(plan: TransferPlan, server: int,
                       rpc_channels: dict[int, Channel]) -> None:
    """Pull receiver buffer coordinates for every edge this server produces."""
    for entry in sorted(plan.for_producer(server), key=lambda e: e.key):
        channel = rpc_channels[entry.consumer_server]
        request = struct.pack(ADDR_REQUEST_FMT, ADDR_REQUEST_OP, entry.edge_id)
        msg = AddrExchangeMsg.decode(channel.rpc_call(request))
        if msg.edge_id != entry.edge_id or msg.mechanism != entry.mechanism:
            raise errors.ProtocolError(
                f"address exchange mismatch on edge {entry.edge_id}")
        entry.remote_addr = msg.base_addr
        entry.remote_token = msg.token
        entry.remote_len = msg.region_len


def preallocate_and_distribute(plan: TransferPlan, spaces: dict[int, MemorySpace],
                               arenas: dict[int, ArenaAllocator],
                               devices: dict[int, "object"],
                               channel_between: Callable[[int, int], Channel]) -> None:
    """Reserve every receiver-side buffer, then ship addresses to senders.

    Consumers preallocate first and register the address-exchange handler on
    their device; each producer then pulls the coordinates of the buffers it
    will write over the fabric RPC.
    """
    servers = sorted(spaces)
    for s in servers:
        preallocate_receiver_buffers(plan, s, spaces[s], arenas[s])
        devices[s].register_rpc_handler(make_addr_handler(plan, s))
    for s in servers:
        rpc_channels = {}
        for entry in plan.for_producer(s):
            if entry.consumer_server not in rpc_channels:
                rpc_channels[entry.consumer_server] = channel_between(
                    s, entry.consumer_server)
        exchange_addresses(plan, s, rpc_channels)


# -- allocation-site tracing ------------------------------------------------------


@dataclass(frozen=True)
class AllocSite:
    """A (node, allocation ordinal) pair; the ordinal restarts per execution."""

    node_id: int
    ordinal: int


@dataclass
class TraceState:
    """First-iteration tracing of which allocation sites feed transfers.

    ``alloc_by_addr`` keeps the latest allocation site per buffer address;
    ``transfer_sites`` accumulates the sites of transferred buffers and is
    frozen after the first iteration.
    """

    alloc_by_addr: dict[int, AllocSite] = field(default_factory=dict)
    transfer_sites: set[AllocSite] = field(default_factory=set)
    frozen: bool = False
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def record_alloc(self, addr: int, site: AllocSite) -> None:
        with self._lock:
            if self.frozen:
                raise AssertionError("tracing is frozen")
            self.alloc_by_addr[addr] = site

    def record_transfer(self, addr: int) -> None:
        with self._lock:
            if self.frozen:
                raise AssertionError("tracing is frozen")
            site = self.alloc_by_addr.get(addr)
            if site is None:
                raise errors.UnknownAddress(f"transferred buffer at {addr} was never traced")
            self.transfer_sites.add(site)

    def freeze(self) -> None:
        with self._lock:
            self.frozen = True


def choose_allocator(trace: TraceState, site: AllocSite, iteration: int) -> str:
    """'arena' when a traced transfer site allocates from iteration 2 on."""
    if iteration <= 1:
        return "normal"
    return "arena" if site in trace.transfer_sites else "normal"

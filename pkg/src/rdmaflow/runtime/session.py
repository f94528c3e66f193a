"""Session: wires spaces, fabric, analysis and executors into a runnable job.

A session takes a frozen graph plus a placement, partitions it, classifies
and preallocates the cross-edge transfers, and then drives the mini-batch
loop with an inter-iteration barrier. Three communication modes:

* ``zerocp`` - transfer over one-sided verbs with first-iteration
  allocation-site tracing; from iteration 2 on, to-be-transferred tensors
  are allocated directly in registered memory and sends copy nothing.
* ``cp`` - same transfer mechanisms, tracing disabled; every send stages
  the payload through a registered scratch buffer (one counted copy).
* ``rpc`` - the baseline: metadata and payload serialized into 4 KiB
  fragments through a bounded ring, one counted copy into the ring at the
  sender and one out of it at the receiver.

Execution is a deterministic round-robin interleaving of the per-server
executors by default; ``threads=True`` runs one OS thread per server
instead (byte counters are unchanged, interleavings are not).
"""
from __future__ import annotations

import threading
import time
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .. import errors
from ..analyzer import (AllocSite, TraceState, build_plan, choose_allocator,
                        classify_edges, preallocate_and_distribute)
from ..fabric import CostModel, Fabric, FaultConfig
from ..graph import (IN_PLACE_KINDS, SEND_KINDS, DataFlowGraph, ExecMode,
                     NodeKind, PartitionedGraph, Tensor, apply_in_place,
                     compute_node, in_place_control_deps, infer_shapes,
                     node_rng, partition, synthesize_values)
from ..memspace import (ArenaAllocator, BufferRef, MemorySpace, null_buffer)
from ..wire import ElemType, Mechanism
from .executor import Executor, OpHandler, SharedEpoch, run_all
from .protocol import (DynReceiver, DynSender, RpcReceiver, RpcSender,
                       StaticReceiver, StaticSender)
from .report import IterationRow, RunReport

MODES = ("zerocp", "cp", "rpc")

DEFAULT_CAPACITY = 48 * 1024 * 1024
DEFAULT_ARENA = 16 * 1024 * 1024

_DATA_LANE = 1


def infer_elem_types(graph: DataFlowGraph) -> dict[int, ElemType]:
    """Propagate element types along edges; sources carry them explicitly."""
    out: dict[int, ElemType] = {}
    for node_id in graph.topological_order():
        node = graph.nodes[node_id]
        if node.output is None:
            continue
        if node.kind in (NodeKind.INPUT, NodeKind.VARIABLE, NodeKind.GEN_GRAD):
            out[node.output] = node.elem_type
            continue
        ins = [out[e] for e in node.inputs]
        if any(t != ins[0] for t in ins[1:]):
            raise errors.ShapeMismatch(
                f"node {node_id}: mixed element types {[t.name for t in ins]}")
        out[node.output] = ins[0]
    return out


class TraceOracle:
    """Brute-force re-instrumentation of allocation sites, for verification.

    Keeps the cumulative latest-wins address map across all iterations and
    resolves transferred addresses at send time, independently of the
    first-iteration tracer.
    """

    def __init__(self):
        self.alloc_by_addr: dict[tuple[int, int], AllocSite] = {}
        self.sites_by_iteration: dict[int, set[AllocSite]] = {}

    def record_alloc(self, server: int, iteration: int, addr: int,
                     site: AllocSite) -> None:
        self.alloc_by_addr[(server, addr)] = site

    def record_send(self, server: int, iteration: int, addr: int) -> None:
        site = self.alloc_by_addr[(server, addr)]
        self.sites_by_iteration.setdefault(iteration, set()).add(site)


class ServerPolicy:
    """Allocator choice plus tracing hooks for one server."""

    def __init__(self, server: int, mode: str, rdma_arena: ArenaAllocator,
                 normal_arena: ArenaAllocator, trace: Optional[TraceState],
                 forced_arena_nodes: set[int], oracle: Optional[TraceOracle]):
        self.server = server
        self.mode = mode
        self.rdma_arena = rdma_arena
        self.normal_arena = normal_arena
        self.trace = trace
        self.forced_arena_nodes = forced_arena_nodes
        self.oracle = oracle

    def allocate(self, node_id: int, ordinal: int, nbytes: int,
                 iteration: int) -> BufferRef:
        if nbytes == 0:
            return null_buffer()
        site = AllocSite(node_id, ordinal)
        use_arena = False
        if self.mode == "zerocp":
            if node_id in self.forced_arena_nodes:
                use_arena = True
            elif iteration >= 2:
                use_arena = choose_allocator(self.trace, site, iteration) == "arena"
        arena = self.rdma_arena if use_arena else self.normal_arena
        handle = arena.alloc(nbytes)
        if self.mode == "zerocp" and iteration == 1:
            self.trace.record_alloc(handle.base_addr, site)
        if self.oracle is not None:
            self.oracle.record_alloc(self.server, iteration, handle.base_addr, site)
        return BufferRef(handle, arena)


# -- node handlers -------------------------------------------------------------


class _NodeHandler(OpHandler):
    def __init__(self, session: "Session", server: int, node):
        self.session = session
        self.server = server
        self.node = node
        self.executor: Executor = session.executors[server]
        self.space = session.spaces[server]


class ComputeHandler(_NodeHandler):
    mode = ExecMode.SYNC

    def run(self) -> None:
        session, node, ex = self.session, self.node, self.executor
        inputs = ex.input_tensors(node.inputs)
        arrays = [t.array(self.space) for t in inputs]
        if node.compute_time > 0:
            session.fabric.clock.advance(node.compute_time)
        out = compute_node(node, arrays, seed=session.seed, iteration=ex.iteration)
        expected = session.elem_types[node.output].np_dtype
        out = np.ascontiguousarray(out, dtype=expected)
        ref = session.policy[self.server].allocate(node.node_id, 0, out.nbytes,
                                                   ex.iteration)
        if out.nbytes:
            self.space.write_at(ref.handle, 0, out.tobytes())
        tensor = Tensor(tuple(int(d) for d in out.shape),
                        session.elem_types[node.output], ref, self.server)
        ex.deliver_edge(node.output, tensor)
        ex.release_inputs(node.inputs)


class VariableHandler(_NodeHandler):
    mode = ExecMode.SYNC

    def __init__(self, session, server, node):
        super().__init__(session, server, node)
        self.ref: Optional[BufferRef] = None

    def run(self) -> None:
        session, node, ex = self.session, self.node, self.executor
        dims = node.shape.static_dims()
        if self.ref is None:
            nbytes = node.shape.num_elements() * node.elem_type.size
            self.ref = session.policy[self.server].allocate(
                node.node_id, 0, nbytes, ex.iteration)
            init = synthesize_values(dims, node.elem_type,
                               node_rng(session.seed, node.node_id, 0))
            if nbytes:
                self.space.write_at(self.ref.handle, 0, init.tobytes())
        tensor = Tensor(dims, node.elem_type, self.ref, self.server)
        ex.deliver_edge(node.output, tensor, transfer_ownership=False)


class InPlaceHandler(_NodeHandler):
    mode = ExecMode.SYNC

    def run(self) -> None:
        node, ex = self.node, self.executor
        inputs = ex.input_tensors(node.inputs)
        arrays = [t.array(self.space) for t in inputs]
        if node.compute_time > 0:
            self.session.fabric.clock.advance(node.compute_time)
        apply_in_place(node, arrays[0], arrays)
        target = inputs[0]
        out = Tensor(target.dims, target.elem_type, target.buffer, self.server)
        out.buffer.retain()
        ex.deliver_edge(node.output, out)
        ex.release_inputs(node.inputs)


class StaticSendHandler(_NodeHandler):
    mode = ExecMode.SYNC

    def __init__(self, session, server, node, sender: StaticSender):
        super().__init__(session, server, node)
        self.sender = sender

    def run(self) -> None:
        session, ex = self.session, self.executor
        edge = self.node.inputs[0]
        tensor = ex.edge_values[edge]
        session.note_payload(edge, self.sender.entry.consumer_server, tensor.nbytes)
        trace = session.sending_trace(self.server, tensor)
        self.sender.send(tensor, stage_copy=session.stage_copy_now(ex.iteration),
                         trace=trace)
        ex.release_inputs(self.node.inputs)


class DynSendHandler(_NodeHandler):
    mode = ExecMode.SYNC

    def __init__(self, session, server, node, sender: DynSender):
        super().__init__(session, server, node)
        self.sender = sender

    def run(self) -> None:
        session, ex = self.session, self.executor
        edge = self.node.inputs[0]
        tensor = ex.edge_values[edge]
        session.note_payload(edge, self.sender.entry.consumer_server, tensor.nbytes)
        trace = session.sending_trace(self.server, tensor)
        self.sender.send(tensor, stage_copy=session.stage_copy_now(ex.iteration),
                         trace=trace)
        ex.release_inputs(self.node.inputs)


class StaticRecvHandler(_NodeHandler):
    mode = ExecMode.POLLING_ASYNC

    def __init__(self, session, server, node, receiver: StaticReceiver):
        super().__init__(session, server, node)
        self.receiver = receiver

    def poll(self):
        return self.receiver.poll()

    def complete(self, token) -> None:
        self.session.note_recv_buffer(self.server, self.node.node_id, token)
        self.executor.deliver_edge(self.node.output, token)


class DynRecvHandler(_NodeHandler):
    mode = ExecMode.POLLING_ASYNC

    def __init__(self, session, server, node, receiver: DynReceiver):
        super().__init__(session, server, node)
        self.receiver = receiver

    def poll(self):
        return self.receiver.poll()

    def complete(self, token) -> None:
        tensor = self.receiver.fetch(token)
        self.session.note_recv_buffer(self.server, self.node.node_id, tensor)
        self.executor.deliver_edge(self.node.output, tensor)


class RpcSendHandler(_NodeHandler):
    mode = ExecMode.POLLING_ASYNC

    def __init__(self, session, server, node, sender: RpcSender,
                 consumer_server: int):
        super().__init__(session, server, node)
        self.sender = sender
        self.consumer_server = consumer_server
        self._started = False

    def poll(self):
        ex = self.executor
        edge = self.node.inputs[0]
        if not self._started:
            tensor = ex.edge_values[edge]
            self.session.note_payload(edge, self.consumer_server, tensor.nbytes)
            self.sender.start(tensor)
            self._started = True
        before = self.sender.fragments_sent
        done = self.sender.pump()
        if self.sender.fragments_sent != before:
            ex.epoch.bump()  # partial progress; keep the watchdog quiet
        return True if done else None

    def complete(self, token) -> None:
        self._started = False
        self.executor.release_inputs(self.node.inputs)


class RpcRecvHandler(_NodeHandler):
    mode = ExecMode.POLLING_ASYNC

    def __init__(self, session, server, node, receiver: RpcReceiver):
        super().__init__(session, server, node)
        self.receiver = receiver

    def poll(self):
        before = self.receiver.fragments_received
        result = self.receiver.poll()
        if self.receiver.fragments_received != before:
            self.executor.epoch.bump()
        return result

    def complete(self, token) -> None:
        self.executor.deliver_edge(self.node.output, token)


_HANDLER_KINDS = {
    NodeKind.INPUT: ComputeHandler,
    NodeKind.GEN_GRAD: ComputeHandler,
    NodeKind.MATMUL: ComputeHandler,
    NodeKind.ADD: ComputeHandler,
    NodeKind.SIGMOID: ComputeHandler,
    NodeKind.REDUCE_MAX: ComputeHandler,
    NodeKind.CONCAT_DYN: ComputeHandler,
    NodeKind.VARIABLE: VariableHandler,
    NodeKind.APPLY_GRAD: InPlaceHandler,
    NodeKind.INPLACE_SCALE: InPlaceHandler,
}


def variables_feeding_sends(pg: PartitionedGraph) -> set[int]:
    """Variable nodes whose persistent buffer is handed to a send operator.

    Their storage must be registered from the start: it is allocated once,
    before tracing can influence any later allocation.
    """
    out: set[int] = set()
    for node_id, node in pg.graph.nodes.items():
        if node.kind is not NodeKind.VARIABLE:
            continue
        server = pg.server_of(node_id)
        frontier = [node.output]
        seen = set()
        while frontier:
            e = frontier.pop()
            if e in seen:
                continue
            seen.add(e)
            for c in pg.consumers_on(e, server):
                cnode = pg.node(c)
                if cnode.kind in SEND_KINDS:
                    out.add(node_id)
                elif (cnode.kind in IN_PLACE_KINDS and cnode.inputs
                      and cnode.inputs[0] == e and cnode.output is not None):
                    frontier.append(cnode.output)
    return out


@dataclass
class _IterStats:
    payload_bytes: int = 0


class Session:
    """A placed graph wired to simulated servers, ready to run mini-batches."""

    def __init__(self, graph: DataFlowGraph, placement: dict[int, int], *,
                 mode: str = "zerocp", seed: int = 0,
                 cost_model: Optional[CostModel] = None,
                 faults: Optional[FaultConfig] = None,
                 capacity_bytes: int = DEFAULT_CAPACITY,
                 arena_bytes: int = DEFAULT_ARENA,
                 mechanism_override: Optional[str] = None,
                 num_cqs: int = 1,
                 threads: bool = False,
                 watchdog_sweeps: int = 64,
                 capture_edges: bool = False,
                 trace_oracle: bool = False):
        if mode not in MODES:
            raise errors.InvalidConfig(f"unknown mode {mode!r}; pick one of {MODES}")
        if arena_bytes + 4096 > capacity_bytes:
            raise errors.InvalidConfig("arena does not fit in the space capacity")
        self.graph = graph
        self.placement = dict(placement)
        self.mode = mode
        self.seed = seed
        self.threads = threads
        self.watchdog_sweeps = watchdog_sweeps
        self.capture_edges = capture_edges

        self.shapes = infer_shapes(graph)
        self.elem_types = infer_elem_types(graph)
        self.pgraph = partition(graph, placement)
        self.servers = self.pgraph.servers

        self.fabric = Fabric(cost_model, seed=seed, faults=faults)
        self.epoch = SharedEpoch()
        self.oracle = TraceOracle() if trace_oracle else None

        self.spaces: dict[int, MemorySpace] = {}
        self.rdma_arenas: dict[int, ArenaAllocator] = {}
        self.normal_arenas: dict[int, ArenaAllocator] = {}
        self.flag_cells = {}
        self.devices = {}
        for s in self.servers:
            space = MemorySpace(s, capacity_bytes, seed=seed)
            space.on_copy = self._charge_copy
            self.spaces[s] = space
            rdma_backing = space.allocate_region(arena_bytes, register=True)
            self.rdma_arenas[s] = ArenaAllocator(space, rdma_backing)
            normal_len = capacity_bytes - space.next_addr - 64
            normal_backing = space.allocate_region(normal_len, register=False)
            self.normal_arenas[s] = ArenaAllocator(space, normal_backing)
            flag = self.rdma_arenas[s].alloc(1)
            space.write_at(flag, 0, b"\x01")
            self.flag_cells[s] = flag

        self._connect_servers(num_cqs)
        self._classify_and_plan(mechanism_override)
        self._build_executors()

        self.report = RunReport(mechanism=mode)
        if capture_edges:
            self.report.captured = {}
        for s in self.servers:
            self.report.arena_baseline[s] = self.rdma_arenas[s].current_resident
        self._iter_stats = _IterStats()
        self._edge_payload: dict[int, int] = {}
        self._edge_sends: dict[tuple[int, int], int] = {}
        self._next_iteration = 1

    # -- setup helpers ---------------------------------------------------------

    def _charge_copy(self, nbytes: int) -> None:
        self.fabric.clock.advance(self.fabric.cost.copy_cost(nbytes))

    def _pairs_with_traffic(self) -> dict[tuple[int, int], list]:
        pairs: dict[tuple[int, int], list] = {}
        for ce in self.pgraph.cross:
            a, b = sorted((ce.producer_server, ce.consumer_server))
            pairs.setdefault((a, b), []).append(ce)
        for edges in pairs.values():
            edges.sort(key=lambda ce: (ce.edge_id, ce.consumer_server))
        return pairs

    def _connect_servers(self, num_cqs: int) -> None:
        pairs = self._pairs_with_traffic()
        if self.mode == "rpc":
            lanes = 1 + max((len(v) for v in pairs.values()), default=0)
        else:
            lanes = 2 if pairs else 1
        for s in self.servers:
            self.devices[s] = self.fabric.create_device(
                self.spaces[s], num_cqs=num_cqs, qps_per_peer=lanes)
        self._pair_channels = {}
        self._lane_of: dict[tuple[int, int], int] = {}
        for (a, b), edges in sorted(pairs.items()):
            a_side = self.devices[a].connect((b, 1))
            b_side = self.devices[b].channels_to((a, 1))
            self._pair_channels[(a, b)] = (a_side, b_side)
            if self.mode == "rpc":
                for i, ce in enumerate(edges):
                    self._lane_of[(ce.edge_id, ce.consumer_server)] = 1 + i

    def channel_between(self, server: int, peer: int, lane: int):
        a, b = sorted((server, peer))
        a_side, b_side = self._pair_channels[(a, b)]
        return (a_side if server == a else b_side)[lane]

    def _classify_and_plan(self, override: Optional[str]) -> None:
        self.mechanisms = classify_edges(self.pgraph, self.shapes, override)
        self.plan = build_plan(self.pgraph, self.shapes, self.mechanisms,
                               self.elem_types)
        if self.mode == "rpc":
            kinds = {key: (NodeKind.RPC_SEND, NodeKind.RPC_RECV)
                     for key in self.mechanisms}
            self.pgraph.set_mechanisms(kinds)
            return
        kinds = {}
        for key, mech in self.mechanisms.items():
            if mech is Mechanism.STATIC:
                kinds[key] = (NodeKind.RDMA_SEND, NodeKind.RDMA_RECV)
            else:
                kinds[key] = (NodeKind.RDMA_SEND_DYN, NodeKind.RDMA_RECV_DYN)
        self.pgraph.set_mechanisms(kinds)
        preallocate_and_distribute(self.plan, self.spaces, self.rdma_arenas,
                                   self.devices,
                                   lambda a, b: self.channel_between(a, b, 0))

    def _build_executors(self) -> None:
        self.executors = {s: Executor(s, self.epoch) for s in self.servers}
        self.traces: dict[int, TraceState] = {}
        self.policy: dict[int, ServerPolicy] = {}
        forced = variables_feeding_sends(self.pgraph) if self.mode == "zerocp" else set()
        for s in self.servers:
            trace = TraceState() if self.mode == "zerocp" else None
            self.traces[s] = trace
            self.policy[s] = ServerPolicy(s, self.mode, self.rdma_arenas[s],
                                          self.normal_arenas[s], trace, forced,
                                          self.oracle)
        self.senders = {}
        self.receivers = {}
        cross_by_send = {ce.send_node: ce for ce in self.pgraph.cross}
        cross_by_recv = {ce.recv_node: ce for ce in self.pgraph.cross}
        for s in self.servers:
            ex = self.executors[s]
            if self.capture_edges:
                ex.on_deliver = self._capture_hook(s)
            node_ids = self.pgraph.nodes_on(s)
            deps = in_place_control_deps(
                node_ids, self.pgraph.node,
                lambda e, _s=s: self.pgraph.consumers_on(e, _s))
            for node_id in node_ids:
                node = self.pgraph.node(node_id)
                handler = self._make_handler(s, node, cross_by_send, cross_by_recv)
                ex.add_node(node_id, handler, input_edges=node.inputs,
                            control_deps=tuple(deps.get(node_id, ())))

    def _make_handler(self, server: int, node, cross_by_send, cross_by_recv):
        kind = node.kind
        if kind in _HANDLER_KINDS:
            return _HANDLER_KINDS[kind](self, server, node)
        space, rdma = self.spaces[server], self.rdma_arenas[server]
        if kind in (NodeKind.RDMA_SEND, NodeKind.RDMA_SEND_DYN):
            ce = cross_by_send[node.node_id]
            entry = self.plan.entries[(ce.edge_id, ce.consumer_server)]
            channel = self.channel_between(server, ce.consumer_server, _DATA_LANE)
            if kind is NodeKind.RDMA_SEND:
                sender = StaticSender(entry, space, rdma, channel,
                                      self.flag_cells[server])
                self.senders[entry.key] = sender
                return StaticSendHandler(self, server, node, sender)
            sender = DynSender(entry, space, rdma, channel)
            self.senders[entry.key] = sender
            return DynSendHandler(self, server, node, sender)
        if kind in (NodeKind.RDMA_RECV, NodeKind.RDMA_RECV_DYN):
            ce = cross_by_recv[node.node_id]
            entry = self.plan.entries[(ce.edge_id, ce.consumer_server)]
            if kind is NodeKind.RDMA_RECV:
                receiver = StaticReceiver(entry, space)
                self.receivers[entry.key] = receiver
                return StaticRecvHandler(self, server, node, receiver)
            channel = self.channel_between(server, ce.producer_server, _DATA_LANE)
            receiver = DynReceiver(entry, space, rdma, channel)
            self.receivers[entry.key] = receiver
            return DynRecvHandler(self, server, node, receiver)
        if kind is NodeKind.RPC_SEND:
            ce = cross_by_send[node.node_id]
            lane = self._lane_of[(ce.edge_id, ce.consumer_server)]
            channel = self.channel_between(server, ce.consumer_server, lane)
            sender = RpcSender(ce.edge_id, self.shapes[ce.edge_id].rank, space,
                               rdma, channel)
            self.senders[(ce.edge_id, ce.consumer_server)] = sender
            return RpcSendHandler(self, server, node, sender, ce.consumer_server)
        if kind is NodeKind.RPC_RECV:
            ce = cross_by_recv[node.node_id]
            lane = self._lane_of[(ce.edge_id, ce.consumer_server)]
            channel = self.channel_between(server, ce.producer_server, lane)
            receiver = RpcReceiver(ce.edge_id, self.shapes[ce.edge_id].rank, space,
                                   rdma, self.normal_arenas[server], channel)
            self.receivers[(ce.edge_id, ce.consumer_server)] = receiver
            return RpcRecvHandler(self, server, node, receiver)
        raise errors.GraphError(f"no handler for kind {kind}")

    def _capture_hook(self, server: int):
        def hook(edge_id: int, tensor: Tensor) -> None:
            data = (b"" if tensor.nbytes == 0 else
                    self.spaces[server].read_at(tensor.buffer.handle, 0, tensor.nbytes))
            it = self.executors[server].iteration
            self.report.captured[(it, edge_id, server)] = data
        return hook

    # -- services used by handlers -------------------------------------------------

    def stage_copy_now(self, iteration: int) -> bool:
        if self.mode == "cp":
            return True
        return iteration == 1  # zerocp warm-up; rpc never reaches here

    def sending_trace(self, server: int, tensor: Tensor) -> Optional[TraceState]:
        if self.oracle is not None and tensor.nbytes > 0:
            ex = self.executors[server]
            self.oracle.record_send(server, ex.iteration, tensor.buffer.handle.base_addr)
        if self.mode != "zerocp":
            return None
        trace = self.traces[server]
        return trace if not trace.frozen else None

    def note_payload(self, edge_id: int, consumer_server: int, nbytes: int) -> None:
        self._iter_stats.payload_bytes += nbytes
        self._edge_payload[edge_id] = self._edge_payload.get(edge_id, 0) + nbytes
        key = (edge_id, consumer_server)
        self._edge_sends[key] = self._edge_sends.get(key, 0) + 1

    def note_recv_buffer(self, server: int, node_id: int, tensor: Tensor) -> None:
        """Receive operators allocate (or own) tensor storage; trace them too,
        so a received buffer forwarded through an in-place chain into another
        send still resolves to an allocation site."""
        if tensor.nbytes == 0:
            return
        site = AllocSite(node_id, 0)
        addr = tensor.buffer.handle.base_addr
        it = self.executors[server].iteration
        if self.mode == "zerocp" and it == 1:
            self.traces[server].record_alloc(addr, site)
        if self.oracle is not None:
            self.oracle.record_alloc(server, it, addr, site)

    # -- the mini-batch loop ----------------------------------------------------------

    def run(self, iterations: int) -> RunReport:
        """Execute ``iterations`` mini-batches with a barrier between them.

        Repeated calls continue the iteration numbering, so the tracing
        warm-up happens exactly once per session.
        """
        first = self._next_iteration
        for it in range(first, first + iterations):
            snap = self._snapshot()
            wall0 = time.perf_counter()
            for s in self.servers:
                self.executors[s].begin_iteration(it)
            if self.threads:
                self._run_threaded()
            else:
                run_all(list(self.executors.values()), self.epoch,
                        watchdog_sweeps=self.watchdog_sweeps)
            if it == 1 and self.mode == "zerocp":
                for trace in self.traces.values():
                    trace.freeze()
            self._append_row(it, snap, time.perf_counter() - wall0)
            self._next_iteration = it + 1
        self._finalize_report()
        return self.report

    def _run_threaded(self) -> None:
        failures: list[BaseException] = []
        lock = threading.Lock()

        def drive(ex: Executor) -> None:
            try:
                ex.run_until_done()
            except BaseException as exc:  # propagate to the coordinator
                with lock:
                    failures.append(exc)

        threads = [threading.Thread(target=drive, args=(ex,), daemon=True)
                   for ex in self.executors.values()]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        if failures:
            raise failures[0]

    def _snapshot(self) -> dict:
        copied = events = serialized = 0
        for space in self.spaces.values():
            copied += space.counters.payload_bytes_copied
            events += space.counters.payload_copy_events
            serialized += space.counters.serialize_bytes
        return {
            "wire": self.fabric.wire_bytes,
            "copied": copied,
            "events": events,
            "serialized": serialized,
            "sim": self.fabric.clock.now(),
            "polls": sum(ex.poll_count for ex in self.executors.values()),
            "payload": self._iter_stats.payload_bytes,
        }

    def _append_row(self, iteration: int, before: dict, wall_s: float) -> None:
        after = self._snapshot()
        peak = max(self.rdma_arenas[s].peak_resident for s in self.servers)
        self.report.rows.append(IterationRow(
            iteration=iteration,
            bytes_sent=after["wire"] - before["wire"],
            payload_bytes=after["payload"] - before["payload"],
            payload_bytes_copied=after["copied"] - before["copied"],
            copy_events=after["events"] - before["events"],
            serialize_bytes=after["serialized"] - before["serialized"],
            arena_peak_bytes=peak,
            sim_time_us=(after["sim"] - before["sim"]) * 1e6,
            wall_time_us=wall_s * 1e6,
            polls=after["polls"] - before["polls"],
        ))
        for s in self.servers:
            self.report.arena_resident[(iteration, s)] = \
                self.rdma_arenas[s].current_resident

    def _finalize_report(self) -> None:
        self.report.edge_payload_bytes = dict(self._edge_payload)
        self.report.edge_send_count = dict(self._edge_sends)
        for s in self.servers:
            self.report.per_server_final[s] = {
                "arena_resident": self.rdma_arenas[s].current_resident,
                "arena_peak": self.rdma_arenas[s].peak_resident,
                "normal_resident": self.normal_arenas[s].current_resident,
                "payload_bytes_copied": self.spaces[s].counters.payload_bytes_copied,
                "copy_events": self.spaces[s].counters.payload_copy_events,
                "polls": self.executors[s].poll_count,
            }

    # -- miscellany --------------------------------------------------------------

    def dump_plan(self) -> str:
        return self.plan.dump_table()

    def close(self) -> None:
        for sender in self.senders.values():
            if isinstance(sender, DynSender):
                sender.close()

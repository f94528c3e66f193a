import pytest

from rdmaflow import errors
from rdmaflow.analyzer import (AllocSite, TraceState, build_plan, choose_allocator,
                               classify_edges, exchange_addresses,
                               feeds_variable, make_addr_handler,
                               preallocate_receiver_buffers)
from rdmaflow.fabric import Fabric
from rdmaflow.graph import DataFlowGraph, infer_shapes, partition, shape_of
from rdmaflow.memspace import ArenaAllocator, MemorySpace
from rdmaflow.runtime.session import Session, infer_elem_types
from rdmaflow.wire import Mechanism, meta_block_size
from rdmaflow.workloads import build_ps_workload


def cross_graph():
    """producer on 0; reduction consumer on 1."""
    g = DataFlowGraph()
    payload = g.gen_grad(shape_of(3, 4))
    out = g.reduce_max(payload)
    placement = {g.edges[payload].producer: 0, g.edges[out].producer: 1}
    return g, placement, payload


class TestClassification:
    def test_static_edge_into_reduction(self):
        g, placement, payload = cross_graph()
        pg = partition(g, placement)
        mechs = classify_edges(pg, infer_shapes(g))
        assert mechs[(payload, 1)] is Mechanism.STATIC

    def test_variable_feeding_edge_is_dynamic(self):
        # a fully static gradient edge that lands in an in-place variable
        # update must still use dynamic allocation
        g, placement = build_ps_workload(4096, 1, 0.0, 1)
        pg = partition(g, placement)
        shapes = infer_shapes(g)
        mechs = classify_edges(pg, shapes)
        by_mech = {}
        for ce in pg.cross:
            assert shapes[ce.edge_id].is_static
            by_mech.setdefault(mechs[(ce.edge_id, ce.consumer_server)], []).append(ce)
        assert len(by_mech[Mechanism.STATIC]) == 1   # weight pulled by the worker
        assert len(by_mech[Mechanism.DYNAMIC]) == 1  # gradient pushed at the server

    def test_unknown_shape_is_dynamic(self):
        g = DataFlowGraph()
        x = g.gen_grad(shape_of(2, 3))
        dyn = g.concat_dyn([x])
        out = g.reduce_max(dyn)
        placement = {g.edges[x].producer: 0, g.edges[dyn].producer: 0,
                     g.edges[out].producer: 1}
        pg = partition(g, placement)
        mechs = classify_edges(pg, infer_shapes(g))
        assert mechs[(dyn, 1)] is Mechanism.DYNAMIC

    def test_in_place_chain_reaches_variable(self):
        # recv -> pass-through scale -> in-place variable update
        g = DataFlowGraph()
        v = g.variable(shape_of(8))
        grad = g.gen_grad(shape_of(8))
        scaled = g.inplace_scale(grad)
        g.apply_grad(v, scaled)
        placement = {n: 1 for n in g.nodes}
        placement[g.edges[grad].producer] = 0
        pg = partition(g, placement)
        assert feeds_variable(pg, grad, 1)
        mechs = classify_edges(pg, infer_shapes(g))
        assert mechs[(grad, 1)] is Mechanism.DYNAMIC

    def test_overrides(self):
        g, placement, payload = cross_graph()
        pg = partition(g, placement)
        shapes = infer_shapes(g)
        assert classify_edges(pg, shapes, "dynamic")[(payload, 1)] is Mechanism.DYNAMIC
        assert classify_edges(pg, shapes, "static")[(payload, 1)] is Mechanism.STATIC

    def test_static_override_requires_static_shape(self):
        g = DataFlowGraph()
        x = g.gen_grad(shape_of(2, 3))
        dyn = g.concat_dyn([x])
        out = g.reduce_max(dyn)
        placement = {g.edges[x].producer: 0, g.edges[dyn].producer: 0,
                     g.edges[out].producer: 1}
        pg = partition(g, placement)
        with pytest.raises(errors.InvalidConfig):
            classify_edges(pg, infer_shapes(g), "static")

    def test_classification_invariant_under_node_relabeling(self):
        # build the same topology twice with different construction order
        def build(reversed_grads):
            g = DataFlowGraph()
            v = g.variable(shape_of(4))
            grads = []
            for _ in range(2):
                grads.append(g.gen_grad(shape_of(4), inputs=(v,)))
            if reversed_grads:
                grads = grads[::-1]
            for grad in grads:
                g.apply_grad(v, grad)
            placement = {}
            for node in g.nodes.values():
                placement[node.node_id] = 0
            for i, grad in enumerate(sorted(grads)):
                placement[g.edges[grad].producer] = 1 + i
            return g, placement

        for flip in (False, True):
            g, placement = build(flip)
            pg = partition(g, placement)
            mechs = classify_edges(pg, infer_shapes(g))
            for ce in pg.cross:
                mech = mechs[(ce.edge_id, ce.consumer_server)]
                if ce.consumer_server == 0:
                    assert mech is Mechanism.DYNAMIC  # gradients into the update
                else:
                    assert mech is Mechanism.STATIC   # weight to the workers


class TestPreallocation:
    def setup_plan(self, override=None):
        g, placement, payload = cross_graph()
        pg = partition(g, placement)
        shapes = infer_shapes(g)
        mechs = classify_edges(pg, shapes, override)
        plan = build_plan(pg, shapes, mechs, infer_elem_types(g))
        fabric = Fabric(seed=3)
        spaces = {s: MemorySpace(s, 1 << 20, seed=s) for s in (0, 1)}
        arenas = {s: ArenaAllocator(spaces[s], spaces[s].allocate_region(1 << 19, register=True))
                  for s in (0, 1)}
        devices = {s: fabric.create_device(spaces[s]) for s in (0, 1)}
        channels = {1: devices[0].connect(devices[1].endpoint)[0]}
        return plan, spaces, arenas, devices, channels, payload

    def test_static_prealloc_and_exchange(self):
        plan, spaces, arenas, devices, channels, payload = self.setup_plan()
        preallocate_receiver_buffers(plan, 1, spaces[1], arenas[1])
        devices[1].register_rpc_handler(make_addr_handler(plan, 1))
        exchange_addresses(plan, 0, channels)
        entry = plan.entries[(payload, 1)]
        assert entry.recv_buffer.length == 3 * 4 * 4 + 1 == 49
        # sender learned exactly the receiver's coordinates
        assert entry.remote_addr == entry.recv_buffer.base_addr
        assert entry.remote_token == entry.recv_buffer.access_token
        assert entry.remote_len == 49
        # flag byte starts cleared
        assert spaces[1].read_at(entry.recv_buffer, 48, 1) == b"\x00"

    def test_dynamic_prealloc_sizes_meta_block(self):
        plan, spaces, arenas, devices, channels, payload = self.setup_plan("dynamic")
        preallocate_receiver_buffers(plan, 1, spaces[1], arenas[1])
        entry = plan.entries[(payload, 1)]
        assert entry.recv_buffer.length == meta_block_size(2) == 49

    def test_two_workers_get_distinct_receiver_regions(self):
        g, placement = build_ps_workload(4096, 1, 0.0, 2)
        session = Session(g, placement, mode="zerocp", seed=0,
                          capacity_bytes=1 << 22, arena_bytes=1 << 21)
        ps = max(session.servers)
        entries = session.plan.for_consumer(ps)
        assert len(entries) == 2
        addrs = {e.recv_buffer.base_addr for e in entries}
        assert len(addrs) == 2
        session.close()

    def test_unknown_edge_in_exchange(self):
        plan, spaces, arenas, devices, channels, payload = self.setup_plan()
        devices[1].register_rpc_handler(make_addr_handler(plan, 1))
        # preallocation skipped: the handler must refuse
        with pytest.raises(errors.UnknownAddress):
            exchange_addresses(plan, 0, channels)


class TestTraceState:
    def test_in_place_chain_keeps_allocator_entry(self):
        ts = TraceState()
        ts.record_alloc(0x100, AllocSite(1, 0))
        # a pass-through node forwards the buffer: no new record
        ts.record_transfer(0x100)
        assert ts.transfer_sites == {AllocSite(1, 0)}

    def test_overwrite_keeps_latest(self):
        ts = TraceState()
        ts.record_alloc(0x100, AllocSite(1, 0))
        ts.record_alloc(0x100, AllocSite(3, 0))  # freed and reallocated
        ts.record_transfer(0x100)
        assert ts.transfer_sites == {AllocSite(3, 0)}

    def test_two_allocations_one_node(self):
        ts = TraceState()
        ts.record_alloc(0x10, AllocSite(5, 0))
        ts.record_alloc(0x20, AllocSite(5, 1))
        ts.record_transfer(0x10)
        ts.record_transfer(0x20)
        assert ts.transfer_sites == {AllocSite(5, 0), AllocSite(5, 1)}

    def test_unknown_address(self):
        ts = TraceState()
        with pytest.raises(errors.UnknownAddress):
            ts.record_transfer(0xDEAD)

    def test_frozen_rejects_updates(self):
        ts = TraceState()
        ts.record_alloc(1, AllocSite(0, 0))
        ts.freeze()
        with pytest.raises(AssertionError):
            ts.record_alloc(2, AllocSite(0, 0))

    def test_choose_allocator_truth_table(self):
        ts = TraceState()
        ts.record_alloc(1, AllocSite(7, 0))
        ts.record_transfer(1)
        ts.freeze()
        in_s = AllocSite(7, 0)
        out_s = AllocSite(9, 0)
        assert choose_allocator(ts, in_s, 2) == "arena"
        assert choose_allocator(ts, in_s, 1) == "normal"  # tracing pass
        assert choose_allocator(ts, out_s, 5) == "normal"

"""Dataflow model: tensors, operator nodes, shape inference, partitioning.

Graphs are built through :class:`DataFlowGraph` helper methods, frozen, and
then shared read-only by analysis and executors. Communication node kinds
are inserted exclusively by :func:`partition`; users never create them.

Compute semantics are deliberately simple but fully deterministic: opaque
generators draw from an RNG keyed on (seed, node, iteration) so results do
not depend on placement or scheduling, which is what makes the
distributed-equals-local oracle exact.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import errors
from .memspace import BufferRef
from .wire import ElemType


class ExecMode(enum.Enum):
    SYNC = "sync"
    ASYNC = "async"
    POLLING_ASYNC = "polling_async"


class NodeKind(enum.Enum):
    INPUT = "Input"
    VARIABLE = "Variable"
    MATMUL = "MatMul"
    ADD = "Add"
    SIGMOID = "Sigmoid"
    REDUCE_MAX = "ReduceMax"
    APPLY_GRAD = "ApplyGrad"
    INPLACE_SCALE = "InPlaceScale"
    CONCAT_DYN = "ConcatDyn"
    GEN_GRAD = "GenGrad"
    # communication kinds, inserted by partitioning only
    RDMA_SEND = "RdmaSend"
    RDMA_RECV = "RdmaRecv"
    RDMA_SEND_DYN = "RdmaSendDyn"
    RDMA_RECV_DYN = "RdmaRecvDyn"
    RPC_SEND = "RpcSend"
    RPC_RECV = "RpcRecv"


SEND_KINDS = {NodeKind.RDMA_SEND, NodeKind.RDMA_SEND_DYN, NodeKind.RPC_SEND}
RECV_KINDS = {NodeKind.RDMA_RECV, NodeKind.RDMA_RECV_DYN, NodeKind.RPC_RECV}
COMM_KINDS = SEND_KINDS | RECV_KINDS
#: kinds that forward their first input buffer instead of allocating output
IN_PLACE_KINDS = {NodeKind.APPLY_GRAD, NodeKind.INPLACE_SCALE}


@dataclass(frozen=True)
class TensorShape:
    """Possibly partial shape; ``None`` marks an unknown dimension."""

    dims: tuple[Optional[int], ...]

    @property
    def rank(self) -> int:
        return len(self.dims)

    @property
    def is_static(self) -> bool:
        return all(d is not None for d in self.dims)

    def num_elements(self) -> Optional[int]:
        if not self.is_static:
            return None
        n = 1
        for d in self.dims:
            n *= d
        return n

    def static_dims(self) -> tuple[int, ...]:
        if not self.is_static:
            raise errors.ShapeMismatch(f"shape {self} is not fully static")
        return tuple(self.dims)  # type: ignore[return-value]

    def __str__(self) -> str:
        return "(" + ", ".join("?" if d is None else str(d) for d in self.dims) + ")"


def shape_of(*dims: Optional[int]) -> TensorShape:
    return TensorShape(tuple(dims))


@dataclass
class Tensor:
    """Runtime tensor value: concrete dims plus a backing buffer."""

    dims: tuple[int, ...]
    elem_type: ElemType
    buffer: BufferRef
    space_id: int

    @property
    def rank(self) -> int:
        return len(self.dims)

    @property
    def nbytes(self) -> int:
        n = 1
        for d in self.dims:
            n *= d
        return n * self.elem_type.size

    def array(self, space) -> np.ndarray:
        """Zero-copy numpy view over the backing buffer."""
        if self.nbytes == 0:
            return np.empty(self.dims, dtype=self.elem_type.np_dtype)
        view = space.view(self.buffer.handle, 0, self.nbytes)
        return view.view(self.elem_type.np_dtype).reshape(self.dims)


@dataclass
class Node:
    node_id: int
    kind: NodeKind
    inputs: tuple[int, ...]
    output: Optional[int]
    shape: Optional[TensorShape] = None
    elem_type: Optional[ElemType] = None
    compute_time: float = 0.0
    dyn_range: tuple[int, int] = (1, 16)
    exec_mode: ExecMode = ExecMode.SYNC

    @property
    def outputs(self) -> list[int]:
        return [self.output] if self.output is not None else []


@dataclass
class Edge:
    edge_id: int
    producer: int
    consumers: list[int] = field(default_factory=list)


class DataFlowGraph:
    """Operator graph; build with the helper methods, then :meth:`freeze`."""

    def __init__(self):
        self.nodes: dict[int, Node] = {}
        self.edges: dict[int, Edge] = {}
        self._next_node = 0
        self._next_edge = 0
        self._frozen = False
        self._topo: Optional[list[int]] = None

    # -- construction -----------------------------------------------------------

    def _add_node(self, kind: NodeKind, inputs: Sequence[int], *,
                  with_output: bool = True, **attrs) -> Node:
        if self._frozen:
            raise errors.GraphError("graph is frozen")
        for e in inputs:
            if e not in self.edges:
                raise errors.GraphError(f"unknown edge {e}")
        node_id = self._next_node
        self._next_node += 1
        output = None
        if with_output:
            output = self._next_edge
            self._next_edge += 1
            self.edges[output] = Edge(output, node_id)
        node = Node(node_id, kind, tuple(inputs), output, **attrs)
        self.nodes[node_id] = node
        for e in inputs:
            self.edges[e].consumers.append(node_id)
        return node

    def input(self, shape: TensorShape, elem_type: ElemType = ElemType.F32) -> int:
        return self._add_node(NodeKind.INPUT, (), shape=shape, elem_type=elem_type).output

    def variable(self, shape: TensorShape, elem_type: ElemType = ElemType.F32) -> int:
        if not shape.is_static:
            raise errors.ShapeMismatch("variables need fully static shapes")
        return self._add_node(NodeKind.VARIABLE, (), shape=shape, elem_type=elem_type).output

    def matmul(self, a: int, b: int) -> int:
        return self._add_node(NodeKind.MATMUL, (a, b)).output

    def add(self, a: int, b: int) -> int:
        return self._add_node(NodeKind.ADD, (a, b)).output

    def sigmoid(self, x: int) -> int:
        return self._add_node(NodeKind.SIGMOID, (x,)).output

    def reduce_max(self, x: int) -> int:
        return self._add_node(NodeKind.REDUCE_MAX, (x,)).output

    def apply_grad(self, variable_edge: int, grad_edge: int) -> int:
        return self._add_node(NodeKind.APPLY_GRAD, (variable_edge, grad_edge)).output

    def inplace_scale(self, x: int) -> int:
        return self._add_node(NodeKind.INPLACE_SCALE, (x,)).output

    def concat_dyn(self, inputs: Sequence[int], dyn_range: tuple[int, int] = (1, 16)) -> int:
        if not inputs:
            raise errors.GraphError("concat needs at least one input")
        if dyn_range[0] < 0 or dyn_range[1] < dyn_range[0]:
            raise errors.InvalidConfig(f"bad dynamic range {dyn_range}")
        return self._add_node(NodeKind.CONCAT_DYN, tuple(inputs), dyn_range=dyn_range).output

    def gen_grad(self, shape: TensorShape, elem_type: ElemType = ElemType.F32,
                 inputs: Sequence[int] = (), compute_time: float = 0.0) -> int:
        if not shape.is_static:
            raise errors.ShapeMismatch("generated tensors need fully static shapes")
        return self._add_node(NodeKind.GEN_GRAD, tuple(inputs), shape=shape,
                              elem_type=elem_type, compute_time=compute_time).output

    # -- structure --------------------------------------------------------------

    def freeze(self) -> "DataFlowGraph":
        self._topo = self._toposort()
        self._frozen = True
        return self

    def topological_order(self) -> list[int]:
        if self._topo is None:
            self._topo = self._toposort()
        return list(self._topo)

    def _toposort(self) -> list[int]:
        indeg = {n: len(node.inputs) for n, node in self.nodes.items()}
        ready = sorted(n for n, d in indeg.items() if d == 0)
        order: list[int] = []
        queue = list(ready)
        while queue:
            n = queue.pop(0)
            order.append(n)
            node = self.nodes[n]
            if node.output is not None:
                for c in self.edges[node.output].consumers:
                    indeg[c] -= 1
                    if indeg[c] == 0:
                        queue.append(c)
        if len(order) != len(self.nodes):
            raise errors.GraphError("graph has a cycle")
        return order


# -- shape inference -------------------------------------------------------------


def _merge_dim(a: Optional[int], b: Optional[int], ctx: str) -> Optional[int]:
    """Forward-only merge: conflicts error, unknowns stay unknown."""
    if a is not None and b is not None and a != b:
        raise errors.ShapeMismatch(f"{ctx}: {a} vs {b}")
    if a is None or b is None:
        return None
    return a


def infer_shapes(graph: DataFlowGraph,
                 annotations: Optional[dict[int, TensorShape]] = None
                 ) -> dict[int, TensorShape]:
    """Propagate shapes forward in one topological pass.

    ``annotations`` maps Input node ids to shapes and overrides shapes given
    at construction. An output dimension is known only when every input
    dimension it derives from is known; no backward constraint solving.
    """
    annotations = annotations or {}
    shapes: dict[int, TensorShape] = {}
    for node_id in graph.topological_order():
        node = graph.nodes[node_id]
        if node.kind in COMM_KINDS:
            continue
        ins = [shapes[e] for e in node.inputs]
        out = _infer_node(node, ins, annotations)
        if node.output is not None:
            shapes[node.output] = out
    return shapes


def _infer_node(node: Node, ins: list[TensorShape],
                annotations: dict[int, TensorShape]) -> TensorShape:
    kind = node.kind
    if kind is NodeKind.INPUT:
        shape = annotations.get(node.node_id, node.shape)
        if shape is None:
            raise errors.MissingAnnotation(f"input node {node.node_id} has no shape")
        return shape
    if kind in (NodeKind.VARIABLE, NodeKind.GEN_GRAD):
        return node.shape  # enforced static at construction
    if kind is NodeKind.MATMUL:
        a, b = ins
        if a.rank != 2 or b.rank != 2:
            raise errors.ShapeMismatch(f"matmul needs rank-2 inputs, got {a} x {b}")
        _merge_dim(a.dims[1], b.dims[0], "matmul inner dimension")
        return TensorShape((a.dims[0], b.dims[1]))
    if kind is NodeKind.ADD:
        a, b = ins
        if a.rank != b.rank:
            raise errors.ShapeMismatch(f"add rank mismatch: {a} vs {b}")
        return TensorShape(tuple(_merge_dim(x, y, "add dimension")
                                 for x, y in zip(a.dims, b.dims)))
    if kind in (NodeKind.SIGMOID, NodeKind.INPLACE_SCALE):
        return ins[0]
    if kind is NodeKind.REDUCE_MAX:
        return TensorShape((1,))
    if kind is NodeKind.APPLY_GRAD:
        var, grad = ins
        if var.rank != grad.rank:
            raise errors.ShapeMismatch(f"gradient rank mismatch: {var} vs {grad}")
        for x, y in zip(var.dims, grad.dims):
            _merge_dim(x, y, "gradient dimension")
        return var
    if kind is NodeKind.CONCAT_DYN:
        rank = ins[0].rank
        if rank < 1:
            raise errors.ShapeMismatch("concat input must have rank >= 1")
        rest = list(ins[0].dims[1:])
        for s in ins[1:]:
            if s.rank != rank:
                raise errors.ShapeMismatch(f"concat rank mismatch: {ins[0]} vs {s}")
            rest = [_merge_dim(x, y, "concat trailing dimension")
                    for x, y in zip(rest, s.dims[1:])]
        return TensorShape((None, *rest))
    raise errors.GraphError(f"no shape rule for {kind}")


# -- deterministic compute kernels --------------------------------------------


def node_rng(seed: int, node_id: int, iteration: int) -> np.random.Generator:
    mix = ((seed & 0xFFFFFFFF) * 1_000_003 + node_id) * 1_000_033 + iteration
    return np.random.Generator(np.random.PCG64(mix & 0xFFFFFFFFFFFFFFFF))


def synthesize_values(shape: tuple[int, ...], elem_type: ElemType,
                      rng: np.random.Generator) -> np.ndarray:
    """Deterministic synthetic data; floats stay finite uniforms."""
    n = 1
    for d in shape:
        n *= d
    if elem_type in (ElemType.F32, ElemType.F64):
        data = rng.random(n, dtype=np.float32 if elem_type is ElemType.F32 else np.float64)
    elif elem_type is ElemType.U8:
        data = rng.integers(0, 256, size=n, dtype=np.uint8)
    else:
        data = rng.integers(-1000, 1000, size=n).astype(elem_type.np_dtype)
    return data.reshape(shape)


def resolve_runtime_dims(shape: TensorShape, node: Node, seed: int,
                         iteration: int) -> tuple[int, ...]:
    """Concretize unknown dims with a placement-independent draw."""
    if shape.is_static:
        return shape.static_dims()
    rng = node_rng(seed, node.node_id, iteration)
    lo, hi = node.dyn_range
    return tuple(int(rng.integers(lo, hi + 1)) if d is None else d for d in shape.dims)


def compute_node(node: Node, arrays: list[np.ndarray], *, seed: int,
                 iteration: int) -> np.ndarray:
    """Evaluate an allocating compute kind; in-place kinds are handled by the executor."""
    kind = node.kind
    if kind in (NodeKind.INPUT, NodeKind.GEN_GRAD):
        shape = node.shape
        dims = resolve_runtime_dims(shape, node, seed, iteration)
        return synthesize_values(dims, node.elem_type, node_rng(seed, node.node_id, iteration))
    if kind is NodeKind.MATMUL:
        return arrays[0] @ arrays[1]
    if kind is NodeKind.ADD:
        return arrays[0] + arrays[1]
    if kind is NodeKind.SIGMOID:
        x = arrays[0]
        return (1.0 / (1.0 + np.exp(-x.astype(np.float64)))).astype(x.dtype)
    if kind is NodeKind.REDUCE_MAX:
        x = arrays[0]
        if x.size == 0:
            return np.zeros(1, dtype=x.dtype)
        return np.max(x).reshape(1)
    if kind is NodeKind.CONCAT_DYN:
        rng = node_rng(seed, node.node_id, iteration)
        lo, hi = node.dyn_range
        dim0 = int(rng.integers(lo, hi + 1))
        stacked = np.concatenate([a.reshape(-1, *a.shape[1:]) for a in arrays], axis=0)
        return np.resize(stacked, (dim0, *stacked.shape[1:]))
    raise errors.GraphError(f"{kind} is not an allocating compute kind")


def apply_in_place(node: Node, target: np.ndarray, arrays: list[np.ndarray]) -> None:
    """Mutate the first input's buffer; the output forwards that buffer."""
    if node.kind is NodeKind.APPLY_GRAD:
        # xor-accumulate: commutative and bit-deterministic for every dtype
        grad = arrays[1]
        if grad.nbytes != target.nbytes:
            raise errors.ShapeMismatch(
                f"gradient is {grad.nbytes} bytes, variable is {target.nbytes}")
        tview = target.reshape(-1).view(np.uint8)
        gview = np.ascontiguousarray(grad).reshape(-1).view(np.uint8)
        tview ^= gview
    elif node.kind is NodeKind.INPLACE_SCALE:
        pass  # identity pass-through; only the buffer forwarding matters
    else:
        raise errors.GraphError(f"{node.kind} is not in-place")


# -- partitioning -----------------------------------------------------------------


@dataclass
class CrossEdge:
    """One producer-to-consumer-server cut of an edge."""

    edge_id: int
    producer_server: int
    consumer_server: int
    send_node: int
    recv_node: int


class PartitionedGraph:
    """A placed graph plus framework-inserted communication node pairs.

    An edge whose consumers live on several servers gets one send/recv pair
    per consumer server; the receive side republishes the original edge id
    on its server. Communication kinds start as the static pair and are
    rewritten by the analyzer once mechanisms are chosen.
    """

    def __init__(self, graph: DataFlowGraph, placement: dict[int, int]):
        self.graph = graph
        self.placement = dict(placement)
        self.comm_nodes: dict[int, Node] = {}
        self.comm_placement: dict[int, int] = {}
        self.cross: list[CrossEdge] = []
        self.servers: list[int] = sorted(set(placement.values()))
        self._server_nodes: dict[int, list[int]] = {s: [] for s in self.servers}

    def node(self, node_id: int) -> Node:
        if node_id in self.comm_nodes:
            return self.comm_nodes[node_id]
        return self.graph.nodes[node_id]

    def server_of(self, node_id: int) -> int:
        if node_id in self.comm_placement:
            return self.comm_placement[node_id]
        return self.placement[node_id]

    def nodes_on(self, server: int) -> list[int]:
        return list(self._server_nodes.get(server, []))

    def consumers_on(self, edge_id: int, server: int) -> list[int]:
        """Consumer node instances of an edge within one server, comm sends included."""
        out = []
        for node_id in self._server_nodes.get(server, []):
            node = self.node(node_id)
            out.extend(node_id for e in node.inputs if e == edge_id)
        return out

    def set_mechanisms(self, kinds: dict[tuple[int, int], tuple[NodeKind, NodeKind]]) -> None:
        """Rewrite each cross pair's node kinds; key is (edge_id, consumer_server)."""
        for ce in self.cross:
            send_kind, recv_kind = kinds[(ce.edge_id, ce.consumer_server)]
            self.comm_nodes[ce.send_node].kind = send_kind
            self.comm_nodes[ce.recv_node].kind = recv_kind


def partition(graph: DataFlowGraph, placement: dict[int, int]) -> PartitionedGraph:
    """Split a placed graph, inserting a send/recv pair per edge cut.

    The pair kinds default to the statically placed pair; the analyzer
    rewrites them after classification.
    """
    for node_id in graph.nodes:
        if node_id not in placement:
            raise errors.InvalidConfig(f"placement missing node {node_id}")
    pg = PartitionedGraph(graph, placement)
    next_comm = graph._next_node
    for server in pg.servers:
        pg._server_nodes[server] = [n for n in sorted(graph.nodes)
                                    if placement[n] == server]
    for edge_id in sorted(graph.edges):
        edge = graph.edges[edge_id]
        producer_server = placement[edge.producer]
        consumer_servers = sorted({placement[c] for c in edge.consumers}
                                  - {producer_server})
        for cs in consumer_servers:
            send = Node(next_comm, NodeKind.RDMA_SEND, (edge_id,), None,
                        exec_mode=ExecMode.SYNC)
            next_comm += 1
            recv = Node(next_comm, NodeKind.RDMA_RECV, (), edge_id,
                        exec_mode=ExecMode.POLLING_ASYNC)
            next_comm += 1
            pg.comm_nodes[send.node_id] = send
            pg.comm_nodes[recv.node_id] = recv
            pg.comm_placement[send.node_id] = producer_server
            pg.comm_placement[recv.node_id] = cs
            pg._server_nodes[producer_server].append(send.node_id)
            pg._server_nodes[cs].append(recv.node_id)
            pg.cross.append(CrossEdge(edge_id, producer_server, cs,
                                      send.node_id, recv.node_id))
    return pg


def in_place_control_deps(node_ids: list[int], node_of, edge_consumers_of
                          ) -> dict[int, list[int]]:
    """Execution-order constraints that make in-place mutation safe.

    For every edge visible in one execution view, each in-place consumer
    must run after every reading consumer, and in-place consumers of the
    same edge run in ascending node-id order. Returns node -> prerequisite
    node ids.
    """
    deps: dict[int, list[int]] = {n: [] for n in node_ids}
    edges = {}
    for n in node_ids:
        node = node_of(n)
        for e in node.inputs:
            edges.setdefault(e, None)
    for e in edges:
        consumers = edge_consumers_of(e)
        writers = sorted({c for c in consumers
                          if node_of(c).kind in IN_PLACE_KINDS and node_of(c).inputs[0] == e})
        if not writers:
            continue
        readers = sorted({c for c in consumers if c not in writers})
        prev = None
        for w in writers:
            deps[w].extend(readers)
            if prev is not None:
                deps[w].append(prev)
            prev = w
    return deps

"""Ready-made graph builders: the transfer microbenchmark, a layered
forward network, and the data-parallel parameter-server training workload.
"""
from __future__ import annotations

from . import errors
from .graph import DataFlowGraph, shape_of
from .wire import ElemType


def build_microbench(tensor_bytes: int, elem_type: ElemType = ElemType.F32
                     ) -> tuple[DataFlowGraph, dict[int, int]]:
    """Two servers, one tensor per iteration, receiver runs a reduction.

    The producer emits a fresh synthetic tensor each mini-batch; the edge
    is fully static so the natural classification is the statically placed
    mechanism.
    """
    if tensor_bytes < elem_type.size:
        raise errors.InvalidConfig(f"tensor_bytes must be >= {elem_type.size}")
    n = tensor_bytes // elem_type.size
    g = DataFlowGraph()
    payload = g.gen_grad(shape_of(n), elem_type)
    g.reduce_max(payload)
    g.freeze()
    producer = g.edges[payload].producer
    placement = {node_id: (0 if node_id == producer else 1) for node_id in g.nodes}
    return g, placement


def build_layered_forward(batch: int = 8, layer_dims: tuple[int, ...] = (16, 12, 10, 4),
                          with_concat: bool = False
                          ) -> tuple[DataFlowGraph, int, list[int]]:
    """Forward pass of a small fully connected network.

    Per layer: x = sigmoid(x @ W + B). Returns the graph, the input edge,
    and the list of edges downstream of the (optional) dynamic concat,
    which is inserted right after the input.
    """
    g = DataFlowGraph()
    x = g.input(shape_of(batch, layer_dims[0]))
    dynamic_cone: list[int] = []
    if with_concat:
        x = g.concat_dyn([x], dyn_range=(1, 2 * batch))
        dynamic_cone.append(x)
    input_edge = x
    for d_in, d_out in zip(layer_dims, layer_dims[1:]):
        w = g.variable(shape_of(d_in, d_out))
        b = g.input(shape_of(batch, d_out))
        h = g.matmul(x, w)
        a = g.add(h, b)
        x = g.sigmoid(a)
        if with_concat:
            dynamic_cone.extend([h, a, x])
    g.freeze()
    return g, input_edge, dynamic_cone


def build_ps_workload(model_size: int, num_variables: int, compute_time: float,
                      workers: int, *, ps_servers: int = 1,
                      elem_type: ElemType = ElemType.F32
                      ) -> tuple[DataFlowGraph, dict[int, int]]:
    """Data-parallel training skeleton over a parameter-server layout.

    The model is divided into equal per-variable slabs (rounded to the
    element size). Variables are placed round-robin across the parameter
    servers; per worker and variable, a gradient generator consumes the
    pulled weight and an update operator folds the pushed gradient into
    the variable buffer in place. Servers ``0..workers-1`` are workers,
    the rest are parameter servers.
    """
    if workers < 1 or ps_servers < 1 or num_variables < 1:
        raise errors.InvalidConfig("workers, ps_servers and num_variables must be >= 1")
    slab_elems = model_size // num_variables // elem_type.size
    if slab_elems < 1:
        raise errors.InvalidConfig(
            f"model of {model_size} bytes cannot be divided into "
            f"{num_variables} variables of whole {elem_type.name} elements")
    per_node_compute = compute_time / num_variables if num_variables else 0.0

    g = DataFlowGraph()
    placement: dict[int, int] = {}
    for v in range(num_variables):
        ps = workers + (v % ps_servers)
        weight = g.variable(shape_of(slab_elems), elem_type)
        placement[g.edges[weight].producer] = ps
        for w in range(workers):
            grad = g.gen_grad(shape_of(slab_elems), elem_type, inputs=(weight,),
                              compute_time=per_node_compute)
            placement[g.edges[grad].producer] = w
            updated = g.apply_grad(weight, grad)
            placement[g.edges[updated].producer] = ps
    g.freeze()
    return g, placement

"""Desk-scale simulation of zero-copy cross-machine tensor transfer.

The package models a dataflow runtime whose cross-server edges move tensor
bytes over a simulated RDMA fabric, either by writing into statically
placed receiver buffers, by shipping fixed-rank metadata and pulling the
payload with a one-sided read, or through an instrumented copy-heavy RPC
baseline. See README.md for the tour and `rdmaflow-bench` for the CLI.
"""

from . import errors
from .fabric import CostModel, Fabric, FaultConfig
from .graph import DataFlowGraph, NodeKind, TensorShape, infer_shapes, partition, shape_of
from .memspace import ArenaAllocator, MemorySpace, RegionHandle
from .runtime import RunReport, Session
from .wire import ElemType, Mechanism

__all__ = [
    "ArenaAllocator",
    "CostModel",
    "DataFlowGraph",
    "ElemType",
    "Fabric",
    "FaultConfig",
    "Mechanism",
    "MemorySpace",
    "NodeKind",
    "RegionHandle",
    "RunReport",
    "Session",
    "TensorShape",
    "errors",
    "infer_shapes",
    "partition",
    "shape_of",
]

__version__ = "0.1.0"

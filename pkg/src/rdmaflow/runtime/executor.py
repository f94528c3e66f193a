"""Per-server operator scheduler.

One executor drives one simulated server through a FIFO ready queue. Three
execution modes: synchronous operators run to completion when popped;
asynchronous completions are scheduled as their own queue entries; and
polling-async operators are polled when popped, going back to the tail of
the queue while pending so other ready work is never blocked. A node is
enqueued once all of its input edges and control prerequisites are
satisfied.

The executor is deliberately generic: nodes are registered as handlers, so
scheduler behavior (fairness, re-enqueue order, watchdog) can be tested
with synthetic operators.
"""
from __future__ import annotations

import threading
import time
from collections import deque
from typing import Callable, Optional

from .. import errors
from ..graph import ExecMode, Tensor


class SharedEpoch:
    """Global progress counter; the deadlock watchdog keys off it."""

    def __init__(self):
        self._n = 0
        self._lock = threading.Lock()

    def bump(self) -> None:
        with self._lock:
            self._n += 1

    def value(self) -> int:
        with self._lock:
            return self._n


class OpHandler:
    """Node behavior plugged into the executor.

    ``mode`` decides scheduling: SYNC handlers implement ``run``;
    POLLING_ASYNC handlers implement ``poll`` (None when pending, any token
    when ready) and ``complete(token)``.
    """

    mode: ExecMode = ExecMode.SYNC

    def begin_iteration(self, iteration: int) -> None:
        pass

    def run(self) -> None:
        raise NotImplementedError

    def poll(self) -> Optional[object]:
        raise NotImplementedError

    def complete(self, token: object) -> None:
        raise NotImplementedError


class FnHandler(OpHandler):
    """Ad-hoc handler from callables; used by scheduler tests."""

    def __init__(self, mode: ExecMode = ExecMode.SYNC,
                 run: Optional[Callable[[], None]] = None,
                 poll: Optional[Callable[[], Optional[object]]] = None,
                 complete: Optional[Callable[[object], None]] = None):
        self.mode = mode
        self._run = run
        self._poll = poll
        self._complete = complete

    def run(self) -> None:
        if self._run is not None:
            self._run()

    def poll(self) -> Optional[object]:
        return None if self._poll is None else self._poll()

    def complete(self, token: object) -> None:
        if self._complete is not None:
            self._complete(token)


_START = "start"
_COMPLETING = "completing"


class Executor:
    """Scheduler and dataflow bookkeeping for one server."""

    def __init__(self, server_id: int, epoch: Optional[SharedEpoch] = None, *,
                 keep_trace: bool = False):
        self.server_id = server_id
        self.epoch = epoch or SharedEpoch()
        self.queue: deque[tuple[int, str, object]] = deque()
        self.handlers: dict[int, OpHandler] = {}
        self.base_pending: dict[int, int] = {}
        self.edge_consumers: dict[int, list[int]] = {}
        self.control_subs: dict[int, list[int]] = {}
        self.on_deliver: Optional[Callable[[int, Tensor], None]] = None
        self.iteration = 0
        self.pending: dict[int, int] = {}
        self.edge_values: dict[int, Tensor] = {}
        self.completed: set[int] = set()
        self.poll_count = 0
        self.steps = 0
        self.trace: Optional[list[tuple[int, int, str]]] = [] if keep_trace else None

    # -- wiring -----------------------------------------------------------------

    def add_node(self, node_id: int, handler: OpHandler, *,
                 input_edges: tuple[int, ...] = (),
                 control_deps: tuple[int, ...] = ()) -> None:
        """Register a node; inputs count per instance, control deps per node."""
        self.handlers[node_id] = handler
        self.base_pending[node_id] = len(input_edges) + len(control_deps)
        for e in input_edges:
            self.edge_consumers.setdefault(e, []).append(node_id)
        for dep in control_deps:
            self.control_subs.setdefault(dep, []).append(node_id)

    # -- iteration driving --------------------------------------------------------

    def begin_iteration(self, iteration: int) -> None:
        self.iteration = iteration
        self.pending = dict(self.base_pending)
        self.edge_values = {}
        self.completed = set()
        self.queue.clear()
        for node_id in sorted(self.handlers):
            self.handlers[node_id].begin_iteration(iteration)
            if self.pending[node_id] == 0:
                self._enqueue(node_id)

    def done(self) -> bool:
        return len(self.completed) == len(self.handlers)

    def _enqueue(self, node_id: int, phase: str = _START, token: object = None) -> None:
        self.queue.append((node_id, phase, token))

    def _record(self, node_id: int, event: str) -> None:
        if self.trace is not None:
            self.trace.append((self.steps, node_id, event))

    def step(self) -> bool:
        """Run one scheduler step; returns True when it made progress."""
        if not self.queue:
            return False
        self.steps += 1
        node_id, phase, token = self.queue.popleft()
        handler = self.handlers[node_id]
        if phase == _COMPLETING:
            handler.complete(token)
            self._record(node_id, "complete")
            self._finish(node_id)
            return True
        if handler.mode is ExecMode.POLLING_ASYNC:
            result = handler.poll()
            self.poll_count += 1
            if result is None:
                self._record(node_id, "poll_pending")
                self._enqueue(node_id)  # back to the tail; do not block others
                return False
            # polling succeeded exactly once: switch to asynchronous completion
            self._record(node_id, "poll_ready")
            self._enqueue(node_id, _COMPLETING, result)
            self.epoch.bump()
            return True
        handler.run()
        self._record(node_id, "run")
        self._finish(node_id)
        return True

    def _finish(self, node_id: int) -> None:
        self.completed.add(node_id)
        self.epoch.bump()
        for sub in self.control_subs.get(node_id, ()):
            self._dec_pending(sub)

    def _dec_pending(self, node_id: int) -> None:
        self.pending[node_id] -= 1
        if self.pending[node_id] == 0:
            self._enqueue(node_id)

    # -- dataflow services used by handlers ----------------------------------------

    def deliver_edge(self, edge_id: int, tensor: Tensor, *,
                     transfer_ownership: bool = True) -> None:
        """Publish an edge value and wake its local consumers.

        With ``transfer_ownership`` the producer's reference is folded into
        the per-consumer references taken here.
        """
        consumers = self.edge_consumers.get(edge_id, [])
        tensor.buffer.retain(len(consumers))
        self.edge_values[edge_id] = tensor
        if self.on_deliver is not None:
            self.on_deliver(edge_id, tensor)
        if transfer_ownership:
            tensor.buffer.release()  # after the hook: this may free the block
        for c in consumers:
            self._dec_pending(c)

    def input_tensors(self, input_edges: tuple[int, ...]) -> list[Tensor]:
        return [self.edge_values[e] for e in input_edges]

    def release_inputs(self, input_edges: tuple[int, ...]) -> None:
        for e in input_edges:
            self.edge_values[e].buffer.release()

    def run_until_done(self, *, watchdog_steps: int = 500_000) -> None:
        """Drive this executor alone until its iteration completes.

        Used by tests, single-server runs, and the threaded session mode;
        progress elsewhere (the shared epoch) resets the watchdog, and
        quiet full rotations back off briefly instead of burning the CPU.
        """
        last_epoch = self.epoch.value()
        idle = 0
        while not self.done():
            progressed = self.step()
            now = self.epoch.value()
            if progressed or now != last_epoch:
                idle = 0
                last_epoch = now
            else:
                idle += 1
                if self.queue and idle % (len(self.queue) + 1) == 0:
                    time.sleep(20e-6)
                if idle > watchdog_steps:
                    raise errors.Deadlock(
                        f"server {self.server_id}: no progress after {idle} steps")


def run_all(executors: list[Executor], epoch: SharedEpoch, *,
            watchdog_sweeps: int = 64) -> None:
    """Deterministically interleave executors, one step each per sweep.

    The fabric delivers synchronously, so if a full sweep of every server
    moves the epoch nowhere the system state can never change again; a few
    quiet sweeps therefore indicate a deadlock.
    """
    quiet_sweeps = 0
    while True:
        if all(ex.done() for ex in executors):
            return
        before = epoch.value()
        for ex in executors:
            if not ex.done():
                ex.step()
        if epoch.value() != before:
            quiet_sweeps = 0
        else:
            quiet_sweeps += 1
            if quiet_sweeps > watchdog_sweeps:
                stuck = [ex.server_id for ex in executors if not ex.done()]
                raise errors.Deadlock(
                    f"no progress across servers {stuck} for {quiet_sweeps} sweeps")

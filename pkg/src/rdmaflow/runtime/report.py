"""Run metrics collected at iteration barriers."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

CSV_COLUMNS = ("scenario", "mechanism", "iteration", "bytes_sent",
               "payload_bytes_copied", "arena_peak_bytes", "simulated_time_us",
               "wall_time_us")


@dataclass
class IterationRow:
    iteration: int
    bytes_sent: int            # wire volume: payloads plus metadata and flags
    payload_bytes: int         # tensor bytes that crossed servers
    payload_bytes_copied: int
    copy_events: int
    serialize_bytes: int
    arena_peak_bytes: int      # max registered-arena peak over servers, run to date
    sim_time_us: float
    wall_time_us: float
    polls: int


@dataclass
class RunReport:
    mechanism: str
    rows: list[IterationRow] = field(default_factory=list)
    #: registered-arena residency at each iteration end, per server
    arena_resident: dict[tuple[int, int], int] = field(default_factory=dict)
    #: residency right after preallocation, per server
    arena_baseline: dict[int, int] = field(default_factory=dict)
    per_server_final: dict[int, dict] = field(default_factory=dict)
    edge_payload_bytes: dict[int, int] = field(default_factory=dict)
    edge_send_count: dict[tuple[int, int], int] = field(default_factory=dict)
    #: (iteration, edge, server) -> value bytes, only with capture enabled
    captured: Optional[dict[tuple[int, int, int], bytes]] = None

    @property
    def iterations(self) -> int:
        return len(self.rows)

    def total(self, attr: str):
        return sum(getattr(r, attr) for r in self.rows)

    def steady_state_sim_us(self) -> float:
        """Per-iteration simulated time once tracing warm-up is over."""
        steady = [r.sim_time_us for r in self.rows if r.iteration >= 2]
        if not steady:
            raise ValueError("need at least two iterations for a steady-state metric")
        return sum(steady) / len(steady)

    def csv_rows(self, scenario: str) -> list[dict]:
        out = []
        for r in self.rows:
            out.append({
                "scenario": scenario,
                "mechanism": self.mechanism,
                "iteration": r.iteration,
                "bytes_sent": r.bytes_sent,
                "payload_bytes_copied": r.payload_bytes_copied,
                "arena_peak_bytes": r.arena_peak_bytes,
                "simulated_time_us": f"{r.sim_time_us:.3f}",
                "wall_time_us": f"{r.wall_time_us:.1f}",
            })
        return out

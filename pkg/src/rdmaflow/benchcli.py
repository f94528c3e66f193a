"""Benchmark harness: builds scenarios, runs them under each communication
mode, and emits per-iteration CSV metrics.

Config files are line-based ``key = value`` text; ``#`` starts a comment.
The emitted CSV always carries the same column set and embeds the fully
resolved configuration as leading comment lines, so runs are reproducible
from the artifact alone. Wall time is reported for orientation only;
comparisons should use simulated time and the byte counters.
"""
from __future__ import annotations

import argparse
import sys
from dataclasses import dataclass, fields, replace
from typing import Optional, TextIO

from . import errors
from .fabric import CostModel
from .runtime.report import CSV_COLUMNS
from .runtime.session import Session
from .workloads import build_microbench, build_ps_workload

MECHANISMS = ("zerocp", "cp", "rpc")

#: benchmark presets: model size (MB), variable count, per-sample compute (ms)
PRESETS = {
    "alexnet": (176.42, 16, 7.61),
    "inception-v3": (92.90, 196, 68.32),
    "vggnet-16": (512.32, 32, 30.92),
    "lstm": (35.93, 14, 33.33),
    "gru": (27.92, 11, 30.44),
    "fcn-5": (204.47, 10, 4.88),
}

DEFAULT_SCALE = 1.0 / 64.0  # shrinks presets to desk scale

MIB = 1024 * 1024


@dataclass
class ScenarioConfig:
    scenario: str = "microbench"
    mechanism: str = "all"
    iterations: int = 0  # 0 = scenario default
    seed: int = 0
    # microbench
    tensor_bytes: int = 0  # 0 = sweep
    sweep_min_bytes: int = 1024
    sweep_max_bytes: int = 64 * MIB
    sweep_factor: int = 4
    # parameter-server training
    preset: str = ""
    model_size_mb: float = 8.0
    num_variables: int = 4
    compute_time_ms: float = 1.0
    workers: int = 2
    ps_servers: int = 1
    scale: float = 1.0
    force_mechanism: str = ""  # '', 'static' or 'dynamic'
    # cost model overrides
    alpha_us: float = 1.0
    beta_ns_per_byte: float = 0.08
    gamma_ns_per_byte: float = 0.05
    # memory sizing (0 = auto)
    capacity_mb: int = 0
    arena_mb: int = 0

    def mechanisms(self) -> list[str]:
        return list(MECHANISMS) if self.mechanism == "all" else [self.mechanism]

    def cost_model(self) -> CostModel:
        return CostModel(alpha_s=self.alpha_us * 1e-6,
                         beta_s_per_byte=self.beta_ns_per_byte * 1e-9,
                         gamma_s_per_byte=self.gamma_ns_per_byte * 1e-9)

    def resolved_items(self) -> list[tuple[str, object]]:
        return [(f.name, getattr(self, f.name)) for f in fields(self)]


_INT_KEYS = {"iterations", "seed", "tensor_bytes", "sweep_min_bytes",
             "sweep_max_bytes", "sweep_factor", "num_variables", "workers",
             "ps_servers", "capacity_mb", "arena_mb"}
_FLOAT_KEYS = {"model_size_mb", "compute_time_ms", "scale", "alpha_us",
               "beta_ns_per_byte", "gamma_ns_per_byte"}
_STR_KEYS = {"scenario", "mechanism", "preset", "force_mechanism"}


def parse_config(text: str) -> ScenarioConfig:
    """Parse ``key = value`` lines into a validated configuration."""
    cfg = ScenarioConfig()
    explicit_scale = False
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise errors.BadValue(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key in _INT_KEYS:
            try:
                setattr(cfg, key, int(value))
            except ValueError:
                raise errors.BadValue(f"line {lineno}: {key} needs an integer") from None
        elif key in _FLOAT_KEYS:
            try:
                setattr(cfg, key, float(value))
            except ValueError:
                raise errors.BadValue(f"line {lineno}: {key} needs a number") from None
            if key == "scale":
                explicit_scale = True
        elif key in _STR_KEYS:
            setattr(cfg, key, value)
        else:
            raise errors.UnknownKey(f"line {lineno}: unknown key {key!r}")
    if cfg.preset:
        name = cfg.preset.lower().replace("_", "-")
        if name not in PRESETS:
            raise errors.BadValue(
                f"unknown preset {cfg.preset!r}; choices: {sorted(PRESETS)}")
        cfg.preset = name
        cfg.model_size_mb, cfg.num_variables, cfg.compute_time_ms = PRESETS[name]
        if not explicit_scale:
            cfg.scale = DEFAULT_SCALE
        cfg.scenario = "ps_train"
    _validate(cfg)
    return cfg


def _validate(cfg: ScenarioConfig) -> None:
    if cfg.scenario not in ("microbench", "ps_train"):
        raise errors.BadValue(f"unknown scenario {cfg.scenario!r}")
    if cfg.mechanism not in MECHANISMS + ("all",):
        raise errors.BadValue(f"unknown mechanism {cfg.mechanism!r}")
    if not 0.0 < cfg.scale <= 1.0:
        raise errors.BadValue(f"scale must be in (0, 1], got {cfg.scale}")
    if cfg.iterations < 0:
        raise errors.BadValue("iterations must be >= 0")
    for key in ("tensor_bytes", "sweep_min_bytes", "sweep_max_bytes"):
        if getattr(cfg, key) < 0:
            raise errors.BadValue(f"{key} must be positive")
    if cfg.sweep_factor < 2:
        raise errors.BadValue("sweep_factor must be >= 2")
    if cfg.model_size_mb <= 0:
        raise errors.BadValue("model_size_mb must be positive")
    if cfg.num_variables < 1 or cfg.workers < 1 or cfg.ps_servers < 1:
        raise errors.BadValue("num_variables, workers and ps_servers must be >= 1")
    if cfg.force_mechanism not in ("", "static", "dynamic"):
        raise errors.BadValue(f"force_mechanism must be static or dynamic")


@dataclass
class MicrobenchSummary:
    mechanism: str
    tensor_bytes: int
    steady_sim_us: float
    throughput_mb_s: float
    payload_bytes_copied: int
    copy_events: int


def _memory_for(tensor_bytes: int, cfg: ScenarioConfig) -> tuple[int, int]:
    if cfg.capacity_mb and cfg.arena_mb:
        return cfg.capacity_mb * MIB, cfg.arena_mb * MIB
    arena = max(16 * MIB, 4 * tensor_bytes + MIB)
    capacity = arena + max(16 * MIB, 2 * tensor_bytes + MIB)
    if cfg.arena_mb:
        arena = cfg.arena_mb * MIB
    if cfg.capacity_mb:
        capacity = cfg.capacity_mb * MIB
    return capacity, arena


def sweep_sizes(cfg: ScenarioConfig) -> list[int]:
    if cfg.tensor_bytes:
        return [cfg.tensor_bytes]
    sizes = []
    size = cfg.sweep_min_bytes
    while size <= cfg.sweep_max_bytes:
        sizes.append(size)
        size *= cfg.sweep_factor
    return sizes


def run_microbench(cfg: ScenarioConfig, *, dump_plan: bool = False
                   ) -> tuple[list[dict], list[MicrobenchSummary]]:
    """Two-server transfer sweep; per-iteration CSV rows plus one summary
    per (mechanism, size) with steady-state simulated time and throughput.
    """
    iterations = cfg.iterations or 3
    if iterations < 2:
        raise errors.BadValue("microbench needs iterations >= 2 for steady state")
    rows: list[dict] = []
    summaries: list[MicrobenchSummary] = []
    for size in sweep_sizes(cfg):
        graph, placement = build_microbench(size)
        capacity, arena = _memory_for(size, cfg)
        for mechanism in cfg.mechanisms():
            session = Session(graph, placement, mode=mechanism, seed=cfg.seed,
                              cost_model=cfg.cost_model(),
                              capacity_bytes=capacity, arena_bytes=arena,
                              mechanism_override=cfg.force_mechanism or None)
            if dump_plan:
                print(f"# plan for microbench_{size} [{mechanism}]")
                print(session.dump_plan())
            report = session.run(iterations)
            session.close()
            scenario = f"microbench_{size}"
            rows.extend(report.csv_rows(scenario))
            steady = report.steady_state_sim_us()
            summaries.append(MicrobenchSummary(
                mechanism=mechanism,
                tensor_bytes=size,
                steady_sim_us=steady,
                throughput_mb_s=(size / 1e6) / (steady / 1e6),
                payload_bytes_copied=report.total("payload_bytes_copied"),
                copy_events=report.total("copy_events"),
            ))
    return rows, summaries


def run_ps(cfg: ScenarioConfig, *, dump_plan: bool = False) -> list[dict]:
    """Parameter-server training scenario; per-iteration CSV rows."""
    iterations = cfg.iterations or 10
    model_bytes = int(cfg.model_size_mb * 1e6 * cfg.scale)
    graph, placement = build_ps_workload(model_bytes, cfg.num_variables,
                                         cfg.compute_time_ms * 1e-3, cfg.workers,
                                         ps_servers=cfg.ps_servers)
    slab = model_bytes // cfg.num_variables
    capacity, arena = _memory_for(max(slab * cfg.workers * 4, MIB), cfg)
    rows: list[dict] = []
    scenario = cfg.preset or "ps_train"
    for mechanism in cfg.mechanisms():
        session = Session(graph, placement, mode=mechanism, seed=cfg.seed,
                          cost_model=cfg.cost_model(),
                          capacity_bytes=capacity, arena_bytes=arena,
                          mechanism_override=cfg.force_mechanism or None)
        if dump_plan:
            print(f"# plan for {scenario} [{mechanism}]")
            print(session.dump_plan())
        report = session.run(iterations)
        session.close()
        rows.extend(report.csv_rows(scenario))
    return rows


def write_csv(stream: TextIO, rows: list[dict], cfg: ScenarioConfig) -> None:
    for key, value in cfg.resolved_items():
        stream.write(f"# {key} = {value}\n")
    stream.write(",".join(CSV_COLUMNS) + "\n")
    for row in rows:
        stream.write(",".join(str(row[c]) for c in CSV_COLUMNS) + "\n")


def _print_summaries(summaries: list[MicrobenchSummary]) -> None:
    print(f"{'mechanism':<8} {'bytes':>12} {'sim_us/iter':>14} "
          f"{'MB/s':>12} {'copied':>14} {'copies':>7}")
    for s in summaries:
        print(f"{s.mechanism:<8} {s.tensor_bytes:>12} {s.steady_sim_us:>14.3f} "
              f"{s.throughput_mb_s:>12.1f} {s.payload_bytes_copied:>14} "
              f"{s.copy_events:>7}")


def main(argv: Optional[list[str]] = None) -> int:
    parser = argparse.ArgumentParser(
        prog="rdmaflow-bench",
        description="Run transfer benchmarks over the simulated fabric.")
    parser.add_argument("--config", help="path to a key = value config file")
    parser.add_argument("--mechanism", choices=MECHANISMS + ("all",),
                        help="override the configured mechanism set")
    parser.add_argument("--csv", help="write per-iteration metrics to this file")
    parser.add_argument("--seed", type=int, help="override the configured seed")
    parser.add_argument("--dump-plan", action="store_true",
                        help="print the transfer plan before running")
    args = parser.parse_args(argv)

    try:
        if args.config:
            with open(args.config) as fh:
                cfg = parse_config(fh.read())
        else:
            cfg = ScenarioConfig()
        if args.mechanism:
            cfg = replace(cfg, mechanism=args.mechanism)
        if args.seed is not None:
            cfg = replace(cfg, seed=args.seed)
        _validate(cfg)
    except errors.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2

    try:
        if cfg.scenario == "microbench":
            rows, summaries = run_microbench(cfg, dump_plan=args.dump_plan)
            _print_summaries(summaries)
        else:
            rows = run_ps(cfg, dump_plan=args.dump_plan)
            print(f"{cfg.scenario}: {len(rows)} iteration rows")
    except errors.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except errors.RdmaFlowError as exc:
        print(f"protocol error: {exc}", file=sys.stderr)
        return 3

    if args.csv:
        with open(args.csv, "w") as fh:
            write_csv(fh, rows, cfg)
        print(f"wrote {len(rows)} rows to {args.csv}")
    return 0


if __name__ == "__main__":
    sys.exit(main())

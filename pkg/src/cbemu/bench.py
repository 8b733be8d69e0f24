"""Benchmark harness: Cluster-only, Booster-only and Cluster-Booster runs.

Runs are deterministic, so one run per (mode, node count) suffices.  The
results come out as a CSV plus plot-ready runtime and efficiency tables with
one column per mode.
"""

from __future__ import annotations

import csv
import io
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

from . import mprt
from .ckpt import CheckpointAgent, CheckpointLevel, CheckpointStore
from .modsched import JobRequest, ModuleScheduler, SchedulerError
from .platform import NodeKind, PlatformConfig
from .xpic.app import (
    ROLE_BOOSTER,
    ROLE_MONOLITHIC,
    StepRecord,
    StepTrace,
    merge_split_records,
)
from .xpic.state import SimParams

MODES = ("cluster", "booster", "cb")
CSV_COLUMNS = ["mode", "nodes", "total_us", "field_us", "particle_us",
               "exchange_us", "speedup", "efficiency"]
CB_PAIRING = "1:1 Cluster:Booster nodes per data point"


class BenchError(RuntimeError):
    pass


@dataclass(frozen=True)
class CheckpointPlan:
    level: CheckpointLevel
    interval: float  # virtual seconds
    root: str


@dataclass(frozen=True)
class Scenario:
    mode: str
    nodes: int
    params: SimParams
    checkpoint: CheckpointPlan | None = None

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.nodes < 1:
            raise ValueError("nodes must be >= 1")
        if self.params.cells_y < self.nodes:
            raise ValueError("fewer grid rows than ranks")

    def request(self, job_id: str) -> JobRequest:
        n = self.nodes
        cn = n if self.mode in ("cluster", "cb") else 0
        bn = n if self.mode in ("booster", "cb") else 0
        return JobRequest(job_id, cn, bn)


@dataclass
class RunReport:
    scenario: Scenario
    total: float
    field: float
    particle: float
    exchange: float
    # compute-only part of the solver segments
    field_compute: float
    particle_compute: float
    trace: StepTrace
    final_kinetic: float
    final_field_energy: float
    digests: dict = field(default_factory=dict)
    trace_lines: list[str] = field(default_factory=list)
    checkpoint_epochs: list[int] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)


def bench_params(nodes: int, cells_per_node: int = 4096, particles_per_cell: int = 16,
                 steps: int = 10, seed: int = 0, **extra) -> SimParams:
    """Weak-scaling problem: one square tile of ``cells_per_node`` cells per node,
    stacked along y, with the same particle loading replicated in every tile."""
    side = math.isqrt(cells_per_node)
    if side * side != cells_per_node:
        raise ValueError("cells_per_node must be a perfect square")
    return SimParams(cells_x=side, cells_y=side * nodes, particles_per_cell=particles_per_cell,
                     steps=steps, seed=seed, tile_rows=side, **extra)


def _agent(plan: CheckpointPlan | None, sub: str, n: int) -> CheckpointAgent | None:
    if plan is None:
        return None
    store = CheckpointStore(os.path.join(plan.root, sub), list(range(n)))
    return CheckpointAgent(store, plan.level, plan.interval)


def run_scenario(s: Scenario, cfg: PlatformConfig, trace: bool = False) -> RunReport:
    """Allocate nodes, run the scenario to completion and summarize its virtual times."""
    sched = ModuleScheduler(cfg)
    job = f"{s.mode}-{s.nodes}"
    try:
        sched.submit(s.request(job))
    except SchedulerError as exc:
        raise BenchError(f"allocation failed: {exc}") from exc
    granted = sched.try_allocate()
    if not granted:
        raise BenchError(f"allocation failed: {job} cannot be placed")
    alloc = granted[0][1]
    rt = mprt.Runtime(cfg, trace=trace)
    agents: list[CheckpointAgent] = []
    try:
        if s.mode == "cb":
            pa = _agent(s.checkpoint, "booster", s.nodes)
            fa = _agent(s.checkpoint, "cluster", s.nodes)
            agents = [a for a in (pa, fa) if a is not None]
            rt.init_world(ROLE_BOOSTER, s.nodes, NodeKind.BOOSTER, alloc,
                          s.params, s.nodes, alloc, pa, fa)
            results = rt.run()
            booster, cluster = results[0], results[1]
            end_b = max(r["clock"] for r in booster)
            end_c = max(r["clock"] for r in cluster)
            records = merge_split_records(booster[0]["records"], cluster[0]["records"],
                                          max(0.0, end_c - end_b))
            total = max(end_b, end_c)
            digests = {"particles": [r["digests"]["particles"] for r in booster],
                       "fields": [r["digests"]["fields"] for r in cluster]}
        else:
            kind = NodeKind.CLUSTER if s.mode == "cluster" else NodeKind.BOOSTER
            agent = _agent(s.checkpoint, s.mode, s.nodes)
            agents = [agent] if agent is not None else []
            rt.init_world(ROLE_MONOLITHIC, s.nodes, kind, alloc, s.params, agent)
            ranks = rt.run()[0]
            records = [_copy(r) for r in ranks[0]["records"]]
            total = max(r["clock"] for r in ranks)
            # a rank finishing after rank 0 shows up as exchange time on the last step
            records[-1].t_exchange += total - ranks[0]["clock"]
            digests = {"particles": [r["digests"]["particles"] for r in ranks],
                       "fields": [r["digests"]["fields"] for r in ranks]}
    finally:
        sched.release(alloc)
    st = StepTrace(records)
    fld = sum(r.t_field for r in records)
    pcl = sum(r.t_particle for r in records)
    return RunReport(
        scenario=s, total=total, field=fld, particle=pcl,
        exchange=sum(r.t_exchange for r in records),
        field_compute=sum(r.w_field for r in records),
        particle_compute=sum(r.w_particle for r in records),
        trace=st,
        final_kinetic=records[-1].kinetic,
        final_field_energy=records[-1].field_energy,
        digests=digests,
        trace_lines=rt.trace_lines() if trace else [],
        checkpoint_epochs=sorted({e for a in agents for e in a.epochs}),
        metadata={"cb_pairing": CB_PAIRING} if s.mode == "cb" else {},
    )


def _copy(r: StepRecord) -> StepRecord:
    return StepRecord(**vars(r))


@dataclass(frozen=True)
class ScaleRow:
    mode: str
    nodes: int
    total: float
    field: float
    particle: float
    exchange: float
    speedup: float
    efficiency: float


def weak_scaling(modes, node_counts: list[int], cfg: PlatformConfig,
                 cells_per_node: int = 4096, particles_per_cell: int = 16,
                 steps: int = 10, seed: int = 0,
                 reports: dict | None = None) -> list[ScaleRow]:
    """Weak-scaling table; efficiency ``T_1 / T_N``, speedup ``N T_1 / T_N``.

    Speedup counts work done per unit time relative to the same mode on one
    node, so that efficiency = speedup / N.  Pass a dict as ``reports`` to
    collect the underlying :class:`RunReport` objects keyed by (mode, nodes).
    """
    counts = list(node_counts)
    if not counts or counts[0] != 1 or counts != sorted(set(counts)):
        raise ValueError("node counts must be ascending and start at 1")
    rows = []
    for mode in modes:
        base = None
        for n in counts:
            p = bench_params(n, cells_per_node, particles_per_cell, steps, seed)
            rep = run_scenario(Scenario(mode, n, p), cfg)
            if reports is not None:
                reports[(mode, n)] = rep
            if base is None:
                base = rep.total
            eff = base / rep.total if rep.total > 0 else 1.0
            rows.append(ScaleRow(mode, n, rep.total, rep.field, rep.particle, rep.exchange,
                                 eff * n, eff))
    return rows


def speedup_table(reports: list[RunReport]) -> dict[str, float]:
    """Cluster-only and Booster-only totals over C+B, plus per-solver ratios.

    Per-solver ratios compare the pure compute part of each segment:
    ``field_booster_over_cluster`` and ``particle_cluster_over_booster``.
    """
    by_mode: dict[str, RunReport] = {}
    for r in reports:
        if r.scenario.mode in by_mode:
            raise ValueError(f"two reports for mode {r.scenario.mode!r}")
        by_mode[r.scenario.mode] = r
    params = {r.scenario.params for r in reports}
    if len(params) > 1:
        raise ValueError("reports must share params")
    out: dict[str, float] = {}

    def ratio(a: float, b: float) -> float:
        return 1.0 if a == b else a / b

    cb, c, b = by_mode.get("cb"), by_mode.get("cluster"), by_mode.get("booster")
    if c and cb:
        out["cluster/cb"] = ratio(c.total, cb.total)
    if b and cb:
        out["booster/cb"] = ratio(b.total, cb.total)
    if c and b:
        out["field_booster_over_cluster"] = ratio(b.field_compute, c.field_compute)
        out["particle_cluster_over_booster"] = ratio(c.particle_compute, b.particle_compute)
    if cb:
        out["exchange_share_field"] = _share(cb, "field")
        out["exchange_share_particle"] = _share(cb, "particle")
    return out


def _share(r: RunReport, solver: str) -> float:
    """Exchange cost charged to one solver relative to that solver's segment time."""
    recs = [x for x in r.trace.records if x.step > 0]
    if solver == "field":
        seg, x = sum(x.t_field for x in recs), sum(x.x_field for x in recs)
    else:
        seg, x = sum(x.t_particle for x in recs), sum(x.x_particle for x in recs)
    return x / seg if seg > 0 else 0.0


def rows_to_csv(rows: list[ScaleRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in rows:
        w.writerow([r.mode, r.nodes, f"{r.total * 1e6:.6f}", f"{r.field * 1e6:.6f}",
                    f"{r.particle * 1e6:.6f}", f"{r.exchange * 1e6:.6f}",
                    f"{r.speedup:.6f}", f"{r.efficiency:.6f}"])
    return buf.getvalue()


def _plot_table(rows: list[ScaleRow], value) -> str:
    modes = [m for m in MODES if any(r.mode == m for r in rows)]
    counts = sorted({r.nodes for r in rows})
    cell = {(r.mode, r.nodes): r for r in rows}
    lines = ["# nodes " + " ".join(modes)]
    for n in counts:
        vals = [f"{value(cell[(m, n)]):.6f}" if (m, n) in cell else "nan" for m in modes]
        lines.append(" ".join([str(n)] + vals))
    return "\n".join(lines) + "\n"


def emit_results(rows: list[ScaleRow], path: str | os.PathLike) -> list[Path]:
    """Write ``results.csv``, ``runtime.dat`` and ``efficiency.dat`` under ``path``."""
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    files = {
        "results.csv": rows_to_csv(rows),
        "runtime.dat": _plot_table(rows, lambda r: r.total * 1e6),
        "efficiency.dat": _plot_table(rows, lambda r: r.efficiency),
    }
    written = []
    for name, text in files.items():
        p = out / name
        p.write_text(text)
        written.append(p)
    return written

"""xPic-mini main loops: monolithic, and split into Cluster and Booster roles.

The split follows the original code's launch order: the Booster world starts
first and spawns the Cluster world.  Per step the Booster moves particles,
gathers moments and ships them to the Cluster, which solves for the field and
ships E back.  Energy diagnostics and the output snapshot are issued while the
non-blocking exchange is in flight, so in split mode they overlap with the
partner module's work.
"""

from __future__ import annotations

import hashlib
import io
import csv
from dataclasses import dataclass, field

import numpy as np

from ..mprt import InterComm, RankContext, RequestHandle, register_role
from ..platform import NodeKind, Solver, comm_cost
from .fields import allsum, field_energy_local, fld_calculateB, fld_calculateE
from .interface import cpy_from_arr, cpy_to_arr, merge_blocks
from .particles import kinetic_energy_local, pcl_gather_moments, pcl_move
from .state import FieldGrid, Moments, ParticleSet, SimParams, block_overlaps, load_rows, row_blocks

TAG_GATHER_PARTICLES = 21
TAG_GATHER_FIELDS = 22
TAG_MOMENTS = 31
TAG_FIELDS = 32

ROLE_MONOLITHIC = "xpic.monolithic"
ROLE_CLUSTER = "xpic.cluster"
ROLE_BOOSTER = "xpic.booster"

CSV_COLUMNS = ["step", "kinetic", "field_energy", "cg_iters",
               "t_field_us", "t_particle_us", "t_exchange_us"]


@dataclass
class StepRecord:
    step: int
    kinetic: float = 0.0
    field_energy: float = 0.0
    cg_iters: int = 0
    t_field: float = 0.0
    t_particle: float = 0.0
    t_exchange: float = 0.0
    residual: float = 0.0
    cg_checks: int = 0
    charge_error: float = 0.0
    # split mode only: exchange time attributable to each solver
    x_field: float = 0.0
    x_particle: float = 0.0
    # pure compute seconds inside each solver segment
    w_field: float = 0.0
    w_particle: float = 0.0


@dataclass
class StepTrace:
    records: list[StepRecord] = field(default_factory=list)

    def total(self) -> float:
        return sum(r.t_field + r.t_particle + r.t_exchange for r in self.records)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in self.records:
            w.writerow([r.step, repr(r.kinetic), repr(r.field_energy), r.cg_iters,
                        f"{r.t_field * 1e6:.6f}", f"{r.t_particle * 1e6:.6f}",
                        f"{r.t_exchange * 1e6:.6f}"])
        return buf.getvalue()


def _digest(*arrays: np.ndarray) -> str:
    h = hashlib.sha256()
    for a in arrays:
        h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()


def compute_energies(p: ParticleSet, g: FieldGrid, comm, params: SimParams) -> tuple[float, float]:
    """Global kinetic and field energy (each an allreduce-sum over ``comm``)."""
    return (allsum(comm, kinetic_energy_local(p)),
            allsum(comm, field_energy_local(g, params)))


def gather_to_root(comm, payload: bytes, tag: int) -> list[bytes] | None:
    """Blocking gather to rank 0; the root receives in rank order."""
    if comm.size == 1:
        return [payload]
    if comm.rank == 0:
        return [payload] + [comm.recv(i, tag) for i in range(1, comm.size)]
    comm.send(0, tag, payload)
    return None


class ParticleSide:
    """Particle-solver state of one rank."""

    def __init__(self, ctx: RankContext, comm, params: SimParams):
        self.ctx, self.comm, self.params = ctx, comm, params
        self.r0, self.r1 = row_blocks(params.cells_y, comm.size)[comm.rank]
        self.particles = load_rows(params, self.r0, self.r1)
        self.e_block = FieldGrid.zeros(self.r1 - self.r0, params.cells_x, params.b0, self.r0)
        self.total_charge = params.particle_charge * (
            params.particles_per_cell * params.cells_x * params.cells_y
        )
        self.charge_error = 0.0
        self.moments: Moments | None = None

    def advance(self) -> Moments:
        """Move particles in the current field and return this rank's moment block."""
        p = self.params
        blocks = self.comm.allgather(cpy_to_arr(self.e_block))
        full = merge_blocks([cpy_from_arr(b) for b in blocks], 0, p.cells_y)
        work = self.ctx.cfg.workload.particle_work_per_particle * len(self.particles)
        self.ctx.compute(work, Solver.PARTICLE)
        self.particles = pcl_move(self.particles, full.ex, full.ey, full.b, p)
        mom = pcl_gather_moments(self.particles, p)
        if self.comm.size > 1:
            stacked = np.concatenate([mom.rho[None], mom.j]).ravel()
            summed = self.comm.allreduce("sum", stacked).reshape(4, p.cells_y, p.cells_x)
            mom = Moments(summed[0], summed[1:], 0)
        self.charge_error = float(abs(mom.rho.sum() * p.cell_area - self.total_charge)
                                  / abs(self.total_charge))
        self.moments = mom
        return mom.block(self.r0, self.r1)

    def diagnostics(self) -> float:
        kinetic = allsum(self.comm, kinetic_energy_local(self.particles))
        ps = self.particles
        gather_to_root(self.comm, ps.x.tobytes() + ps.v.tobytes(), TAG_GATHER_PARTICLES)
        return kinetic

    def digest(self) -> str:
        return _digest(self.particles.x, self.particles.v)

    def image(self) -> bytes:
        """Restart image: positions then velocities, float64 little-endian."""
        return self.particles.x.astype("<f8").tobytes() + self.particles.v.astype("<f8").tobytes()


class FieldSide:
    """Field-solver state of one rank."""

    def __init__(self, ctx: RankContext, comm, params: SimParams):
        self.ctx, self.comm, self.params = ctx, comm, params
        self.r0, self.r1 = row_blocks(params.cells_y, comm.size)[comm.rank]
        self.grid = FieldGrid.zeros(self.r1 - self.r0, params.cells_x, params.b0, self.r0)
        self.moments: Moments | None = None

    def solve(self, mom: Moments) -> FieldGrid:
        self.moments = mom
        self.grid = fld_calculateB(fld_calculateE(self.grid, mom, self.comm, self.params, self.ctx))
        return self.grid

    def diagnostics(self) -> float:
        energy = allsum(self.comm, field_energy_local(self.grid, self.params))
        g = self.grid
        snapshot = b"".join(a.tobytes() for a in (g.phi, g.ex, g.ey, self.moments.rho))
        gather_to_root(self.comm, snapshot, TAG_GATHER_FIELDS)
        return energy

    def image(self) -> bytes:
        """Restart image: the potential block (the CG warm start)."""
        return self.grid.phi.astype("<f8").tobytes()

    def digest(self) -> str:
        g = self.grid
        return _digest(g.phi, g.ex, g.ey, self.moments.rho, self.moments.j)


def _result(ctx, records, particle=None, fieldside=None, digests=None) -> dict:
    out = {"records": records, "clock": ctx.clock, "digests": digests or {}}
    if particle is not None:
        out["particles"] = (particle.particles.x.copy(), particle.particles.v.copy())
    if fieldside is not None:
        g = fieldside.grid
        out["grid"] = (g.phi.copy(), g.ex.copy(), g.ey.copy())
        if fieldside.moments is not None:
            out["rho"] = fieldside.moments.rho.copy()
    return out


@register_role(ROLE_MONOLITHIC)
def run_monolithic(ctx: RankContext, params: SimParams, ckpt=None) -> dict:
    """Both solvers on one world, one after the other each step.

    ``ckpt`` is an optional :class:`~cbemu.ckpt.CheckpointAgent` for this world.
    """
    comm = ctx.world
    ps = ParticleSide(ctx, comm, params)
    fs = FieldSide(ctx, comm, params)
    digests = {"particles": [], "fields": []}
    t = ctx.clock
    records = [StepRecord(0, kinetic=allsum(comm, kinetic_energy_local(ps.particles)),
                          t_particle=ctx.clock - t)]
    for step in range(1, params.steps + 1):
        t0 = ctx.clock
        b0 = dict(ctx.busy)
        mom = ps.advance()
        kinetic = ps.diagnostics()
        t1 = ctx.clock
        grid = fs.solve(mom)
        # E is handed to the particle side of the same rank without a transfer
        ps.e_block = FieldGrid(grid.phi, grid.ex, grid.ey, grid.b, grid.row0)
        energy = fs.diagnostics()
        t2 = ctx.clock
        records.append(StepRecord(step, kinetic, energy, grid.cg_iters, t2 - t1, t1 - t0,
                                  residual=grid.residual, cg_checks=grid.cg_checks,
                                  charge_error=ps.charge_error,
                                  w_field=ctx.busy[Solver.FIELD] - b0[Solver.FIELD],
                                  w_particle=ctx.busy[Solver.PARTICLE] - b0[Solver.PARTICLE]))
        digests["particles"].append(ps.digest())
        digests["fields"].append(fs.digest())
        if ckpt is not None:
            ckpt.step_end(comm.rank, step, ctx.clock, lambda: ps.image() + fs.image())
    return _result(ctx, records, ps, fs, digests)


def _exchange_out(ctx: RankContext, inter: InterComm, pieces, block, tag: int,
                  segment: float) -> tuple[list[RequestHandle], float]:
    """Charge the exchange surcharge and post the non-blocking sends.

    The modeled cost of handing one step's data to the other module is
    ``comm_overhead_fraction`` of the solver segment that produced it; the wire
    time of the largest piece is part of that cost, never less than it.
    """
    bufs = [(dst, cpy_to_arr(block, (lo, hi))) for dst, lo, hi in pieces]
    remote_kind = inter.remote_group.members[0].node_kind
    wire = max((comm_cost(len(b), ctx.kind, remote_kind, ctx.cfg) for _, b in bufs), default=0.0)
    surcharge = max(0.0, ctx.cfg.comm_overhead_fraction * segment - wire)
    ctx.charge(surcharge, "exchange_surcharge")
    handles = [inter.isend(dst, tag, b) for dst, b in bufs]
    return handles, surcharge + wire


def booster_to_cluster(ctx, inter, moments: Moments, pieces, segment):
    return _exchange_out(ctx, inter, pieces, moments, TAG_MOMENTS, segment)


def cluster_to_booster(ctx, inter, grid: FieldGrid, pieces, segment):
    return _exchange_out(ctx, inter, pieces, grid, TAG_FIELDS, segment)


def _incoming(ny: int, n_remote: int, n_local: int, rank: int) -> list[tuple[int, int, int]]:
    plan = block_overlaps(ny, n_remote, n_local)
    return [(src, lo, hi) for src, pieces in plan.items() for dst, lo, hi in pieces if dst == rank]


@register_role(ROLE_BOOSTER)
def run_booster_role(ctx: RankContext, params: SimParams, n_cluster: int, alloc,
                     ckpt=None, cluster_ckpt=None) -> dict:
    """Particle solver; spawns the Cluster role that runs the field solver."""
    comm = ctx.world
    inter = comm.spawn(ROLE_CLUSTER, n_cluster, NodeKind.CLUSTER, alloc,
                       args=(params, cluster_ckpt))
    ny = params.cells_y
    ps = ParticleSide(ctx, comm, params)
    out_pieces = block_overlaps(ny, comm.size, n_cluster)[comm.rank]
    in_pieces = _incoming(ny, n_cluster, comm.size, comm.rank)
    digests = {"particles": []}
    t = ctx.clock
    records = [StepRecord(0, kinetic=allsum(comm, kinetic_energy_local(ps.particles)),
                          t_particle=ctx.clock - t)]
    for step in range(1, params.steps + 1):
        t0 = ctx.clock
        w0 = ctx.busy[Solver.PARTICLE]
        mom = ps.advance()
        t1 = ctx.clock
        sends, x_particle = booster_to_cluster(ctx, inter, mom, out_pieces, t1 - t0)
        recvs = [inter.irecv(src, TAG_FIELDS) for src, _, _ in in_pieces]
        kinetic = ps.diagnostics()
        payloads = inter.wait_all(sends + recvs)[len(sends):]
        ps.e_block = merge_blocks([cpy_from_arr(b) for b in payloads], ps.r0, ps.r1)
        records.append(StepRecord(step, kinetic, t_particle=t1 - t0,
                                  t_exchange=ctx.clock - t0, x_particle=x_particle,
                                  charge_error=ps.charge_error,
                                  w_particle=ctx.busy[Solver.PARTICLE] - w0))
        digests["particles"].append(ps.digest())
        if ckpt is not None:
            ckpt.step_end(comm.rank, step, ctx.clock, ps.image)
    return _result(ctx, records, ps, None, digests)


@register_role(ROLE_CLUSTER)
def run_cluster_role(ctx: RankContext, params: SimParams, ckpt=None) -> dict:
    """Field solver, driven by moments arriving from the Booster."""
    comm = ctx.world
    inter = ctx.get_parent()
    if inter is None:
        raise RuntimeError("xpic.cluster must be spawned by xpic.booster")
    ny = params.cells_y
    fs = FieldSide(ctx, comm, params)
    in_pieces = _incoming(ny, inter.remote_size, comm.size, comm.rank)
    out_pieces = block_overlaps(ny, comm.size, inter.remote_size)[comm.rank]
    digests = {"fields": []}
    records = [StepRecord(0)]
    pending: list[RequestHandle] = []
    for step in range(1, params.steps + 1):
        recvs = [inter.irecv(src, TAG_MOMENTS) for src, _, _ in in_pieces]
        payloads = inter.wait_all(pending + recvs)[len(pending):]
        mom = merge_blocks([cpy_from_arr(b) for b in payloads], fs.r0, fs.r1)
        c0 = ctx.clock
        w0 = ctx.busy[Solver.FIELD]
        grid = fs.solve(mom)
        c1 = ctx.clock
        pending, x_field = cluster_to_booster(ctx, inter, grid, out_pieces, c1 - c0)
        energy = fs.diagnostics()
        records.append(StepRecord(step, field_energy=energy, cg_iters=grid.cg_iters,
                                  t_field=c1 - c0, residual=grid.residual,
                                  cg_checks=grid.cg_checks, x_field=x_field,
                                  w_field=ctx.busy[Solver.FIELD] - w0))
        digests["fields"].append(fs.digest())
        if ckpt is not None:
            ckpt.step_end(comm.rank, step, ctx.clock, fs.image)
    inter.wait_all(pending)
    return _result(ctx, records, None, fs, digests)


def merge_split_records(booster: list[StepRecord], cluster: list[StepRecord],
                        overhang: float = 0.0) -> list[StepRecord]:
    """Combine rank-0 records of both roles into one per-step trace.

    Booster ``t_exchange`` arrives holding the whole step duration; the
    exchange column becomes what remains after both solver segments.
    ``overhang`` (Cluster finishing after the Booster) lands on the last step.
    """
    merged = []
    for b, c in zip(booster, cluster):
        step_time = b.t_exchange if b.step > 0 else b.t_particle
        rec = StepRecord(
            b.step, b.kinetic, c.field_energy, c.cg_iters,
            t_field=c.t_field, t_particle=b.t_particle,
            t_exchange=step_time - b.t_particle - c.t_field if b.step > 0 else 0.0,
            residual=c.residual, cg_checks=c.cg_checks,
            charge_error=b.charge_error,
            x_field=c.x_field, x_particle=b.x_particle,
            w_field=c.w_field, w_particle=b.w_particle,
        )
        merged.append(rec)
    if merged:
        merged[-1].t_exchange += overhang
    return merged

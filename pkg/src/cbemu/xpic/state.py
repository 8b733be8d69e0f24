"""Simulation parameters, PIC state containers and initial loading."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class SimParams:
    cells_x: int = 64
    cells_y: int = 64
    cell_size: float = 1.0
    dt: float = 0.1
    particles_per_cell: int = 16
    steps: int = 10
    seed: int = 0
    b0: tuple[float, float, float] = (0.0, 0.0, 0.0)
    solver_tol: float = 1e-10
    solver_max_iters: int = 5000
    # normalized units: unit mean density, macro-particle charge-to-mass ratio qm
    qm: float = -1.0
    vth: float = 0.05
    # replicate the initial loading every `tile_rows` cell rows (weak scaling)
    tile_rows: int | None = None

    def __post_init__(self) -> None:
        for name in ("cells_x", "cells_y", "particles_per_cell", "solver_max_iters"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if not self.dt > 0 or not self.solver_tol > 0 or not self.cell_size > 0:
            raise ValueError("dt, solver_tol and cell_size must be positive")
        if self.qm == 0:
            raise ValueError("qm must be non-zero")
        if self.tile_rows is not None and self.tile_rows < 1:
            raise ValueError("tile_rows must be >= 1")

    @property
    def cell_area(self) -> float:
        return self.cell_size * self.cell_size

    @property
    def length_x(self) -> float:
        return self.cells_x * self.cell_size

    @property
    def length_y(self) -> float:
        return self.cells_y * self.cell_size

    @property
    def particle_charge(self) -> float:
        # sign follows qm; |rho| averages 1 over the domain
        return float(np.sign(self.qm)) * self.cell_area / self.particles_per_cell

    @property
    def particle_mass(self) -> float:
        return self.particle_charge / self.qm


def row_blocks(ny: int, parts: int) -> list[tuple[int, int]]:
    """Contiguous row ranges per part; the remainder goes to the last part."""
    if parts < 1 or ny < parts:
        raise ValueError(f"cannot split {ny} rows into {parts} blocks")
    base = ny // parts
    blocks = [(i * base, (i + 1) * base) for i in range(parts)]
    blocks[-1] = (blocks[-1][0], ny)
    return blocks


def block_overlaps(ny: int, n_src: int, n_dst: int) -> dict[int, list[tuple[int, int, int]]]:
    """For each source part, the (dest part, row0, row1) pieces it must send."""
    src = row_blocks(ny, n_src)
    dst = row_blocks(ny, n_dst)
    plan: dict[int, list[tuple[int, int, int]]] = {}
    for i, (a0, a1) in enumerate(src):
        pieces = []
        for j, (b0, b1) in enumerate(dst):
            lo, hi = max(a0, b0), min(a1, b1)
            if lo < hi:
                pieces.append((j, lo, hi))
        plan[i] = pieces
    return plan


@dataclass
class FieldGrid:
    """Row block [row0, row0 + rows) of the potential and electric field."""

    phi: np.ndarray
    ex: np.ndarray
    ey: np.ndarray
    b: np.ndarray
    row0: int = 0
    cg_iters: int = 0
    residual: float = 0.0
    cg_checks: int = 0

    @classmethod
    def zeros(cls, rows: int, nx: int, b0, row0: int = 0) -> "FieldGrid":
        return cls(
            phi=np.zeros((rows, nx)),
            ex=np.zeros((rows, nx)),
            ey=np.zeros((rows, nx)),
            b=np.array(b0, dtype=np.float64),
            row0=row0,
        )


@dataclass
class Moments:
    rho: np.ndarray
    j: np.ndarray  # (3, rows, nx)
    row0: int = 0

    def block(self, r0: int, r1: int) -> "Moments":
        a, b = r0 - self.row0, r1 - self.row0
        return Moments(self.rho[a:b].copy(), self.j[:, a:b].copy(), r0)


@dataclass
class ParticleSet:
    x: np.ndarray  # (n, 2)
    v: np.ndarray  # (n, 3)
    q: float
    m: float
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return self.x.shape[0]


def load_rows(params: SimParams, r0: int, r1: int) -> ParticleSet:
    """Particles for cell rows [r0, r1); each row draws from its own seeded stream."""
    nx, ppc, dx = params.cells_x, params.particles_per_cell, params.cell_size
    xs, vs = [], []
    cols = np.repeat(np.arange(nx, dtype=np.float64), ppc)
    for row in range(r0, r1):
        key = row if params.tile_rows is None else row % params.tile_rows
        rng = np.random.default_rng([params.seed, key])
        u = rng.random((nx * ppc, 2))
        pos = np.empty((nx * ppc, 2))
        pos[:, 0] = (cols + u[:, 0]) * dx
        pos[:, 1] = (row + u[:, 1]) * dx
        if params.vth > 0:
            vel = rng.normal(0.0, params.vth, (nx * ppc, 3))
        else:
            vel = np.zeros((nx * ppc, 3))
        xs.append(pos)
        vs.append(vel)
    x = np.concatenate(xs) if xs else np.zeros((0, 2))
    v = np.concatenate(vs) if vs else np.zeros((0, 3))
    return ParticleSet(x, v, params.particle_charge, params.particle_mass)


def init_state(params: SimParams, rank: int = 0, nranks: int = 1) -> tuple[FieldGrid, ParticleSet]:
    """Zeroed field block and the particles loaded in this rank's row block."""
    r0, r1 = row_blocks(params.cells_y, nranks)[rank]
    grid = FieldGrid.zeros(r1 - r0, params.cells_x, params.b0, r0)
    return grid, load_rows(params, r0, r1)

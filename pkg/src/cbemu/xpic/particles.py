"""Particle solver: cloud-in-cell deposition, field gather and Boris push."""

from __future__ import annotations

import numpy as np

from .state import Moments, ParticleSet, SimParams


def _cic(x: np.ndarray, params: SimParams):
    """Lower-left node indices and bilinear weights for each particle."""
    nx, ny, dx = params.cells_x, params.cells_y, params.cell_size
    gx = x[:, 0] / dx
    gy = x[:, 1] / dx
    i = np.floor(gx)
    j = np.floor(gy)
    fx = gx - i
    fy = gy - j
    i0 = i.astype(np.int64) % nx
    j0 = j.astype(np.int64) % ny
    i1 = (i0 + 1) % nx
    j1 = (j0 + 1) % ny
    w00 = (1.0 - fx) * (1.0 - fy)
    w10 = fx * (1.0 - fy)
    w01 = (1.0 - fx) * fy
    w11 = fx * fy
    return (j0 * nx + i0, j0 * nx + i1, j1 * nx + i0, j1 * nx + i1), (w00, w10, w01, w11)


def pcl_gather_moments(p: ParticleSet, params: SimParams) -> Moments:
    """Deposit charge and current density of ``p`` onto the full periodic node grid."""
    nx, ny = params.cells_x, params.cells_y
    size = nx * ny
    idx, w = _cic(p.x, params)
    scale = p.q / params.cell_area
    out = np.zeros((4, size))
    comps = (np.ones(len(p)), p.v[:, 0], p.v[:, 1], p.v[:, 2])
    for c, comp in enumerate(comps):
        for k in range(4):
            out[c] += np.bincount(idx[k], weights=w[k] * comp, minlength=size)
    out *= scale
    out = out.reshape(4, ny, nx)
    return Moments(rho=out[0].copy(), j=out[1:].copy(), row0=0)


def interpolate_e(x: np.ndarray, ex: np.ndarray, ey: np.ndarray, params: SimParams) -> np.ndarray:
    """Electric field at particle positions with the deposition weights."""
    idx, w = _cic(x, params)
    fx, fy = ex.ravel(), ey.ravel()
    e = np.zeros((x.shape[0], 3))
    for k in range(4):
        e[:, 0] += w[k] * fx[idx[k]]
        e[:, 1] += w[k] * fy[idx[k]]
    return e


def boris_push(v: np.ndarray, e: np.ndarray, b: np.ndarray, qm: float, dt: float) -> np.ndarray:
    half = 0.5 * qm * dt
    v_minus = v + half * e
    t = half * np.asarray(b, dtype=np.float64)
    s = 2.0 * t / (1.0 + t @ t)
    v_prime = v_minus + np.cross(v_minus, t)
    v_plus = v_minus + np.cross(v_prime, s)
    return v_plus + half * e


def pcl_move(p: ParticleSet, ex: np.ndarray, ey: np.ndarray, b, params: SimParams) -> ParticleSet:
    """One Boris step; ``ex``/``ey`` are the full (cells_y, cells_x) node fields."""
    e = interpolate_e(p.x, ex, ey, params)
    v = boris_push(p.v, e, b, p.q / p.m, params.dt)
    x = p.x + v[:, :2] * params.dt
    x[:, 0] = wrap(x[:, 0], params.length_x)
    x[:, 1] = wrap(x[:, 1], params.length_y)
    return ParticleSet(x, v, p.q, p.m, {"impulse": (p.q * params.dt) * e.sum(axis=0)})


def wrap(coord: np.ndarray, length: float) -> np.ndarray:
    out = np.mod(coord, length)
    # np.mod can round a tiny negative value up to exactly `length`
    out[out >= length] -= length
    return out


def kinetic_energy_local(p: ParticleSet) -> float:
    return float(0.5 * p.m * np.sum(p.v * p.v))

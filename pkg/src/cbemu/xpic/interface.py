"""Interface buffer between the solvers: packed (E, B) fields or (rho, J) moments.

Layout (little-endian): 20-byte header ``b"XPIB"``, u16 kind (1 fields,
2 moments), u16 component count, u32 first row, u32 row count, u32 cells per
row; then the component planes as float64 rows.  Field buffers carry the
planes Ex, Ey followed by the three components of B; moment buffers carry
rho, Jx, Jy, Jz.
"""

from __future__ import annotations

import struct

import numpy as np

from .state import FieldGrid, Moments

MAGIC = b"XPIB"
HEADER = struct.Struct("<4sHHIII")
KIND_FIELDS = 1
KIND_MOMENTS = 2


class InterfaceError(ValueError):
    pass


def cpy_to_arr(x: FieldGrid | Moments, rows: tuple[int, int] | None = None) -> bytes:
    """Pack a field or moment block (optionally only global rows [r0, r1))."""
    r0, r1 = rows if rows is not None else (x.row0, x.row0 + _nrows(x))
    a, b = r0 - x.row0, r1 - x.row0
    if a < 0 or b > _nrows(x) or a >= b:
        raise InterfaceError(f"rows {r0}:{r1} outside block at {x.row0}")
    if isinstance(x, FieldGrid):
        planes = [x.ex[a:b], x.ey[a:b]]
        tail = np.asarray(x.b, dtype="<f8").tobytes()
        kind = KIND_FIELDS
    else:
        planes = [x.rho[a:b], x.j[0, a:b], x.j[1, a:b], x.j[2, a:b]]
        tail = b""
        kind = KIND_MOMENTS
    nx = planes[0].shape[1]
    head = HEADER.pack(MAGIC, kind, len(planes), r0, b - a, nx)
    body = np.stack(planes).astype("<f8", copy=False).tobytes()
    return head + body + tail


def _nrows(x) -> int:
    return x.ex.shape[0] if isinstance(x, FieldGrid) else x.rho.shape[0]


def cpy_from_arr(buf: bytes) -> FieldGrid | Moments:
    if len(buf) < HEADER.size:
        raise InterfaceError("buffer shorter than header")
    magic, kind, ncomp, row0, nrows, nx = HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise InterfaceError(f"bad magic {magic!r}")
    expect = {KIND_FIELDS: (2, 3), KIND_MOMENTS: (4, 0)}.get(kind)
    if expect is None or ncomp != expect[0]:
        raise InterfaceError(f"bad kind/component header ({kind}, {ncomp})")
    plane_bytes = ncomp * nrows * nx * 8
    if len(buf) != HEADER.size + plane_bytes + expect[1] * 8:
        raise InterfaceError(
            f"buffer length {len(buf)} does not match header ({ncomp}x{nrows}x{nx})"
        )
    data = np.frombuffer(buf, dtype="<f8", count=ncomp * nrows * nx, offset=HEADER.size)
    data = data.reshape(ncomp, nrows, nx).astype(np.float64)
    if kind == KIND_FIELDS:
        b = np.frombuffer(buf, dtype="<f8", count=3, offset=HEADER.size + plane_bytes).astype(np.float64)
        return FieldGrid(np.zeros((nrows, nx)), data[0], data[1], b, row0)
    return Moments(data[0], data[1:].copy(), row0)


def merge_blocks(parts: list, r0: int, r1: int):
    """Stitch received pieces (sorted by row) into one block covering [r0, r1)."""
    parts = sorted(parts, key=lambda p: p.row0)
    row = r0
    for p in parts:
        if p.row0 != row:
            raise InterfaceError(f"missing rows {row}:{p.row0} in exchange")
        row += _nrows(p)
    if row != r1:
        raise InterfaceError(f"exchange covered rows {r0}:{row}, expected {r0}:{r1}")
    first = parts[0]
    if isinstance(first, FieldGrid):
        ex = np.concatenate([p.ex for p in parts])
        ey = np.concatenate([p.ey for p in parts])
        return FieldGrid(np.zeros_like(ex), ex, ey, first.b.copy(), r0)
    rho = np.concatenate([p.rho for p in parts])
    j = np.concatenate([p.j for p in parts], axis=1)
    return Moments(rho, j, r0)

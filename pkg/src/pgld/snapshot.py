"""Binary field snapshots.

Layout (little endian): 8-byte magic ``PGLDFLD0``; ``uint32`` nx, ny, nz;
``float64`` Lx, Ly, h; then ``nx*ny*nz`` ``float64`` values with x varying
fastest.
"""
from __future__ import annotations

import struct

import numpy as np

from .grid import Grid, ScalarField

MAGIC = b"PGLDFLD0"
_HEADER = struct.Struct("<8s3I3d")
MAX_NODES = 1 << 31


class SnapshotError(ValueError):
    pass


def encode(field: ScalarField) -> bytes:
    g = field.grid
    head = _HEADER.pack(MAGIC, g.nx, g.ny, g.nz, g.Lx, g.Ly, g.h)
    return head + np.asarray(field.values, dtype="<f8").ravel(order="F").tobytes()


def decode(data: bytes) -> ScalarField:
    if len(data) < 8 or data[:8] != MAGIC:
        raise SnapshotError("bad magic")
    if len(data) < _HEADER.size:
        raise SnapshotError("truncated header")
    _, nx, ny, nz, Lx, Ly, h = _HEADER.unpack_from(data)
    if min(nx, ny, nz) < 3:
        raise SnapshotError(f"invalid dims ({nx}, {ny}, {nz})")
    n = nx * ny * nz
    if n > MAX_NODES:
        raise SnapshotError(f"dim overflow: {nx}*{ny}*{nz} nodes")
    body = data[_HEADER.size:]
    if len(body) != 8 * n:
        raise SnapshotError(f"truncated file: expected {8 * n} data bytes, found {len(body)}")
    try:
        grid = Grid(nx, ny, nz, Lx, Ly, h)
    except ValueError as exc:
        raise SnapshotError(str(exc)) from exc
    values = np.frombuffer(body, dtype="<f8").reshape((nx, ny, nz), order="F")
    return ScalarField(grid, values.astype(float))


def write_snapshot(field: ScalarField, path) -> None:
    with open(path, "wb") as fh:
        fh.write(encode(field))


def read_snapshot(path) -> ScalarField:
    with open(path, "rb") as fh:
        return decode(fh.read())

"""Field snapshots and JSON-lines helpers.

A snapshot lists every stored mode with a nonzero coefficient as
``[nx, ny, nz, re1, im1, re2, im2, re3, im3]`` under a header with the lattice
size and the run's delta.  JSON floats are written with ``repr`` precision, so
the round trip is bit-exact.  The ``.npz`` variant stores the raw array.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .spectral import SpectralField, lattice

FIELD_SCHEMA = "snse.field/1"


def field_to_dict(f: SpectralField, delta: float | None = None) -> dict:
    lat = f.lattice
    c = f.coeffs
    if c.ndim != 4:
        raise ValueError("snapshots hold a single field, not a batch")
    nz = np.argwhere(np.any(c != 0, axis=0))
    modes = []
    for ix, iy, iz in nz:
        n = (int(lat.kx[ix, 0, 0]), int(lat.ky[0, iy, 0]), int(iz))
        vals = c[:, ix, iy, iz]
        modes.append(list(n) + [float(x) for v in vals for x in (v.real, v.imag)])
    return {"schema": FIELD_SCHEMA, "N": lat.N, "delta": delta, "modes": modes}


def field_from_dict(d: dict) -> tuple[SpectralField, float | None]:
    if d.get("schema") != FIELD_SCHEMA:
        raise ValueError(f"unsupported field schema {d.get('schema')!r}")
    lat = lattice(int(d["N"]))
    c = np.zeros((3,) + lat.shape, complex)
    for row in d["modes"]:
        nx, ny, nz = (int(x) for x in row[:3])
        vals = row[3:]
        for j in range(3):
            c[j, nx % lat.N, ny % lat.N, nz] = complex(vals[2 * j], vals[2 * j + 1])
    f = SpectralField(lat, c)
    sol = f.is_zero() or f.divergence_defect() <= 1e-10
    return SpectralField(lat, c, sol), d.get("delta")


def save_field(path, f: SpectralField, delta: float | None = None):
    path = Path(path)
    if path.suffix == ".npz":
        np.savez(path, schema=FIELD_SCHEMA, N=f.lattice.N,
                 delta=np.nan if delta is None else delta, coeffs=f.coeffs)
    else:
        path.write_text(json.dumps(field_to_dict(f, delta)) + "\n")


def load_field(path) -> tuple[SpectralField, float | None]:
    path = Path(path)
    if path.suffix == ".npz":
        with np.load(path) as z:
            if str(z["schema"]) != FIELD_SCHEMA:
                raise ValueError(f"unsupported field schema {z['schema']!r}")
            lat = lattice(int(z["N"]))
            c = z["coeffs"]
            delta = float(z["delta"])
        f = SpectralField(lat, c)
        sol = f.is_zero() or f.divergence_defect() <= 1e-10
        return SpectralField(lat, c, sol), (None if np.isnan(delta) else delta)
    return field_from_dict(json.loads(path.read_text()))


def dumps(obj) -> str:
    """Canonical one-line JSON: sorted keys, no NaN."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def write_jsonl(path, rows):
    with open(path, "w") as fh:
        for row in rows:
            fh.write(dumps(row) + "\n")


def read_jsonl(path):
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]

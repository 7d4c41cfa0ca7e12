"""Voxel occupancy grids and Euclidean signed distance fields.

Grids are built from axis-aligned obstacle boxes; the domain boundary ring of
voxels is always occupied so searches and penalties cannot escape the map.
ESDF sign convention: positive in free space, negative inside obstacles.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

OUT_OF_BOUNDS_DISTANCE = -1.0e6


class InvalidConfigError(ValueError):
    pass


@dataclass(frozen=True)
class OccupancyGrid:
    origin: np.ndarray          # (3,) lower corner, meters
    resolution: float           # meters / voxel
    occ: np.ndarray             # (nx, ny, nz) bool

    def __post_init__(self):
        if self.resolution <= 0:
            raise InvalidConfigError("resolution must be > 0")
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=float))
        object.__setattr__(self, "occ", np.asarray(self.occ, dtype=bool))

    @property
    def dims(self):
        return self.occ.shape

    def voxel_centers_axis(self, axis: int) -> np.ndarray:
        n = self.occ.shape[axis]
        return self.origin[axis] + (np.arange(n) + 0.5) * self.resolution

    def occupied_at(self, pts: np.ndarray) -> np.ndarray:
        """Occupancy of the voxel containing each (k, 3) point; outside = occupied."""
        idx = np.floor((pts - self.origin) / self.resolution).astype(np.int64)
        dims = np.array(self.occ.shape)
        inside = np.all((idx >= 0) & (idx < dims), axis=1)
        out = np.ones(len(pts), dtype=bool)
        ii = idx[inside]
        out[inside] = self.occ[ii[:, 0], ii[:, 1], ii[:, 2]]
        return out

    def dump(self, path):
        _dump_lattice(path, self.origin, self.resolution, self.occ.shape,
                      self.occ.astype(np.float64))

    @classmethod
    def load(cls, path) -> "OccupancyGrid":
        origin, res, data = _load_lattice(path)
        return cls(origin, res, data > 0.5)


def build_grid(boxes, bounds, resolution: float) -> OccupancyGrid:
    """Rasterize axis-aligned boxes into an occupancy grid.

    boxes: iterable of (lo, hi) corner pairs, meters.
    bounds: (lo, hi) of the map domain; the boundary voxel shell is occupied.
    """
    lo = np.asarray(bounds[0], dtype=float)
    hi = np.asarray(bounds[1], dtype=float)
    if np.any(hi - lo <= 0):
        raise InvalidConfigError("bounds must have positive extent")
    if resolution <= 0:
        raise InvalidConfigError("resolution must be > 0")
    dims = np.maximum(np.ceil((hi - lo) / resolution - 1e-9).astype(int), 1)
    occ = np.zeros(tuple(dims), dtype=bool)
    centers = [lo[a] + (np.arange(dims[a]) + 0.5) * resolution for a in range(3)]
    for blo, bhi in boxes:
        blo = np.asarray(blo, dtype=float)
        bhi = np.asarray(bhi, dtype=float)
        sel = [
            (centers[a] > blo[a]) & (centers[a] < bhi[a]) for a in range(3)
        ]
        occ[np.ix_(*sel)] = True
    # occupied domain boundary shell
    occ[0, :, :] = occ[-1, :, :] = True
    occ[:, 0, :] = occ[:, -1, :] = True
    occ[:, :, 0] = occ[:, :, -1] = True
    return OccupancyGrid(lo, float(resolution), occ)


@dataclass(frozen=True)
class Esdf:
    origin: np.ndarray
    resolution: float
    dist: np.ndarray            # (nx, ny, nz) signed meters

    def __post_init__(self):
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=float))
        object.__setattr__(self, "dist", np.asarray(self.dist, dtype=float))

    @property
    def dims(self):
        return self.dist.shape

    def dump(self, path):
        _dump_lattice(path, self.origin, self.resolution, self.dist.shape, self.dist)

    @classmethod
    def load(cls, path) -> "Esdf":
        origin, res, data = _load_lattice(path)
        return cls(origin, res, data)


def esdf_from_grid(grid: OccupancyGrid) -> Esdf:
    """Exact signed Euclidean distance transform of the grid (voxel centers)."""
    occ = grid.occ
    res = grid.resolution
    if occ.any():
        d_free = ndimage.distance_transform_edt(~occ, sampling=res)
    else:
        d_free = np.full(occ.shape, 1e9)
    if (~occ).any():
        d_occ = ndimage.distance_transform_edt(occ, sampling=res)
    else:
        d_occ = np.full(occ.shape, 1e9)
    return Esdf(grid.origin, res, np.where(occ, -d_occ, d_free))


def esdf_query(esdf: Esdf, p) -> tuple[float, np.ndarray]:
    """Trilinearly interpolated distance and its analytic gradient at p.

    Outside the map domain: (large negative distance, zero gradient).
    Within the outer half-voxel ring the interpolation clamps to the
    boundary cell, zeroing the clamped gradient component.
    """
    d, g = esdf_query_batch(esdf, np.asarray(p, dtype=float)[None, :])
    return float(d[0]), g[0]


def esdf_query_batch(esdf: Esdf, pts: np.ndarray):
    """Vectorized esdf_query for (k, 3) points."""
    res = esdf.resolution
    dims = np.array(esdf.dims)
    u = (pts - esdf.origin) / res - 0.5
    lo_ok = np.all(pts >= esdf.origin, axis=1)
    hi_ok = np.all(pts <= esdf.origin + dims * res, axis=1)
    inside = lo_ok & hi_ok

    i0 = np.floor(u).astype(np.int64)
    frac = u - i0
    # clamp base cell so i0 and i0+1 are valid; freeze frac where clamped
    clamped_lo = i0 < 0
    clamped_hi = i0 > dims - 2
    i0c = np.clip(i0, 0, dims - 2)
    frac = np.where(clamped_lo, 0.0, np.where(clamped_hi, 1.0, frac))
    fx, fy, fz = frac[:, 0], frac[:, 1], frac[:, 2]

    D = esdf.dist
    ix, iy, iz = i0c[:, 0], i0c[:, 1], i0c[:, 2]
    c = np.empty((len(pts), 2, 2, 2))
    for a in (0, 1):
        for b in (0, 1):
            for cc in (0, 1):
                c[:, a, b, cc] = D[ix + a, iy + b, iz + cc]

    # interpolate along z, then y, then x; keep partials
    cz = c[..., 0] * (1 - fz[:, None, None]) + c[..., 1] * fz[:, None, None]
    dz = (c[..., 1] - c[..., 0])
    cy = cz[:, :, 0] * (1 - fy[:, None]) + cz[:, :, 1] * fy[:, None]
    dz_y = dz[:, :, 0] * (1 - fy[:, None]) + dz[:, :, 1] * fy[:, None]
    dy = cz[:, :, 1] - cz[:, :, 0]
    val = cy[:, 0] * (1 - fx) + cy[:, 1] * fx
    gx = (cy[:, 1] - cy[:, 0]) / res
    gy = (dy[:, 0] * (1 - fx) + dy[:, 1] * fx) / res
    gz = (dz_y[:, 0] * (1 - fx) + dz_y[:, 1] * fx) / res
    grad = np.column_stack([gx, gy, gz])
    grad[clamped_lo | clamped_hi] = 0.0  # clamped components have no variation

    val = np.where(inside, val, OUT_OF_BOUNDS_DISTANCE)
    grad[~inside] = 0.0
    return val, grad


def _dump_lattice(path, origin, resolution, dims, data):
    """Little-endian binary: origin x3, resolution, dims x3 (64-bit), cells row-major."""
    with open(path, "wb") as fh:
        fh.write(struct.pack("<3d d 3q", *origin, resolution, *dims))
        fh.write(np.ascontiguousarray(data, dtype="<f8").tobytes())


def _load_lattice(path):
    with open(path, "rb") as fh:
        header = fh.read(struct.calcsize("<3d d 3q"))
        ox, oy, oz, res, nx, ny, nz = struct.unpack("<3d d 3q", header)
        data = np.frombuffer(fh.read(), dtype="<f8").reshape(nx, ny, nz)
    return np.array([ox, oy, oz]), res, data.copy()

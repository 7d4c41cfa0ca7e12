"""Planar polygon primitives and z-sliced formation shapes.

Formation shapes are stacks of simple CCW polygons at evenly spaced layer
heights; the layer spacing is the downwash safety distance.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np


class InvalidShapeError(ValueError):
    pass


@dataclass(frozen=True)
class Polygon2:
    """Simple polygon in a horizontal plane at height z.

    Vertices are (k, 2) in meters, counter-clockwise, non-self-intersecting.
    """

    vertices: np.ndarray
    z: float = 0.0

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=float)
        if v.ndim != 2 or v.shape[1] != 2 or v.shape[0] < 3:
            raise InvalidShapeError("polygon needs >= 3 2-D vertices")
        if not np.all(np.isfinite(v)):
            raise InvalidShapeError("non-finite polygon vertex")
        if signed_area(v) <= 0.0:
            raise InvalidShapeError("polygon must be CCW with positive area")
        object.__setattr__(self, "vertices", v)

    @property
    def bbox(self):
        v = self.vertices
        return v.min(axis=0), v.max(axis=0)

    @property
    def diameter(self) -> float:
        lo, hi = self.bbox
        return float(np.max(hi - lo))


def signed_area(vertices: np.ndarray) -> float:
    """Shoelace signed area; positive for CCW orientation."""
    v = np.asarray(vertices, dtype=float)
    x, y = v[:, 0], v[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def polygon_area(poly: Polygon2) -> float:
    """Unsigned polygon area in m^2."""
    a = abs(signed_area(poly.vertices))
    if a <= 0.0:
        raise InvalidShapeError("degenerate polygon (zero area)")
    return a


def polygon_centroid(poly: Polygon2) -> np.ndarray:
    """Area centroid of the polygon (2-D)."""
    v = poly.vertices
    x, y = v[:, 0], v[:, 1]
    xn, yn = np.roll(x, -1), np.roll(y, -1)
    cross = x * yn - xn * y
    a = 0.5 * np.sum(cross)
    cx = np.sum((x + xn) * cross) / (6.0 * a)
    cy = np.sum((y + yn) * cross) / (6.0 * a)
    return np.array([cx, cy])


def point_in_polygon(p, poly: Polygon2) -> bool:
    """Even-odd test with the half-open edge convention (deterministic on edges)."""
    return bool(points_in_polygon(np.asarray(p, dtype=float)[None, :], poly)[0])


def points_in_polygon(pts: np.ndarray, poly: Polygon2) -> np.ndarray:
    """Vectorized even-odd ray cast for (k, 2) query points."""
    v = poly.vertices
    px = pts[:, 0][:, None]
    py = pts[:, 1][:, None]
    x0, y0 = v[:, 0][None, :], v[:, 1][None, :]
    x1, y1 = np.roll(v[:, 0], -1)[None, :], np.roll(v[:, 1], -1)[None, :]
    # half-open in y: an edge covers [min(y0,y1), max(y0,y1))
    straddles = (y0 > py) != (y1 > py)
    with np.errstate(divide="ignore", invalid="ignore"):
        x_at_y = x0 + (py - y0) * (x1 - x0) / (y1 - y0)
    hits = straddles & (px < x_at_y)
    return np.sum(hits, axis=1) % 2 == 1


def sample_polygon_grid(poly: Polygon2, spacing: float) -> np.ndarray:
    """Regular-grid sample points strictly inside the polygon, (k, 2)."""
    lo, hi = poly.bbox
    xs = np.arange(lo[0] + 0.5 * spacing, hi[0], spacing)
    ys = np.arange(lo[1] + 0.5 * spacing, hi[1], spacing)
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    pts = np.column_stack([gx.ravel(), gy.ravel()])
    return pts[points_in_polygon(pts, poly)]


@dataclass(frozen=True)
class FormationShape:
    """z-sliced stack of layer polygons; dz is the downwash safety spacing."""

    layers: tuple = field(default_factory=tuple)
    dz: float = 0.5

    def __post_init__(self):
        layers = tuple(self.layers)
        if not layers:
            raise InvalidShapeError("formation shape needs >= 1 layer")
        zs = np.array([l.z for l in layers])
        if len(layers) > 1:
            steps = np.diff(zs)
            if np.any(steps <= 0) or not np.allclose(steps, self.dz, atol=1e-9):
                raise InvalidShapeError("layer z-values must increase by dz")
        object.__setattr__(self, "layers", layers)

    @property
    def areas(self) -> np.ndarray:
        return np.array([polygon_area(l) for l in self.layers])

    def centroid3(self) -> np.ndarray:
        """Area-weighted 3-D centroid of the layer stack."""
        areas = self.areas
        cents = np.array([polygon_centroid(l) for l in self.layers])
        zs = np.array([l.z for l in self.layers])
        w = areas / areas.sum()
        return np.array([*(w @ cents), float(w @ zs)])

    def circumradius(self) -> float:
        """Radius of the smallest centered sphere holding all layer vertices."""
        c = self.centroid3()
        r = 0.0
        for l in self.layers:
            d = l.vertices - c[:2]
            r = max(r, float(np.sqrt((d ** 2).sum(axis=1).max() + (l.z - c[2]) ** 2)))
        return r

    def to_json(self) -> dict:
        return {
            "dz": self.dz,
            "layers": [
                {"z": l.z, "vertices": l.vertices.tolist()} for l in self.layers
            ],
        }

    @classmethod
    def from_json(cls, doc: dict) -> "FormationShape":
        layers = [
            Polygon2(np.asarray(l["vertices"], dtype=float), float(l["z"]))
            for l in doc["layers"]
        ]
        return cls(layers=tuple(layers), dz=float(doc["dz"]))

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=2)

    @classmethod
    def load(cls, path) -> "FormationShape":
        with open(path) as fh:
            return cls.from_json(json.load(fh))

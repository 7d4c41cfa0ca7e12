"""Canonical formation shapes used by scenarios and benchmarks."""

from __future__ import annotations

import numpy as np

from .geometry import FormationShape, Polygon2, signed_area


def _ccw(vertices: np.ndarray) -> np.ndarray:
    return vertices if signed_area(vertices) > 0 else vertices[::-1]


def heart(scale: float = 1.0, z: float = 0.0, samples: int = 64) -> FormationShape:
    """Classic heart curve, scaled so the bounding radius is about `scale`."""
    t = 2.0 * np.pi * np.arange(samples) / samples
    x = 16.0 * np.sin(t) ** 3
    y = (13.0 * np.cos(t) - 5.0 * np.cos(2 * t)
         - 2.0 * np.cos(3 * t) - np.cos(4 * t))
    v = np.column_stack([x, y]) * (scale / 17.0)
    return FormationShape(layers=(Polygon2(_ccw(v), z),))


def pentagram(scale: float = 1.0, z: float = 0.0,
              inner_ratio: float = 0.5) -> FormationShape:
    """Five-pointed star with outer radius `scale`."""
    ang = np.pi / 2 + 2.0 * np.pi * np.arange(10) / 10
    rad = np.where(np.arange(10) % 2 == 0, scale, inner_ratio * scale)
    v = np.column_stack([rad * np.cos(ang), rad * np.sin(ang)])
    return FormationShape(layers=(Polygon2(_ccw(v), z),))


def disk(radius: float = 1.0, z: float = 0.0, samples: int = 48) -> FormationShape:
    ang = 2.0 * np.pi * np.arange(samples) / samples
    v = radius * np.column_stack([np.cos(ang), np.sin(ang)])
    return FormationShape(layers=(Polygon2(v, z),))


def triangle(scale: float = 1.0, z: float = 0.0) -> FormationShape:
    ang = np.pi / 2 + 2.0 * np.pi * np.arange(3) / 3
    v = scale * np.column_stack([np.cos(ang), np.sin(ang)])
    return FormationShape(layers=(Polygon2(_ccw(v), z),))


def square(scale: float = 1.0, z: float = 0.0) -> FormationShape:
    s = scale / np.sqrt(2.0)
    v = np.array([[-s, -s], [s, -s], [s, s], [-s, s]])
    return FormationShape(layers=(Polygon2(v, z),))


def slash(width: float = 3.5, run: float = 3.5, thickness: float = 0.6,
          z: float = 0.0) -> FormationShape:
    """Diagonal strip: y-extent `width`, x-extent `run`.

    Nearest-neighbor offsets after partitioning lie along the diagonal, so a
    horizontal stretch/compress deformation does not shrink them — the shape
    of choice for narrow-passage traversal demos.
    """
    hx, hy, t = run / 2.0, width / 2.0, thickness / 2.0
    v = np.array([
        [-hx - t, -hy], [-hx + t, -hy], [hx + t, hy], [hx - t, hy],
    ])
    return FormationShape(layers=(Polygon2(_ccw(v), z),))


_BUILDERS = {
    "heart": heart,
    "pentagram": pentagram,
    "disk": disk,
    "triangle": triangle,
    "square": square,
    "slash": slash,
}


def make_shape(name: str, **kwargs) -> FormationShape:
    if name not in _BUILDERS:
        raise ValueError(f"unknown shape '{name}'")
    return _BUILDERS[name](**kwargs)

"""Formation position partitioning and assignment.

Pipeline: slice the desired shape into layers, allocate agent counts by layer
area, run Lloyd relaxation per layer for uniform coverage, rescale for the
inter-agent safety distance l_s = 2*h*r_a, and assign agents to targets with
the Hungarian algorithm on squared world distances.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial import cKDTree

from .geometry import (
    FormationShape,
    Polygon2,
    point_in_polygon,
    polygon_centroid,
    sample_polygon_grid,
)

SAMPLE_DIVISIONS = 200      # sample spacing = layer diameter / 200
LLOYD_TOL = 1e-3            # max generator displacement, meters
LLOYD_MAX_ITERS = 100


class InvalidInputError(ValueError):
    pass


class DegenerateFormationError(ValueError):
    pass


@dataclass(frozen=True)
class LayerAllocation:
    counts: tuple

    @property
    def total(self) -> int:
        return int(sum(self.counts))


@dataclass(frozen=True)
class FormationPlan:
    """Per-agent desired relative positions in the DVS centroid frame.

    relative_targets are the raw (pre-deformation) partition offsets at base
    radius r0; the safety scale r stretches them horizontally through the
    deformation map so the minimum pairwise spacing equals l_s.
    """

    relative_targets: np.ndarray        # (n, 3)
    assignment: np.ndarray              # agent index -> target index
    l_min: float
    safety_scale: float                 # r
    base_radius: float                  # r0
    l_s: float
    layer_counts: tuple = field(default_factory=tuple)

    def to_json(self) -> dict:
        return {
            "relative_targets": self.relative_targets.tolist(),
            "assignment": self.assignment.tolist(),
            "l_min": self.l_min,
            "safety_scale": self.safety_scale,
            "base_radius": self.base_radius,
            "l_s": self.l_s,
            "layer_counts": list(self.layer_counts),
        }

    @classmethod
    def from_json(cls, doc: dict) -> "FormationPlan":
        return cls(
            relative_targets=np.asarray(doc["relative_targets"], dtype=float),
            assignment=np.asarray(doc["assignment"], dtype=int),
            l_min=float(doc["l_min"]),
            safety_scale=float(doc["safety_scale"]),
            base_radius=float(doc["base_radius"]),
            l_s=float(doc["l_s"]),
            layer_counts=tuple(doc["layer_counts"]),
        )

    def dumps(self) -> str:
        return json.dumps(self.to_json())


def allocate_layer_counts(shape: FormationShape, n: int) -> LayerAllocation:
    """Largest-remainder allocation of n agents proportional to layer areas."""
    if n < 1:
        raise InvalidInputError("agent count must be >= 1")
    areas = shape.areas
    quotas = n * areas / areas.sum()
    counts = np.floor(quotas).astype(int)
    rem = quotas - counts
    short = n - counts.sum()
    for idx in np.argsort(-rem, kind="stable")[:short]:
        counts[idx] += 1
    # every positive-area layer gets one agent when there are enough agents
    k_pos = int(np.sum(areas > 0))
    if n >= k_pos:
        while np.any((counts == 0) & (areas > 0)):
            give = int(np.argmax((counts == 0) & (areas > 0)))
            take = int(np.argmax(counts))
            counts[take] -= 1
            counts[give] += 1
    return LayerAllocation(tuple(int(c) for c in counts))


def lloyd_partition(layer: Polygon2, n_m: int, rng_seed: int = 0,
                    return_history: bool = False):
    """Lloyd relaxation of n_m generators over a dense in-polygon sample grid.

    Returns (n_m, 2) generator points; with return_history also the per
    iteration coverage cost J (sum of squared sample-to-generator distances,
    uniform density), which is non-increasing.
    """
    if n_m < 1:
        raise InvalidInputError("n_m must be >= 1")
    spacing = layer.diameter / SAMPLE_DIVISIONS
    samples = sample_polygon_grid(layer, spacing)
    if n_m > len(samples):
        raise InvalidInputError("n_m exceeds polygon sample count")

    if n_m == 1:
        gens = polygon_centroid(layer)[None, :]
        if not point_in_polygon(gens[0], layer):
            gens = samples[[np.argmin(((samples - gens[0]) ** 2).sum(axis=1))]]
        cost = float((((samples - gens[0]) ** 2).sum(axis=1)).sum() * spacing ** 2)
        return (gens, [cost]) if return_history else gens

    gens = _grid_seeds(layer, samples, n_m, rng_seed)
    w = spacing ** 2
    history = []
    for _ in range(LLOYD_MAX_ITERS):
        _, owner = cKDTree(gens).query(samples)
        d2 = ((samples - gens[owner]) ** 2).sum(axis=1)
        history.append(float(d2.sum() * w))
        counts = np.bincount(owner, minlength=n_m)
        sums = np.zeros((n_m, 2))
        np.add.at(sums, owner, samples)
        new = gens.copy()
        nonempty = counts > 0
        new[nonempty] = sums[nonempty] / counts[nonempty, None]
        # keep generators strictly inside non-convex layers
        for i in np.nonzero(nonempty)[0]:
            if not point_in_polygon(new[i], layer):
                cell = samples[owner == i]
                new[i] = cell[np.argmin(((cell - new[i]) ** 2).sum(axis=1))]
        move = np.sqrt(((new - gens) ** 2).sum(axis=1).max())
        gens = new
        if move < LLOYD_TOL:
            break
    _, owner = cKDTree(gens).query(samples)
    history.append(float((((samples - gens[owner]) ** 2).sum(axis=1)).sum() * w))
    return (gens, history) if return_history else gens


def _grid_seeds(layer: Polygon2, samples: np.ndarray, n_m: int, rng_seed: int):
    """Rectangular-grid seeds clipped to the polygon, with tiny seeded jitter."""
    lo, hi = layer.bbox
    ext = hi - lo
    rng = np.random.default_rng(rng_seed)
    k = max(1, int(np.ceil(np.sqrt(n_m))))
    while True:
        nx = max(1, int(round(k * np.sqrt(ext[0] / max(ext[1], 1e-9)))))
        ny = max(1, int(np.ceil(k * k / nx)))
        xs = lo[0] + (np.arange(nx) + 0.5) * ext[0] / nx
        ys = lo[1] + (np.arange(ny) + 0.5) * ext[1] / ny
        gx, gy = np.meshgrid(xs, ys, indexing="ij")
        pts = np.column_stack([gx.ravel(), gy.ravel()])
        from .geometry import points_in_polygon

        pts = pts[points_in_polygon(pts, layer)]
        if len(pts) >= n_m:
            break
        k += 1
        if k > 200:          # thin polygons: fall back to strided samples
            pts = samples
            break
    stride = len(pts) / n_m
    seeds = pts[(np.arange(n_m) * stride).astype(int)]
    return seeds + rng.normal(scale=1e-6, size=seeds.shape)


def hungarian_assign(cost: np.ndarray) -> np.ndarray:
    """Exact minimum-cost bijection agent -> target for a square cost matrix."""
    cost = np.asarray(cost, dtype=float)
    if cost.ndim != 2 or cost.shape[0] != cost.shape[1]:
        raise InvalidInputError("cost matrix must be square")
    if not np.all(np.isfinite(cost)):
        raise InvalidInputError("cost matrix must be finite")
    rows, cols = linear_sum_assignment(cost)
    out = np.empty(cost.shape[0], dtype=int)
    out[rows] = cols
    return out


def safety_scale(targets: np.ndarray, r_a: float, h: float, r_0: float):
    """Minimum pairwise distance and the safety scaling factor r = r0*l_s/l_min."""
    targets = np.asarray(targets, dtype=float)
    if len(targets) < 2:
        raise InvalidInputError("need >= 2 targets")
    if r_a <= 0 or h < 1:
        raise InvalidInputError("need r_a > 0 and h >= 1")
    diff = targets[:, None, :] - targets[None, :, :]
    d = np.sqrt((diff ** 2).sum(axis=2))
    np.fill_diagonal(d, np.inf)
    l_min = float(d.min())
    if l_min <= 0.0:
        raise DegenerateFormationError("duplicate targets (l_min = 0)")
    l_s = 2.0 * h * r_a
    r = r_0 * l_s / l_min
    return l_min, r


def _horizontal_circumradius(shape: FormationShape, centroid: np.ndarray) -> float:
    r = 0.0
    for layer in shape.layers:
        d = layer.vertices - centroid[:2]
        r = max(r, float(np.sqrt((d ** 2).sum(axis=1).max())))
    return r


def run_paas(shape: FormationShape, n: int, agent_positions: np.ndarray,
             dvs_state, r_a: float, h: float, rng_seed: int = 0) -> FormationPlan:
    """Full partition + assignment cycle for the current swarm roster.

    dvs_state provides the current pose used to map targets into the world
    for the assignment cost; its radius is the base radius r0 the new safety
    scale is expressed against.
    """
    from .dvs import desired_position_batch

    agent_positions = np.asarray(agent_positions, dtype=float)
    if len(agent_positions) != n or n < 1:
        raise InvalidInputError("agent count mismatch")
    alloc = allocate_layer_counts(shape, n)
    centroid = shape.centroid3()
    targets = []
    for layer, n_m in zip(shape.layers, alloc.counts):
        if n_m == 0:
            continue        # empty layers drop out of this cycle's plan
        gens = lloyd_partition(layer, n_m, rng_seed=rng_seed)
        targets.append(np.column_stack([gens, np.full(n_m, layer.z)]))
    rel = np.vstack(targets) - centroid

    # Express horizontal offsets at the current DVS radius r0 so the recursive
    # scaling rule r = r0 * l_s / l_min composes: rendering at r(t) = r0
    # reproduces the formation at its present size, and the plan's r is the
    # physical radius realizing spacing l_s. z offsets are absolute (downwash
    # spacing, never scaled by the deformation map).
    r0 = dvs_state.r
    r_draw = _horizontal_circumradius(shape, centroid)
    rel[:, :2] *= r0 / r_draw
    if n >= 2:
        l_min, r = safety_scale(rel, r_a, h, r0)
        l_s = 2.0 * h * r_a
    else:
        l_min, r, l_s = np.inf, r0, 2.0 * h * r_a

    world = desired_position_batch(dvs_state, rel, r0)
    diff = agent_positions[:, None, :] - world[None, :, :]
    assignment = hungarian_assign((diff ** 2).sum(axis=2))
    return FormationPlan(
        relative_targets=rel,
        assignment=assignment,
        l_min=l_min,
        safety_scale=r,
        base_radius=r0,
        l_s=l_s,
        layer_counts=alloc.counts,
    )

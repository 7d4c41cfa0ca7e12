"""Deformable virtual structure state and primitive-library path search.

The DVS state is 5-D: centroid position p_W, scale r (circumsphere radius) and
the area-preserving affine parameter alpha (A = diag(alpha, 1/alpha, 1)).
The search greedily advances through a library of straight primitives carrying
candidate (r, alpha) pairs, scored by deformation, occupancy and goal
alignment costs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from .mapping import Esdf, OccupancyGrid, esdf_query_batch

SCORE_FLOOR = 1e-6

# fixed ellipsoid sampling lattice: radial x polar x azimuthal shells
_N_RAD, _N_POL, _N_AZI = 8, 8, 16


class InvalidPrimitiveError(ValueError):
    pass


class NoPathFoundError(RuntimeError):
    pass


@dataclass(frozen=True)
class DvsState:
    p: np.ndarray           # (3,) centroid, meters
    r: float                # scale / circumsphere radius, meters
    alpha: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "p", np.asarray(self.p, dtype=float))
        if self.r <= 0 or self.alpha <= 0:
            raise ValueError("r and alpha must be positive")

    def with_r(self, r: float) -> "DvsState":
        return replace(self, r=float(r))

    @property
    def affine(self) -> np.ndarray:
        return np.diag([self.alpha, 1.0 / self.alpha, 1.0])


@dataclass(frozen=True)
class Primitive:
    direction: np.ndarray   # unit 3-vector
    length: float
    r_cand: float
    alpha_cand: float

    def __post_init__(self):
        d = np.asarray(self.direction, dtype=float)
        n = np.linalg.norm(d)
        if n < 1e-12:
            raise InvalidPrimitiveError("zero-length primitive direction")
        object.__setattr__(self, "direction", d / n)


@dataclass(frozen=True)
class DvsPath:
    waypoints: tuple                     # DvsState sequence
    scores: tuple = field(default_factory=tuple)

    def positions(self) -> np.ndarray:
        return np.array([w.p for w in self.waypoints])

    def to_json(self) -> dict:
        return {
            "waypoints": [
                {"p": w.p.tolist(), "r": w.r, "alpha": w.alpha}
                for w in self.waypoints
            ],
            "scores": list(self.scores),
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json())


@dataclass(frozen=True)
class SearchConfig:
    w_r: float = 1.0
    w_alpha: float = 1.0
    w_o: float = 10.0
    w_e: float = 5.0    # goal alignment must outweigh the worst useful
                        # deformation cost, else the search crabs sideways
                        # along an obstacle instead of deforming through it
    c_o_max: float = 0.2
    alpha_min: float = 0.5
    alpha_max: float = 2.0
    r_max_factor: float = 2.0           # r_max = factor * r at search start
    primitive_length: float | None = None  # default 4 * grid resolution
    max_steps: int = 500
    r_candidates: tuple = (0.8, 0.9, 1.0, 1.1, 1.2)     # relative to current r
    alpha_candidates: tuple = (0.5, 0.7, 1.0, 1.4, 2.0)  # absolute
    freeze_deformation: bool = False    # rigid-VRB ablation: r, alpha locked
    surface_margin: float = 0.0         # min ESDF clearance of the body surface


def desired_position(dvs: DvsState, p_ic, r_0: float) -> np.ndarray:
    """Deformed world position of a relative target: p_W + p_ic * A * R/R0."""
    return desired_position_batch(dvs, np.asarray(p_ic, dtype=float)[None, :], r_0)[0]


def desired_position_batch(dvs: DvsState, p_ic: np.ndarray, r_0: float) -> np.ndarray:
    if r_0 <= 0:
        raise ValueError("r_0 must be > 0")
    rho = dvs.r / r_0
    out = np.empty_like(np.asarray(p_ic, dtype=float))
    out[:, 0] = dvs.p[0] + p_ic[:, 0] * dvs.alpha * rho
    out[:, 1] = dvs.p[1] + p_ic[:, 1] * rho / dvs.alpha
    out[:, 2] = dvs.p[2] + p_ic[:, 2]
    return out


def _unit_lattice() -> np.ndarray:
    """Cached sample directions on the unit ball, (1024, 3)."""
    rad = (np.arange(_N_RAD) + 0.5) / _N_RAD
    pol = (np.arange(_N_POL) + 0.5) / _N_POL * np.pi
    azi = (np.arange(_N_AZI) + 0.5) / _N_AZI * 2.0 * np.pi
    rr, th, ph = np.meshgrid(rad, pol, azi, indexing="ij")
    x = rr * np.sin(th) * np.cos(ph)
    y = rr * np.sin(th) * np.sin(ph)
    z = rr * np.cos(th)
    return np.column_stack([x.ravel(), y.ravel(), z.ravel()])


_LATTICE = _unit_lattice()


def occupancy_ratio(grid: OccupancyGrid, dvs: DvsState) -> float:
    """Occupied fraction of the deformed ellipsoid on the fixed sample lattice."""
    pts = ellipsoid_samples(dvs)
    return float(grid.occupied_at(pts).mean())


def ellipsoid_samples(dvs: DvsState) -> np.ndarray:
    pts = _LATTICE * (dvs.r * np.array([dvs.alpha, 1.0 / dvs.alpha, 1.0]))
    return pts + dvs.p


def _max_semi_axis(r: float, alpha: float) -> float:
    return r * max(alpha, 1.0 / alpha, 1.0)


def _surface_lattice(n: int = 128) -> np.ndarray:
    """Fibonacci-spiral unit-sphere directions, (n, 3)."""
    k = np.arange(n) + 0.5
    pol = np.arccos(1.0 - 2.0 * k / n)
    azi = np.pi * (1.0 + np.sqrt(5.0)) * k
    return np.column_stack([np.sin(pol) * np.cos(azi),
                            np.sin(pol) * np.sin(azi),
                            np.cos(pol)])


_SURFACE = _surface_lattice()


def surface_clearance(dvs: DvsState, esdf: Esdf) -> float:
    """Minimum ESDF distance over the deformed ellipsoid surface.

    The volumetric occupancy ratio is nearly blind to thin wedge contacts
    (a body corner clipping a wall covers a negligible volume fraction), so
    the search additionally requires the body surface — where the outermost
    agents sit — to keep a clearance margin.
    """
    pts = _SURFACE * (dvs.r * np.array([dvs.alpha, 1.0 / dvs.alpha, 1.0]))
    pts = pts + dvs.p
    d, _ = esdf_query_batch(esdf, pts)
    # surface points past the map edge are free space, not violations: all
    # obstacles live inside the mapped domain, and a strongly stretched body
    # can poke its (agent-free) nose and tail beyond it
    lo = esdf.origin
    hi = esdf.origin + np.asarray(esdf.dims) * esdf.resolution
    inside = np.all((pts >= lo) & (pts <= hi), axis=1)
    if not inside.any():
        return float("inf")
    return float(d[inside].min())


def score_path(prim: Primitive, current: DvsState, goal, grid: OccupancyGrid,
               cfg: SearchConfig, r_0: float, alpha_0: float,
               esdf: Esdf | None = None) -> float:
    """Score S = 1 / (w_r*c_r + w_a*c_a + w_o*c_o + w_e*c_e'), floored at 1e-6."""
    c_r = (prim.r_cand - r_0) ** 2
    c_a = (prim.alpha_cand - alpha_0) ** 2
    c_e = _alignment_cost(prim, current, goal)
    c_o = primitive_occupancy(prim, current, grid, esdf)
    denom = max(cfg.w_r * c_r + cfg.w_alpha * c_a + cfg.w_o * c_o + cfg.w_e * c_e,
                SCORE_FLOOR)
    return 1.0 / denom


def _alignment_cost(prim: Primitive, current: DvsState, goal) -> float:
    """c_e' = 1 - cos(angle between goal direction and primitive direction)."""
    to_goal = np.asarray(goal, dtype=float) - current.p
    to_prim = prim.direction * prim.length
    ng = np.linalg.norm(to_goal)
    if ng < 1e-12:
        return 0.0
    return float(1.0 - to_goal @ to_prim / (ng * prim.length))


def primitive_occupancy(prim: Primitive, current: DvsState,
                        grid: OccupancyGrid, esdf: Esdf | None = None) -> float:
    """Max occupancy ratio over start / mid / end states of the primitive."""
    centers = current.p + prim.direction[None, :] * (
        prim.length * np.array([0.0, 0.5, 1.0])[:, None])
    if esdf is not None:
        d, _ = esdf_query_batch(esdf, centers)
        if np.all(d > _max_semi_axis(prim.r_cand, prim.alpha_cand) + grid.resolution):
            return 0.0
    worst = 0.0
    for c in centers:
        state = DvsState(c, prim.r_cand, prim.alpha_cand)
        worst = max(worst, occupancy_ratio(grid, state))
    return worst


def _primitive_surface_ok(prim: Primitive, current: DvsState, esdf: Esdf,
                          margin: float) -> bool:
    centers = current.p + prim.direction[None, :] * (
        prim.length * np.array([0.0, 0.5, 1.0])[:, None])
    d, _ = esdf_query_batch(esdf, centers)
    if np.all(d > _max_semi_axis(prim.r_cand, prim.alpha_cand) + margin):
        return True
    return all(surface_clearance(DvsState(c, prim.r_cand, prim.alpha_cand),
                                 esdf) >= margin for c in centers)


def _direction_library() -> np.ndarray:
    dirs = []
    for dx in (-1, 0, 1):
        for dy in (-1, 0, 1):
            for dz in (-1, 0, 1):
                if dx == dy == dz == 0:
                    continue
                dirs.append((dx, dy, dz))
    d = np.array(dirs, dtype=float)
    return d / np.linalg.norm(d, axis=1, keepdims=True)


_DIRECTIONS = _direction_library()


def search_path(start: DvsState, goal, grid: OccupancyGrid,
                cfg: SearchConfig | None = None, r_safe: float | None = None,
                esdf: Esdf | None = None) -> DvsPath:
    """Greedy receding primitive search from start toward goal.

    At each step every (direction, r, alpha) candidate is scored; candidates
    with occupancy above c_o_max or revisiting a voxel are discarded and the
    best remaining one is taken (ties broken by primitive index order).
    """
    cfg = cfg or SearchConfig()
    goal = np.asarray(goal, dtype=float)
    r_safe = start.r if r_safe is None else float(r_safe)
    length = cfg.primitive_length or 4.0 * grid.resolution
    r_max = cfg.r_max_factor * start.r
    r_0, alpha_0 = start.r, start.alpha

    if occupancy_ratio(grid, start) >= cfg.c_o_max:
        raise NoPathFoundError("start state is not collision-acceptable")

    waypoints = [start]
    scores = []
    visited = {tuple(np.floor(start.p / grid.resolution).astype(int))}
    current = start
    for _ in range(cfg.max_steps):
        if np.linalg.norm(current.p - goal) < length:
            waypoints.append(DvsState(goal, r_safe, 1.0))
            return DvsPath(tuple(waypoints), tuple(scores))
        best = _select_primitive(current, goal, grid, cfg, length, r_0, alpha_0,
                                 r_safe, r_max, visited, esdf)
        if best is None:
            raise NoPathFoundError("all primitives discarded")
        prim, score = best
        nxt = DvsState(current.p + prim.direction * prim.length,
                       prim.r_cand, prim.alpha_cand)
        visited.add(tuple(np.floor(nxt.p / grid.resolution).astype(int)))
        waypoints.append(nxt)
        scores.append(score)
        current = nxt
    raise NoPathFoundError("max_steps reached")


def _candidate_library(current: DvsState, cfg: SearchConfig, length: float,
                       r_safe: float, r_max: float):
    if cfg.freeze_deformation:
        r_cands = [current.r]
        a_cands = [current.alpha]
    else:
        r_cands = sorted({round(min(max(f * current.r, r_safe), r_max), 12)
                          for f in cfg.r_candidates})
        a_cands = sorted({round(min(max(a, cfg.alpha_min), cfg.alpha_max), 12)
                          for a in (*cfg.alpha_candidates, cfg.alpha_max)})
    prims = []
    for d in _DIRECTIONS:
        for rc in r_cands:
            for ac in a_cands:
                prims.append(Primitive(d, length, rc, ac))
    return prims


def _select_primitive(current, goal, grid, cfg, length, r_0, alpha_0,
                      r_safe, r_max, visited, esdf):
    """Best-scoring admissible primitive.

    Candidates are visited in decreasing deformation+alignment upper-bound
    score; since c_o >= 0 only lowers the true score, evaluation stops once
    the bound drops below the best evaluated score. Equivalent to exhaustive
    scoring with index-order tie-breaks.
    """
    prims = _candidate_library(current, cfg, length, r_safe, r_max)
    partial = np.array([
        cfg.w_r * (p.r_cand - r_0) ** 2
        + cfg.w_alpha * (p.alpha_cand - alpha_0) ** 2
        + cfg.w_e * _alignment_cost(p, current, goal)
        for p in prims
    ])
    upper = 1.0 / np.maximum(partial, SCORE_FLOOR)
    order = np.argsort(-upper, kind="stable")
    best_prim, best_score = None, -np.inf
    for idx in order:
        if upper[idx] <= best_score:
            break
        prim = prims[idx]
        cell = tuple(np.floor((current.p + prim.direction * prim.length)
                              / grid.resolution).astype(int))
        if cell in visited:
            continue
        c_o = primitive_occupancy(prim, current, grid, esdf)
        if c_o > cfg.c_o_max:
            continue
        if (cfg.surface_margin > 0.0 and esdf is not None
                and not _primitive_surface_ok(prim, current, esdf,
                                              cfg.surface_margin)):
            continue
        score = 1.0 / max(partial[idx] + cfg.w_o * c_o, SCORE_FLOOR)
        if score > best_score:
            best_score = score
            best_prim = prim
    if best_prim is None:
        return None
    return best_prim, best_score

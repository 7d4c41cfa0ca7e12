"""Built-in scenario constructors for benchmarks, demos, and tests."""

from __future__ import annotations

from dataclasses import replace

import numpy as np

from .shapes import disk, heart, slash, square
from .sim import Event, Scenario, SimConfig


def hover(n: int = 4, seed: int = 0) -> Scenario:
    cfg = SimConfig(n_agents=n, seed=seed, duration=6.0, pos_jitter=0.0)
    return Scenario(
        name="hover", shape=square(scale=1.2), goal=(0.0, 0.0, 1.0),
        start=(0.0, 0.0, 1.0), config=cfg)


def free_goal(n: int = 6, distance: float = 6.0, seed: int = 0) -> Scenario:
    """Open-space translation toward a goal; no obstacles."""
    cfg = SimConfig(n_agents=n, seed=seed, duration=25.0)
    return Scenario(
        name="free-goal", shape=disk(radius=1.2), goal=(distance, 0.0, 1.5),
        start=(0.0, 0.0, 1.5), config=cfg)


def _wall_boxes(gap_x: float, gap_width: float, y_span: float = 12.0,
                z_lo: float = -2.0, z_hi: float = 5.0,
                thickness: float = 4.0):
    """Two full-height wall segments leaving a vertical slit of gap_width.

    The walls are deliberately deep: the search's collision gate is a
    body-volume occupancy ratio, and a paper-thin wall would occupy a
    negligible fraction of the virtual body even when dead ahead, letting
    half-deformed bodies slip through with their lateral lobes in the wall.
    """
    half = gap_width / 2.0
    return (
        ((gap_x, -y_span, z_lo), (gap_x + thickness, -half, z_hi)),
        ((gap_x, half, z_lo), (gap_x + thickness, y_span, z_hi)),
    )


def gap_benchmark(gap_width: float = 1.6, n: int = 12, seed: int = 0,
                  mode: str = "full") -> Scenario:
    """Narrow-slit traversal: 12-agent disk formation, start 7 m before the
    wall, measurement plane 7 m after it."""
    gap_x = 0.0
    start_x = -7.0
    cfg = SimConfig(
        n_agents=n, seed=seed, mode=mode, duration=40.0,
        r_a=0.15, h=2.4,
        c_o_max=0.02, alpha_max=3.0, clearance=0.30, surface_margin=0.2,
        alpha_candidates=(1.0, 1.4, 2.0, 3.0),
        measurement_x=7.0, settle_after=2.0,
    )
    return Scenario(
        name=f"gap-{gap_width:g}", shape=disk(radius=1.6),
        goal=(7.6, 0.0, 1.5), start=(start_x, 0.0, 1.5),
        boxes=_wall_boxes(gap_x, gap_width),
        bounds=((-12.0, -12.0, -2.0), (12.0, 12.0, 5.0)),
        config=cfg)


def half_width_traversal(seed: int = 0) -> Scenario:
    """Width-3.5 m diagonal formation through a 1.7 m slit (~50% of width).

    The slash keeps nearest-neighbor offsets diagonal, so the horizontal
    stretch that squeezes the formation through the slit grows pair
    distances instead of shrinking them. The run is kept short so the
    body-sphere radius stays close to the formation half-width.
    """
    cfg = SimConfig(
        n_agents=8, seed=seed, duration=60.0,
        r_a=0.15, h=2.0,
        c_o_max=0.02, alpha_max=4.0, clearance=0.30, surface_margin=0.15,
        alpha_candidates=(1.0, 1.4, 2.0, 3.0, 4.0),
        measurement_x=7.0, settle_after=2.0,
    )
    return Scenario(
        name="half-width", shape=slash(width=3.5, run=1.75, thickness=0.5),
        goal=(7.6, 0.0, 1.5), start=(-7.0, 0.0, 1.5),
        boxes=_wall_boxes(0.0, 1.7),
        bounds=((-12.0, -12.0, -2.0), (12.0, 12.0, 5.0)),
        config=cfg)


def join_recovery(seed: int = 0) -> Scenario:
    """4 agents hovering in formation; one joins at t = 2 s."""
    cfg = SimConfig(n_agents=4, seed=seed, duration=12.0, pos_jitter=0.0)
    return Scenario(
        name="join-recovery", shape=square(scale=1.5),
        goal=(0.0, 0.0, 1.5), start=(0.0, 0.0, 1.5),
        events=(Event(t=2.0, kind="join", positions=((4.0, 0.0, 1.5),)),),
        config=cfg)


def heart_events(seed: int = 0) -> Scenario:
    """20-agent heart with join/leave churn (+4, +6, -3, -4) en route."""
    cfg = SimConfig(n_agents=20, seed=seed, duration=45.0)
    far = 8.0
    joins1 = tuple((far, -1.5 + 1.0 * k, 1.5) for k in range(4))
    joins2 = tuple((-far, -2.5 + 1.0 * k, 1.5) for k in range(6))
    return Scenario(
        name="heart-events", shape=heart(scale=2.2),
        goal=(6.0, 0.0, 1.5), start=(0.0, 0.0, 1.5),
        events=(
            Event(t=2.0, kind="join", positions=joins1),
            Event(t=6.0, kind="join", positions=joins2),
            Event(t=10.0, kind="leave", ids=(1, 5, 9)),
            Event(t=14.0, kind="leave", ids=(2, 6, 10, 14)),
        ),
        config=cfg)


_BUILDERS = {
    "hover": hover,
    "free-goal": free_goal,
    "gap": gap_benchmark,
    "half-width": half_width_traversal,
    "join-recovery": join_recovery,
    "heart-events": heart_events,
}


def build(spec: str) -> Scenario:
    """Construct a built-in scenario from 'name' or 'name:key=val,key=val'."""
    name, _, args = spec.partition(":")
    if name not in _BUILDERS:
        raise ValueError(f"unknown scenario '{name}'")
    kwargs = {}
    if args:
        for pair in args.split(","):
            k, _, v = pair.partition("=")
            k = k.strip()
            v = v.strip()
            try:
                kwargs[k] = int(v)
            except ValueError:
                try:
                    kwargs[k] = float(v)
                except ValueError:
                    kwargs[k] = v
    return _BUILDERS[name](**kwargs)


def with_seed(scenario: Scenario, seed: int) -> Scenario:
    return replace(scenario, config=replace(scenario.config, seed=seed))


def names():
    return sorted(_BUILDERS)

"""Deterministic closed-loop swarm simulator.

Single-threaded fixed-step loop: external events are applied at tick
boundaries, the guidance role replans the formation plan / DVS trajectory
when the roster or goal changes, every agent replans at the planning rate
against an immutable snapshot of the neighbors' last published trajectories,
and motion is executed kinematically (agents track their own trajectories
exactly). All telemetry lands in a SimLog that is bit-identical across
re-runs with the same scenario and seed.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np

from .agent_traj import (
    AgentLimits,
    AgentWeights,
    build_formation_ref,
    emergency_stop,
    optimize_agent,
)
from .dvs import (
    DvsPath,
    DvsState,
    NoPathFoundError,
    SearchConfig,
    desired_position_batch,
    search_path,
)
from .dvs_traj import (
    DvsLimits,
    DvsTrajectory,
    DvsWeights,
    InfeasibleGuidanceError,
    optimize_dvs,
)
from .geometry import FormationShape
from .mapping import build_grid, esdf_from_grid, esdf_query_batch
from .paas import run_paas
from .shapes import make_shape


class ScenarioError(ValueError):
    pass


@dataclass(frozen=True)
class Event:
    t: float
    kind: str                   # join | leave | goal
    positions: tuple = ()       # join
    ids: tuple = ()             # leave
    point: tuple = ()           # goal

    def to_json(self) -> dict:
        doc = {"t": self.t, "kind": self.kind}
        if self.kind == "join":
            doc["positions"] = [list(p) for p in self.positions]
        elif self.kind == "leave":
            doc["ids"] = list(self.ids)
        elif self.kind == "goal":
            doc["point"] = list(self.point)
        return doc

    @classmethod
    def from_json(cls, doc: dict) -> "Event":
        kind = doc["kind"]
        if kind not in ("join", "leave", "goal"):
            raise ScenarioError(f"unknown event kind '{kind}'")
        return cls(
            t=float(doc["t"]),
            kind=kind,
            positions=tuple(tuple(map(float, p))
                            for p in doc.get("positions", [])),
            ids=tuple(int(i) for i in doc.get("ids", [])),
            point=tuple(map(float, doc.get("point", []))),
        )


@dataclass(frozen=True)
class SimConfig:
    n_agents: int = 4
    r_a: float = 0.15           # physical agent radius
    h: float = 2.0              # safety margin factor, l_s = 2*h*r_a
    seed: int = 0
    dt: float = 0.02            # 50 Hz physics
    plan_every: int = 10        # 5 Hz planning for DG and agents
    duration: float = 40.0
    mode: str = "full"          # full | rigid-vrb | paas-only
    v_max: float = 2.0
    a_max: float = 7.0
    alpha_min: float = 0.5
    alpha_max: float = 2.0
    c_o_max: float = 0.2
    surface_margin: float = 0.0  # body-surface ESDF margin in the DG search
    alpha_candidates: tuple | None = None   # DG search library override
    resolution: float = 0.1
    pos_jitter: float = 0.05    # seeded jitter on auto-placed agents, m
    d_safe_agent: float | None = None   # default 2.4 * r_a
    clearance: float | None = None      # obstacle penalty margin, default r_a+0.1
    measurement_x: float | None = None  # e_dist measurement plane
    settle_after: float = 3.0   # extra sim time past the measurement crossing
    sustain_window: float = 1.0
    e_dist_pass: float = 0.05
    track_lag: float = 0.0      # first-order tracking lag, 0 = exact tracking
    stop_on_failure: bool = True
    agent_max_iter: int = 40
    dvs_max_iter: int = 120

    def to_json(self) -> dict:
        doc = dict(self.__dict__)
        return doc


@dataclass(frozen=True)
class Scenario:
    name: str
    shape: FormationShape
    goal: tuple
    config: SimConfig
    agents: tuple = ()          # explicit initial positions; empty = auto
    start: tuple = (0.0, 0.0, 0.0)   # initial DVS centroid (auto placement)
    boxes: tuple = ()           # ((min3), (max3)) obstacle boxes
    bounds: tuple = ()          # arena ((min3), (max3)); empty = derived
    events: tuple = ()

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "shape": self.shape.to_json(),
            "goal": list(self.goal),
            "start": list(self.start),
            "agents": [list(p) for p in self.agents],
            "boxes": [[list(a), list(b)] for a, b in self.boxes],
            "bounds": [list(b) for b in self.bounds],
            "events": [e.to_json() for e in self.events],
            "config": self.config.to_json(),
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2)

    @classmethod
    def from_json(cls, doc: dict) -> "Scenario":
        try:
            cfg_doc = dict(doc.get("config", {}))
            known = {f for f in SimConfig.__dataclass_fields__}
            bad = set(cfg_doc) - known
            if bad:
                raise ScenarioError(f"unknown config fields {sorted(bad)}")
            return cls(
                name=str(doc.get("name", "scenario")),
                shape=FormationShape.from_json(doc["shape"]),
                goal=tuple(map(float, doc["goal"])),
                start=tuple(map(float, doc.get("start", (0.0, 0.0, 0.0)))),
                agents=tuple(tuple(map(float, p))
                             for p in doc.get("agents", [])),
                boxes=tuple((tuple(map(float, a)), tuple(map(float, b)))
                            for a, b in doc.get("boxes", [])),
                bounds=tuple(tuple(map(float, b))
                             for b in doc.get("bounds", [])),
                events=tuple(sorted((Event.from_json(e)
                                     for e in doc.get("events", [])),
                                    key=lambda e: e.t)),
                config=SimConfig(**cfg_doc),
            )
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, ScenarioError):
                raise
            raise ScenarioError(f"invalid scenario: {exc}") from exc

    @classmethod
    def load(cls, path) -> "Scenario":
        with open(path) as fh:
            try:
                doc = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ScenarioError(
                    f"scenario JSON parse failure at line {exc.lineno} "
                    f"column {exc.colno}: {exc.msg}") from exc
        return cls.from_json(doc)


_CSV_FIELDS = ["tick", "t", "n", "e_dist", "min_pair", "min_clear",
               "dvs_x", "dvs_y", "dvs_z", "dvs_r", "dvs_alpha",
               "event", "flags", "agents"]


class SimLog:
    """Per-tick telemetry rows plus the final run summary."""

    def __init__(self):
        self.rows = []
        self.summary = {}

    def add(self, **row):
        self.rows.append(row)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=_CSV_FIELDS)
            w.writeheader()
            for row in self.rows:
                w.writerow(row)

    def write_summary(self, path):
        with open(path, "w") as fh:
            json.dump(self.summary, fh, indent=2, sort_keys=True)

    def csv_text(self) -> str:
        import io

        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=_CSV_FIELDS)
        w.writeheader()
        for row in self.rows:
            w.writerow(row)
        return buf.getvalue()


def _fmt(x: float) -> str:
    return repr(float(x))


def formation_error(positions: np.ndarray, dvs_state: DvsState,
                    plan, target_rows: np.ndarray) -> float:
    """Translation-invariant mean residual between actual and desired offsets."""
    des = desired_position_batch(
        dvs_state, plan.relative_targets[target_rows], plan.base_radius)
    res = (positions - positions.mean(axis=0)) - (des - des.mean(axis=0))
    return float(np.sqrt((res ** 2).sum(axis=1)).mean())


def _decimate(path):
    """Merge collinear same-deformation primitive runs into long segments.

    The searched path advances in fixed-length steps; the trajectory
    optimizer only needs waypoints where direction or (r, alpha) changes,
    plus splits of very long straights so the anchor penalty keeps the
    backbone near the corridor.
    """
    wps = list(path.waypoints)
    if len(wps) <= 2:
        return wps
    kept = [wps[0]]
    for i in range(1, len(wps) - 1):
        prev, cur, nxt = kept[-1], wps[i], wps[i + 1]
        d0 = cur.p - prev.p
        d1 = nxt.p - cur.p
        straight = (np.linalg.norm(np.cross(d0, d1)) < 1e-9
                    and d0 @ d1 > 0.0
                    and abs(cur.r - prev.r) < 1e-12
                    and abs(cur.alpha - prev.alpha) < 1e-12
                    and abs(nxt.r - cur.r) < 1e-12
                    and abs(nxt.alpha - cur.alpha) < 1e-12)
        if not straight or np.linalg.norm(d0) >= 2.0:
            kept.append(cur)
    kept.append(wps[-1])
    return kept


class Simulator:
    """Owns all simulation state; stepped by run() or the sim service."""

    def __init__(self, scenario: Scenario):
        self.scn = scenario
        cfg = scenario.config
        self.cfg = cfg
        self.shape = scenario.shape
        self.rng = np.random.default_rng(cfg.seed)
        self.clock = 0.0
        self.tick = 0
        self.goal = np.asarray(scenario.goal, dtype=float)
        self.log = SimLog()
        self.event_notes = []

        bounds = scenario.bounds or self._derived_bounds()
        self.grid = build_grid(list(scenario.boxes), bounds, cfg.resolution)
        self.esdf = esdf_from_grid(self.grid) if len(scenario.boxes) else None

        self.l_s = 2.0 * cfg.h * cfg.r_a
        self.d_safe_agent = cfg.d_safe_agent or 2.4 * cfg.r_a
        self.agent_weights = AgentWeights(
            swarm_clearance=self.d_safe_agent,
            clearance=cfg.clearance or cfg.r_a + 0.1,
            max_iter=cfg.agent_max_iter,
        )
        self.agent_limits = AgentLimits(cfg.v_max, cfg.a_max)
        self.dvs_limits = DvsLimits(
            v_max=cfg.v_max, a_max=cfg.a_max,
            alpha_min=cfg.alpha_min, alpha_max=cfg.alpha_max)
        self.dvs_weights = DvsWeights(max_iter=cfg.dvs_max_iter)
        search_kw = {}
        if cfg.alpha_candidates is not None:
            search_kw["alpha_candidates"] = tuple(cfg.alpha_candidates)
        self.search_cfg = SearchConfig(
            c_o_max=cfg.c_o_max, alpha_min=cfg.alpha_min,
            alpha_max=cfg.alpha_max, surface_margin=cfg.surface_margin,
            freeze_deformation=(cfg.mode == "rigid-vrb"), **search_kw)

        self.plan = None
        self.plan_roster = []       # agent ids in plan row order
        self.dvs_traj = None
        self.dg_dirty = True
        self.roster_dirty = True
        self.planning_fail = False
        self.fail_reason = ""
        self.infeasible_cycles = 0
        self.degraded_agent_plans = 0
        self.crossing_time = None

        self.agents = {}            # id -> (3, 3) state stack
        self.agent_trajs = {}
        self._next_id = 0
        self._init_swarm()

        self.events = list(scenario.events)
        self._event_idx = 0

    # ---------------------------------------------------------------- setup

    def _derived_bounds(self):
        pts = [np.asarray(self.scn.start), np.asarray(self.scn.goal)]
        for p in self.scn.agents:
            pts.append(np.asarray(p))
        for e in self.scn.events:
            for p in e.positions:
                pts.append(np.asarray(p))
            if e.point:
                pts.append(np.asarray(e.point))
        pts = np.array(pts)
        margin = 4.0 * max(self.shape.circumradius(), 1.0)
        return (tuple(pts.min(axis=0) - margin), tuple(pts.max(axis=0) + margin))

    def _init_swarm(self):
        cfg = self.cfg
        start = np.asarray(self.scn.start, dtype=float)
        r_draw = max(self.shape.circumradius(), 1e-6)
        provisional = DvsState(start, r_draw, 1.0)
        if self.scn.agents:
            positions = np.array([p for p in self.scn.agents], dtype=float)
            n = len(positions)
        else:
            n = cfg.n_agents
            plan0 = run_paas(self.shape, n, np.zeros((n, 3)), provisional,
                             cfg.r_a, cfg.h, rng_seed=cfg.seed)
            fly = DvsState(start, plan0.safety_scale, 1.0)
            positions = desired_position_batch(
                fly, plan0.relative_targets, plan0.base_radius)
            jit = self.rng.normal(scale=cfg.pos_jitter, size=(n, 2))
            positions[:, :2] += jit
            provisional = fly
        for p in positions:
            self._add_agent(p)
        # channels [x, y, z, r, ln(alpha)]; alpha = 1 -> 0
        self.dvs_static = np.zeros((3, 5))
        self.dvs_static[0, :3] = start
        self.dvs_static[0, 3] = provisional.r

    def _add_agent(self, position) -> int:
        aid = self._next_id
        self._next_id += 1
        state = np.zeros((3, 3))
        state[0] = np.asarray(position, dtype=float)
        self.agents[aid] = state
        return aid

    # ------------------------------------------------------------- accessors

    @property
    def roster(self):
        return sorted(self.agents)

    def positions(self) -> np.ndarray:
        return np.array([self.agents[a][0] for a in self.roster])

    def dvs_full_state(self) -> np.ndarray:
        """(3, 5) value/velocity/acceleration of the DVS at the current clock."""
        if self.dvs_traj is None:
            return self.dvs_static.copy()
        return self.dvs_traj.full_state(self.clock - self.dvs_traj.stamp)

    def dvs_state(self) -> DvsState:
        v = self.dvs_full_state()[0]
        return DvsState(v[:3], max(v[3], 1e-6), float(np.exp(v[4])))

    # --------------------------------------------------------------- events

    def handle_event(self, event: Event):
        """Validate and apply one roster/goal event. Returns (accepted, reason)."""
        if event.kind == "leave":
            missing = [i for i in event.ids if i not in self.agents]
            if missing:
                return False, f"unknown agent {missing[0]}"
            for i in event.ids:
                del self.agents[i]
                self.agent_trajs.pop(i, None)
            self.roster_dirty = True
            self.dg_dirty = True
            return True, ""
        if event.kind == "join":
            pts = np.array([p for p in event.positions], dtype=float)
            if pts.size == 0:
                return False, "empty join"
            if self.esdf is not None:
                d, _ = esdf_query_batch(self.esdf, pts)
                if np.any(d < self.cfg.r_a):
                    return False, "join position inside obstacle"
            if self.agents:
                cur = self.positions()
                dmin = np.sqrt(((pts[:, None, :] - cur[None, :, :]) ** 2)
                               .sum(axis=2)).min()
                if dmin < 2.0 * self.cfg.r_a:
                    return False, "join position collides with swarm"
            body = self.dvs_state()
            rel = (pts - body.p) / (body.r * np.array(
                [body.alpha, 1.0 / body.alpha, 1.0]))
            if np.any((rel ** 2).sum(axis=1) < 1.0):
                return False, "join position inside the virtual structure"
            for p in pts:
                self._add_agent(p)
            self.roster_dirty = True
            self.dg_dirty = True
            return True, ""
        if event.kind == "goal":
            self.goal = np.asarray(event.point, dtype=float)
            self.dg_dirty = True
            return True, ""
        return False, f"unknown event kind '{event.kind}'"

    def _apply_due_events(self):
        notes = []
        while (self._event_idx < len(self.events)
               and self.events[self._event_idx].t <= self.clock + 1e-9):
            ev = self.events[self._event_idx]
            self._event_idx += 1
            ok, reason = self.handle_event(ev)
            note = ev.kind if ok else f"{ev.kind}-rejected({reason})"
            notes.append(note)
            self.event_notes.append(
                {"t": self.clock, "kind": ev.kind, "accepted": ok,
                 "reason": reason})
        return ";".join(notes)

    # -------------------------------------------------------------- planning

    def _dg_plan(self):
        cfg = self.cfg
        state5 = self.dvs_full_state()
        body = DvsState(state5[0, :3], max(state5[0, 3], 1e-6),
                        float(np.exp(state5[0, 4])))
        if self.roster_dirty or self.plan is None:
            roster = self.roster
            self.plan = run_paas(self.shape, len(roster), self.positions(),
                                 body, cfg.r_a, cfg.h, rng_seed=cfg.seed)
            self.plan_roster = roster
            self.roster_dirty = False
        if cfg.mode == "paas-only":
            self.dg_dirty = False
            return
        r_safe = self.plan.safety_scale
        if cfg.mode == "rigid-vrb":
            body = DvsState(body.p, r_safe, 1.0)
            state5 = state5.copy()
            state5[0, 3], state5[0, 4] = r_safe, 0.0
            state5[1:, 3:] = 0.0
        try:
            path = search_path(body, self.goal, self.grid, self.search_cfg,
                               r_safe=r_safe, esdf=self.esdf)
        except NoPathFoundError as exc:
            self.planning_fail = True
            self.fail_reason = f"planning-fail: {exc}"
            self.dg_dirty = False
            return
        path = DvsPath(tuple(_decimate(path)))
        sigmaf = np.zeros((3, 5))
        sigmaf[0, :3] = self.goal
        sigmaf[0, 3] = r_safe           # ln(alpha) channel ends at 0
        try:
            self.dvs_traj = optimize_dvs(
                path, state5, sigmaf, self.dvs_limits, self.dvs_weights,
                r_0=self.plan.base_radius, stamp=self.clock,
                freeze_deformation=(cfg.mode == "rigid-vrb"))
        except InfeasibleGuidanceError:
            self.infeasible_cycles += 1
            if self.dvs_traj is None:
                self.planning_fail = True
                self.fail_reason = "planning-fail: infeasible guidance"
        self.dg_dirty = False

    def _agent_plan(self):
        w = self.agent_weights
        snapshot = dict(self.agent_trajs)   # last published trajectories
        row = {a: i for i, a in enumerate(self.plan_roster)}
        new_trajs = {}
        for aid in self.roster:
            if aid not in row:
                continue        # joined after the last PAAS; hovers until then
            ref = build_formation_ref(self.dvs_traj, self.plan, row[aid],
                                      self.clock, w.horizon, w.dt_f)
            neighbors = [t for j, t in sorted(snapshot.items()) if j != aid]
            state = self.agents[aid]
            try:
                traj = optimize_agent(state, ref, self.esdf, neighbors, aid,
                                      self.agent_limits, w,
                                      previous=snapshot.get(aid))
            except Exception:
                traj = emergency_stop(state, aid, self.clock, w.horizon)
            if traj.degraded:
                self.degraded_agent_plans += 1
            new_trajs[aid] = traj
        self.agent_trajs = new_trajs

    # -------------------------------------------------------------- stepping

    def step(self):
        """Advance one tick: events -> (planning) -> execution -> telemetry."""
        cfg = self.cfg
        note = self._apply_due_events()
        if (self.tick % cfg.plan_every == 0 and not self.planning_fail):
            if self.dg_dirty or self.dvs_traj is None:
                self._dg_plan()
            if (self.plan is not None and self.dvs_traj is not None
                    and cfg.mode != "paas-only"):
                self._agent_plan()
        self.tick += 1
        self.clock = self.tick * cfg.dt
        for aid in self.roster:
            traj = self.agent_trajs.get(aid)
            if traj is None:
                continue
            target = traj.state_abs(self.clock)
            if cfg.track_lag > 0.0:
                blend = 1.0 - np.exp(-cfg.dt / cfg.track_lag)
                cur = self.agents[aid]
                cur[0] += blend * (target[0] - cur[0])
                cur[1:] = target[1:]
            else:
                self.agents[aid] = target
        self._record(note)

    def _record(self, note: str):
        pos = self.positions()
        n = len(pos)
        if n >= 2:
            d = np.sqrt(((pos[:, None, :] - pos[None, :, :]) ** 2).sum(axis=2))
            np.fill_diagonal(d, np.inf)
            min_pair = float(d.min())
        else:
            min_pair = np.inf
        if self.esdf is not None and n:
            dist, _ = esdf_query_batch(self.esdf, pos)
            min_clear = float(dist.min())
        else:
            min_clear = np.inf
        body = self.dvs_state()
        if self.plan is not None and self.plan_roster == self.roster and n:
            e_dist = formation_error(pos, body, self.plan, self.plan.assignment)
        else:
            e_dist = np.nan
        flags = []
        if self.planning_fail:
            flags.append("planning-fail")
        if min_pair < 2.0 * self.cfg.r_a - 1e-9:
            flags.append("collision-agent")
        if min_clear < self.cfg.r_a:
            flags.append("collision-obstacle")
        if (self.crossing_time is None and self.cfg.measurement_x is not None
                and n and pos[:, 0].mean() >= self.cfg.measurement_x):
            self.crossing_time = self.clock
        if (self.crossing_time is None and self.cfg.measurement_x is None
                and n and np.linalg.norm(pos.mean(axis=0) - self.goal) < 0.3):
            self.crossing_time = self.clock
        self.log.add(
            tick=self.tick, t=_fmt(self.clock), n=n,
            e_dist=_fmt(e_dist), min_pair=_fmt(min_pair),
            min_clear=_fmt(min_clear),
            dvs_x=_fmt(body.p[0]), dvs_y=_fmt(body.p[1]),
            dvs_z=_fmt(body.p[2]), dvs_r=_fmt(body.r),
            dvs_alpha=_fmt(body.alpha),
            event=note, flags=";".join(flags),
            agents=";".join(
                f"{a}:{_fmt(self.agents[a][0][0])}:{_fmt(self.agents[a][0][1])}"
                f":{_fmt(self.agents[a][0][2])}" for a in self.roster),
        )

    # ---------------------------------------------------------------- verdict

    def finished(self) -> bool:
        if self.clock >= self.cfg.duration - 1e-9:
            return True
        if self.cfg.stop_on_failure:
            if self.planning_fail:
                return True
            if self.log.rows and "collision" in self.log.rows[-1]["flags"]:
                return True
        if (self.crossing_time is not None
                and self._event_idx >= len(self.events)
                and self.clock >= self.crossing_time + self.cfg.settle_after):
            return True
        return False

    def verdict(self) -> dict:
        rows = self.log.rows
        collided = any("collision" in r["flags"] for r in rows)
        sustained = False
        if self.crossing_time is not None:
            cfg = self.cfg
            vals = np.array([float(r["e_dist"]) for r in rows
                             if float(r["t"]) >= self.crossing_time - 1e-9])
            good = np.isfinite(vals) & (vals < cfg.e_dist_pass)
            need = max(1, int(round(cfg.sustain_window / cfg.dt)))
            streak = 0
            for v in good:
                streak = streak + 1 if v else 0
                if streak >= need:
                    sustained = True
                    break
        success = (not collided and not self.planning_fail
                   and self.crossing_time is not None and sustained)
        reason = ""
        if self.planning_fail:
            reason = self.fail_reason
        elif collided:
            reason = "collision"
        elif self.crossing_time is None:
            reason = "goal not reached"
        elif not sustained:
            reason = "formation error not settled"
        pairs = [float(r["min_pair"]) for r in rows]
        clears = [float(r["min_clear"]) for r in rows]
        edists = [float(r["e_dist"]) for r in rows
                  if np.isfinite(float(r["e_dist"]))]
        return {
            "success": bool(success),
            "reason": reason,
            "t_f": self.crossing_time,
            "min_pair": min(pairs) if pairs else None,
            "min_clear": min(clears) if clears else None,
            "max_e_dist": max(edists) if edists else None,
            "final_e_dist": edists[-1] if edists else None,
            "ticks": len(rows),
            "infeasible_cycles": self.infeasible_cycles,
            "degraded_agent_plans": self.degraded_agent_plans,
            "events": self.event_notes,
            "seed": self.cfg.seed,
            "mode": self.cfg.mode,
        }


def run(scenario: Scenario):
    """Execute a scenario to completion. Returns (SimLog, verdict dict)."""
    sim = Simulator(scenario)
    while not sim.finished():
        sim.step()
    verdict = sim.verdict()
    sim.log.summary = {"scenario": scenario.name, "verdict": verdict,
                       "config": scenario.config.to_json()}
    return sim.log, verdict

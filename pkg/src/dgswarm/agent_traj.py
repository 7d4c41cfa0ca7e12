"""Distributed per-agent trajectory optimization.

Each agent tracks its spatiotemporal desired position along the DVS
trajectory while penalizing obstacle proximity (ESDF), reciprocal swarm
clearance (downwash-weighted ellipsoidal metric) and dynamic limits. Piece
durations are fixed (horizon / M) so the formation-reference sample times
stay aligned with absolute DVS time.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dvs import desired_position
from .dvs_traj import DvsTrajectory, _cubic_hinge
from .lbfgs import NonFiniteCostError, lbfgs_minimize
from .minco import PiecewisePoly, TrajProblem, solve_coeffs
from .paas import FormationPlan


class NoAssignmentError(ValueError):
    pass


@dataclass(frozen=True)
class AgentLimits:
    v_max: float = 2.0
    a_max: float = 7.0


@dataclass(frozen=True)
class AgentWeights:
    formation: float = 1.0
    obstacle: float = 1e3
    swarm: float = 1e4
    dynamics: float = 1e4
    rho_t: float = 20.0
    horizon: float = 2.0
    dt_f: float = 0.1
    pieces: int = 4
    kappa: int = 16
    max_iter: int = 60
    clearance: float = 0.25         # obstacle clearance d_c
    swarm_clearance: float = 0.4    # inter-agent d_safe (see decisions ledger)
    downwash: float = 2.0           # c_dw vertical inflation


@dataclass(frozen=True)
class AgentTrajectory:
    backbone: PiecewisePoly         # m = 3
    agent_id: int
    epoch: float                    # absolute start time
    degraded: bool = False
    emergency: bool = False

    def position(self, t_abs: float) -> np.ndarray:
        return self.eval_abs(t_abs, 0)

    def eval_abs(self, t_abs: float, order: int) -> np.ndarray:
        t = min(max(t_abs - self.epoch, 0.0), self.backbone.total_time)
        return self.backbone.eval(t, order)

    def state_abs(self, t_abs: float) -> np.ndarray:
        return np.stack([self.eval_abs(t_abs, o) for o in range(3)])

    def positions_batch(self, t_abs: np.ndarray) -> np.ndarray:
        tl = np.clip(np.asarray(t_abs, dtype=float) - self.epoch,
                     0.0, self.backbone.total_time)
        return self.backbone.eval_batch(tl, 0)

    def to_json(self) -> dict:
        return {
            "coeffs": self.backbone.coeffs.tolist(),
            "durations": self.backbone.durations.tolist(),
            "agent_id": self.agent_id,
            "epoch": self.epoch,
        }


@dataclass(frozen=True)
class FormationRef:
    times: np.ndarray               # absolute timestamps, (M_c + 1,)
    positions: np.ndarray           # (M_c + 1, 3)
    end_velocity: np.ndarray        # desired velocity at times[-1]


def _desired_velocity(dvs_traj: DvsTrajectory, t_local: float, target,
                      r_0: float) -> np.ndarray:
    """Time derivative of the deformed desired position at local time."""
    q = dvs_traj.traj.eval(t_local, 0)
    dq = dvs_traj.traj.eval(t_local, 1)
    r, dr, dz = q[3], dq[3], dq[4]
    alpha = float(np.exp(q[4]))
    tx, ty = target[0] / r_0, target[1] / r_0
    return np.array([
        dq[0] + tx * alpha * (dr + r * dz),
        dq[1] + ty * (dr - r * dz) / alpha,
        dq[2],
    ])


def build_formation_ref(dvs_traj: DvsTrajectory, plan: FormationPlan,
                        agent_id: int, t_now: float, horizon: float,
                        dt_f: float) -> FormationRef:
    """Desired-position samples for one agent over [t_now, t_now + horizon]."""
    if agent_id < 0 or agent_id >= len(plan.assignment):
        raise NoAssignmentError(f"agent {agent_id} not in plan")
    target = plan.relative_targets[plan.assignment[agent_id]]
    n = int(round(horizon / dt_f))
    times = t_now + dt_f * np.arange(n + 1)
    span_end = dvs_traj.stamp + dvs_traj.traj.total_time
    pos = np.empty((n + 1, 3))
    for j, t in enumerate(times):
        state = dvs_traj.state_at(min(t, span_end) - dvs_traj.stamp)
        pos[j] = desired_position(state, target, plan.base_radius)
    t_end = min(times[-1], span_end) - dvs_traj.stamp
    vel = (_desired_velocity(dvs_traj, t_end, target, plan.base_radius)
           if times[-1] <= span_end else np.zeros(3))
    return FormationRef(times, pos, vel)


def formation_penalty(points: np.ndarray, ref: FormationRef):
    """Quadratic tracking cost sum_j ||p(j) - p_ref(j)||^2 with gradient."""
    d = points - ref.positions
    return float((d ** 2).sum()), 2.0 * d


def obstacle_penalty_terms(pts: np.ndarray, esdf, d_c: float):
    """Per-point max(0, d_c - esdf)^3 values and position gradients."""
    from .mapping import esdf_query_batch

    dist, grad = esdf_query_batch(esdf, pts)
    pen, dpen = _cubic_hinge(d_c - dist)
    return pen, -dpen[:, None] * grad


def swarm_penalty_terms(pts: np.ndarray, other_pts: np.ndarray,
                        d_safe: float, c_dw: float):
    """Ellipsoidal-metric reciprocal avoidance penalty for aligned samples.

    pts: (K, 3); other_pts: (K, 3) or (N, K, 3) neighbor positions at
    identical timestamps. The z difference is divided by c_dw in the metric,
    so agents need c_dw times more physical vertical distance for the same
    effective separation (downwash makes vertical proximity more dangerous
    than lateral). Returns per-sample penalty (summed over neighbors) and
    position gradients.
    """
    scale = np.array([1.0, 1.0, 1.0 / c_dw])
    d = (pts - other_pts) * scale
    g = d_safe ** 2 - (d ** 2).sum(axis=-1)
    pen, dpen = _cubic_hinge(g)
    grad = -dpen[..., None] * 2.0 * d * scale
    if d.ndim == 3:
        return pen.sum(axis=0), grad.sum(axis=0)
    return pen, grad


class _AgentPenalty:
    def __init__(self, esdf, neighbors, weights: AgentWeights,
                 limits: AgentLimits, t0: float):
        self.esdf = esdf
        self.w = weights
        self.lim = limits
        # piece durations are fixed, so the penalty sample times never move:
        # neighbor trajectories can be sampled once up front
        M, kappa = weights.pieces, weights.kappa
        Ti = weights.horizon / M
        u = np.arange(kappa) / kappa
        t_abs = (t0 + Ti * (np.arange(M)[:, None] + u[None, :])).ravel()
        self.neighbor_pos = (np.stack([nb.positions_batch(t_abs)
                                       for nb in neighbors])
                             if neighbors else None)

    def __call__(self, ctx):
        w = self.w
        pos, vel, acc = ctx["pos"], ctx["vel"], ctx["acc"]
        shp = pos.shape
        flat = pos.reshape(-1, 3)
        P = np.zeros(shp[:2])
        gpos = np.zeros_like(pos)
        gvel = np.zeros_like(vel)
        gacc = np.zeros_like(acc)

        if self.esdf is not None:
            pen, grad = obstacle_penalty_terms(flat, self.esdf, w.clearance)
            P += w.obstacle * pen.reshape(shp[:2])
            gpos += w.obstacle * grad.reshape(shp)

        if self.neighbor_pos is not None:
            pen, grad = swarm_penalty_terms(
                flat, self.neighbor_pos, w.swarm_clearance, w.downwash)
            P += w.swarm * pen.reshape(shp[:2])
            gpos += w.swarm * grad.reshape(shp)

        gv = (vel ** 2).sum(axis=2) - self.lim.v_max ** 2
        pen, dpen = _cubic_hinge(gv)
        P += w.dynamics * pen
        gvel += w.dynamics * dpen[:, :, None] * 2 * vel
        ga = (acc ** 2).sum(axis=2) - self.lim.a_max ** 2
        pen, dpen = _cubic_hinge(ga)
        P += w.dynamics * pen
        gacc += w.dynamics * dpen[:, :, None] * 2 * acc
        return P, gpos, gvel, gacc


def emergency_stop(state: np.ndarray, agent_id: int, epoch: float,
                   horizon: float) -> AgentTrajectory:
    """Minimum-jerk deceleration to rest from the current state."""
    p, v = state[0], state[1]
    stop = p + v * 0.5 * horizon
    sigmaf = np.stack([stop, np.zeros(3), np.zeros(3)])
    traj = solve_coeffs(np.zeros((0, 3)), [horizon], state, sigmaf)
    return AgentTrajectory(traj, agent_id, epoch, degraded=True, emergency=True)


def optimize_agent(state: np.ndarray, ref: FormationRef, esdf, neighbors,
                   agent_id: int, limits: AgentLimits | None = None,
                   weights: AgentWeights | None = None,
                   previous: AgentTrajectory | None = None) -> AgentTrajectory:
    """Replan one agent over the horizon.

    state: (3, 3) current position/velocity/acceleration. neighbors: other
    agents' last broadcast AgentTrajectory objects, evaluated at the same
    absolute timestamps. Returns the best iterate even on degraded
    convergence; an agent starting inside an obstacle gets an emergency-stop
    trajectory with the error flag set.
    """
    limits = limits or AgentLimits()
    weights = weights or AgentWeights()
    M = weights.pieces
    t0 = float(ref.times[0])
    T = np.full(M, weights.horizon / M)
    # terminal state rides the reference's velocity: pinning the horizon end
    # at rest makes the jerk-optimal interior run ahead of an accelerating
    # formation reference
    sigmaf = np.stack([ref.positions[-1], ref.end_velocity, np.zeros(3)])

    penalty = _AgentPenalty(esdf, neighbors, weights, limits, t0)

    def fixed_cost(pts):
        J, g = formation_penalty(pts, ref)
        return weights.formation * J, weights.formation * g

    prob = TrajProblem(
        M=M, m=3, sigma0=state, sigmaf=sigmaf, kappa=weights.kappa,
        w_T=weights.rho_t, sample_penalty=penalty,
        fixed_times=ref.times - t0, fixed_time_cost=fixed_cost,
    )
    tau = np.log(T)

    # warm start: previous solution shifted in time, else straight-line blend
    if previous is not None and not previous.emergency:
        q0 = np.array([previous.position(t0 + T[0] * (i + 1))
                       for i in range(M - 1)])
    else:
        frac = np.arange(1, M)[:, None] / M
        q0 = state[0][None, :] * (1 - frac) + ref.positions[-1][None, :] * frac

    def f(x):
        J, gq, _ = prob.cost(x.reshape(M - 1, 3), tau)
        return J, gq.ravel()

    try:
        res = lbfgs_minimize(f, q0.ravel(), max_iter=weights.max_iter, g_tol=1e-4)
    except NonFiniteCostError:
        return emergency_stop(state, agent_id, t0, weights.horizon)
    traj = prob.build(res.x.reshape(M - 1, 3), T)
    return AgentTrajectory(traj, agent_id, t0, degraded=res.degraded)

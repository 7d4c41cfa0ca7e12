"""Spatiotemporal trajectory optimization of the 5-D DVS state.

The backbone is a piecewise quintic over [p_W, r, zeta] where zeta = ln(alpha):
the log parameterization keeps the deformation positive under the overshoot
that minimum-jerk interpolation of plateaued alpha sequences produces, and
makes the stretch/compress pair symmetric. Dynamic feasibility of every point
inside the deforming body is enforced by velocity/acceleration penalties on
discretized surface contour points; an anchor penalty ties the waypoints
(position and deformation) to the searched path so the guidance can neither
drift into walls nor relax the deformation the corridor requires.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .dvs import DvsPath, DvsState
from .lbfgs import lbfgs_minimize
from .minco import PiecewisePoly, TrajProblem

DIM = 5                     # p_W x/y/z, r, alpha


class InfeasibleGuidanceError(RuntimeError):
    pass


@dataclass(frozen=True)
class DvsLimits:
    v_max: float = 2.0
    a_max: float = 7.0
    alpha_min: float = 0.5
    alpha_max: float = 2.0
    r_floor: float = 0.1


@dataclass(frozen=True)
class DvsWeights:
    dynamics: float = 1e4
    bounds: float = 1e4
    anchor: float = 10.0
    anchor_deform: float = 400.0    # r / ln(alpha) waypoint anchor
    time: float = 20.0
    deform_effort: float = 1.0      # effort weight of r, alpha vs position
    n_theta: int = 4
    n_phi: int = 8
    kappa: int = 16
    max_iter: int = 120


@dataclass(frozen=True)
class DvsTrajectory:
    """Optimized DVS backbone plus its reference radius and planning epoch.

    Polynomial channels are [x, y, z, r, zeta] with zeta = ln(alpha); the
    same convention applies to the (3, 5) boundary stacks exchanged with
    optimize_dvs and full_state.
    """

    traj: PiecewisePoly
    r_0: float
    stamp: float = 0.0

    def state_at(self, t: float) -> DvsState:
        t = min(max(t, 0.0), self.traj.total_time)
        v = self.traj.eval(t, 0)
        return DvsState(v[:3], max(v[3], 1e-6), float(np.exp(v[4])))

    def full_state(self, t: float) -> np.ndarray:
        """(3, 5) value/velocity/acceleration of the 5-D state at clamped t."""
        t = min(max(t, 0.0), self.traj.total_time)
        return self.traj.state(t)

    def to_json(self) -> dict:
        return {
            "coeffs": self.traj.coeffs.tolist(),
            "durations": self.traj.durations.tolist(),
            "r_0": self.r_0,
            "stamp": self.stamp,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json())

    @classmethod
    def from_json(cls, doc: dict) -> "DvsTrajectory":
        return cls(
            PiecewisePoly(np.asarray(doc["coeffs"]), np.asarray(doc["durations"])),
            float(doc["r_0"]),
            float(doc["stamp"]),
        )


def contour_samples(r: float, n_theta: int, n_phi: int) -> np.ndarray:
    """(N_f, 3) polar/azimuth lattice on the sphere of radius r, poles included."""
    if n_theta < 2 or n_phi < 4:
        raise ValueError("need n_theta >= 2 and n_phi >= 4")
    theta = np.pi * np.arange(n_theta + 1) / n_theta
    phi = 2.0 * np.pi * np.arange(n_phi + 1) / n_phi
    th, ph = np.meshgrid(theta, phi, indexing="ij")
    pts = np.column_stack([
        (r * np.sin(th) * np.cos(ph)).ravel(),
        (r * np.sin(th) * np.sin(ph)).ravel(),
        (r * np.cos(th)).ravel(),
    ])
    return pts


def contour_position(state: np.ndarray, base: np.ndarray, r_0: float):
    """Position, velocity and acceleration of a contour point.

    state is the (3, 5) value/velocity/acceleration stack of the DVS at one
    instant with the log-deformation channel zeta = ln(alpha); base is the
    undeformed surface point (sampled at radius r_0). All derivatives are
    analytic chain rules through r(t) and zeta(t): the deformed offsets are
    x0 * u and y0 * w with u = r e^zeta / r_0 and w = r e^-zeta / r_0.
    """
    p, dp, ddp = state[0, :3], state[1, :3], state[2, :3]
    r, dr, ddr = state[0, 3], state[1, 3], state[2, 3]
    z, dz, ddz = state[0, 4], state[1, 4], state[2, 4]
    x0, y0, z0 = base
    ez, emz = np.exp(z), np.exp(-z)
    u = r * ez / r_0
    du = (dr + r * dz) * ez / r_0
    ddu = (ddr + 2 * dr * dz + r * dz ** 2 + r * ddz) * ez / r_0
    w = r * emz / r_0
    dw = (dr - r * dz) * emz / r_0
    ddw = (ddr - 2 * dr * dz + r * dz ** 2 - r * ddz) * emz / r_0
    pos = p + np.array([x0 * u, y0 * w, z0])
    vel = dp + np.array([x0 * du, y0 * dw, 0.0])
    acc = ddp + np.array([x0 * ddu, y0 * ddw, 0.0])
    return pos, vel, acc


def _cubic_hinge(g):
    """max(0, g)^3 and its derivative (C^2 penalty smoothing)."""
    act = np.maximum(g, 0.0)
    return act ** 3, 3.0 * act ** 2


class _ContourPenalty:
    """Vectorized contour speed/accel limits plus r/alpha bound penalties."""

    def __init__(self, base: np.ndarray, r_0: float, limits: DvsLimits,
                 w_dyn: float, w_bnd: float):
        self.x0 = base[:, 0]
        self.y0 = base[:, 1]
        self.r_0 = r_0
        self.lim = limits
        self.w_dyn = w_dyn
        self.w_bnd = w_bnd

    def __call__(self, ctx):
        pos, vel, acc = ctx["pos"], ctx["vel"], ctx["acc"]
        Mk = pos.shape[:2]
        r0 = self.r_0
        r, dr, ddr = pos[..., 3], vel[..., 3], acc[..., 3]
        z, dz, ddz = pos[..., 4], vel[..., 4], acc[..., 4]
        ez = np.exp(np.clip(z, -20.0, 20.0))
        emz = 1.0 / ez

        du = (dr + r * dz) * ez / r0
        ddu = (ddr + 2 * dr * dz + r * dz ** 2 + r * ddz) * ez / r0
        dw = (dr - r * dz) * emz / r0
        ddw = (ddr - 2 * dr * dz + r * dz ** 2 - r * ddz) * emz / r0

        x0 = self.x0[None, None, :]
        y0 = self.y0[None, None, :]
        # contour point velocities/accelerations, shape (M, kappa, N_f)
        vx = vel[..., 0:1] + x0 * du[..., None]
        vy = vel[..., 1:2] + y0 * dw[..., None]
        vz = vel[..., 2:3] + 0.0 * x0
        ax_ = acc[..., 0:1] + x0 * ddu[..., None]
        ay = acc[..., 1:2] + y0 * ddw[..., None]
        az = acc[..., 2:3] + 0.0 * x0

        P = np.zeros(Mk)
        gpos = np.zeros_like(pos)
        gvel = np.zeros_like(vel)
        gacc = np.zeros_like(acc)

        # speed limit
        gv = vx ** 2 + vy ** 2 + vz ** 2 - self.lim.v_max ** 2
        pen, dpen = _cubic_hinge(gv)
        P += self.w_dyn * pen.sum(axis=2)
        cvx = self.w_dyn * dpen * 2 * vx
        cvy = self.w_dyn * dpen * 2 * vy
        cvz = self.w_dyn * dpen * 2 * vz
        gvel[..., 0] += cvx.sum(axis=2)
        gvel[..., 1] += cvy.sum(axis=2)
        gvel[..., 2] += cvz.sum(axis=2)
        Sx = (cvx * x0).sum(axis=2)     # sensitivity to du
        Sy = (cvy * y0).sum(axis=2)     # sensitivity to dw
        gpos[..., 3] += Sx * dz * ez / r0 - Sy * dz * emz / r0
        gpos[..., 4] += Sx * du - Sy * dw
        gvel[..., 3] += Sx * ez / r0 + Sy * emz / r0
        gvel[..., 4] += (Sx * ez - Sy * emz) * r / r0

        # acceleration limit
        ga = ax_ ** 2 + ay ** 2 + az ** 2 - self.lim.a_max ** 2
        pen, dpen = _cubic_hinge(ga)
        P += self.w_dyn * pen.sum(axis=2)
        cax = self.w_dyn * dpen * 2 * ax_
        cay = self.w_dyn * dpen * 2 * ay
        caz = self.w_dyn * dpen * 2 * az
        gacc[..., 0] += cax.sum(axis=2)
        gacc[..., 1] += cay.sum(axis=2)
        gacc[..., 2] += caz.sum(axis=2)
        Ax = (cax * x0).sum(axis=2)     # sensitivity to ddu
        Ay = (cay * y0).sum(axis=2)     # sensitivity to ddw
        gpos[..., 3] += (Ax * (dz ** 2 + ddz) * ez
                         + Ay * (dz ** 2 - ddz) * emz) / r0
        gvel[..., 3] += 2 * dz * (Ax * ez - Ay * emz) / r0
        gacc[..., 3] += (Ax * ez + Ay * emz) / r0
        gpos[..., 4] += Ax * ddu - Ay * ddw
        gvel[..., 4] += 2 * (Ax * (dr + r * dz) * ez
                             + Ay * (-dr + r * dz) * emz) / r0
        gacc[..., 4] += (Ax * ez - Ay * emz) * r / r0

        # r floor and log-deformation bounds
        pen, dpen = _cubic_hinge(self.lim.r_floor - r)
        P += self.w_bnd * pen
        gpos[..., 3] -= self.w_bnd * dpen
        z_lo = np.log(self.lim.alpha_min)
        z_hi = np.log(self.lim.alpha_max)
        pen, dpen = _cubic_hinge(z_lo - z)
        P += self.w_bnd * pen
        gpos[..., 4] -= self.w_bnd * dpen
        pen, dpen = _cubic_hinge(z - z_hi)
        P += self.w_bnd * pen
        gpos[..., 4] += self.w_bnd * dpen
        return P, gpos, gvel, gacc


def optimize_dvs(path: DvsPath, sigma0: np.ndarray, sigmaf: np.ndarray,
                 limits: DvsLimits, weights: DvsWeights | None = None,
                 r_0: float | None = None, stamp: float = 0.0,
                 freeze_deformation: bool = False,
                 warm: tuple | None = None) -> DvsTrajectory:
    """Optimize the DVS trajectory initialized from the searched path.

    sigma0/sigmaf are (3, 5) boundary stacks in [x, y, z, r, ln(alpha)]
    channels. Raises InfeasibleGuidanceError when the optimizer degrades with
    a residual limit violation; callers fall back to the previous trajectory.
    """
    weights = weights or DvsWeights()
    wps = path.positions()
    if len(wps) < 2:
        raise ValueError("path needs >= 2 waypoints")
    M = len(wps) - 1
    r_0 = float(sigma0[0, 3]) if r_0 is None else float(r_0)

    q0 = np.array([[*w.p, w.r, np.log(w.alpha)] for w in path.waypoints[1:-1]],
                  dtype=float).reshape(M - 1, DIM)
    if freeze_deformation and M > 1:
        q0[:, 3] = sigma0[0, 3]
        q0[:, 4] = sigma0[0, 4]
    seg = np.linalg.norm(np.diff(wps, axis=0), axis=1)
    T0 = np.maximum(seg / (0.5 * limits.v_max), 0.15)
    tau0 = np.log(T0)

    base = contour_samples(r_0, weights.n_theta, weights.n_phi)
    penalty = _ContourPenalty(base, r_0, limits, weights.dynamics, weights.bounds)
    # anchor all five dims: positions keep the backbone in the searched
    # corridor, r/zeta keep the deformation schedule the corridor requires
    # (nothing else in the objective knows about obstacles, so smoothing
    # would otherwise relax the deformation straight back into the walls)
    anchor_ref = q0.copy()
    anchor_w = np.array([weights.anchor] * 3 + [weights.anchor_deform] * 2)

    def waypoint_cost(q):
        d = q - anchor_ref
        return float((anchor_w * d ** 2).sum()), 2.0 * anchor_w * d

    prob = TrajProblem(
        M=M, m=DIM, sigma0=sigma0, sigmaf=sigmaf, kappa=weights.kappa,
        w_T=weights.time,
        effort_weights=np.array([1.0, 1.0, 1.0,
                                 weights.deform_effort, weights.deform_effort]),
        sample_penalty=penalty,
        waypoint_cost=waypoint_cost if M > 1 else None,
    )

    qmask = np.ones((max(M - 1, 0), DIM), dtype=bool)
    if freeze_deformation:
        qmask[:, 3:] = False

    def pack(q, tau):
        return np.concatenate([q[qmask], tau])

    def unpack(x):
        q = q0.copy()
        nq = int(qmask.sum())
        q[qmask] = x[:nq]
        return q, x[nq:]

    def f(x):
        q, tau = unpack(x)
        J, gq, gtau = prob.cost(q, tau)
        return J, np.concatenate([gq[qmask], gtau])

    x0 = pack(q0, tau0)
    if warm is not None and len(warm[0]) == len(x0):
        x0 = warm[0]
    res = lbfgs_minimize(f, x0, max_iter=weights.max_iter, g_tol=1e-4)
    q, tau = unpack(res.x)
    traj = prob.build(q, np.exp(tau))
    out = DvsTrajectory(traj, r_0, stamp)

    if res.degraded:
        v_worst, a_worst = contour_peaks(out, weights)
        tol_v, tol_a = 1e-2, 1e-1
        if (v_worst > limits.v_max + 10 * tol_v
                or a_worst > limits.a_max + 10 * tol_a):
            raise InfeasibleGuidanceError(
                f"degraded convergence with violation v={v_worst:.3f} "
                f"a={a_worst:.3f}")
    return out


def contour_peaks(dvs_traj: DvsTrajectory, weights: DvsWeights | None = None,
                  oversample: int = 1):
    """Max contour-point speed and acceleration over the trajectory."""
    weights = weights or DvsWeights()
    base = contour_samples(dvs_traj.r_0, weights.n_theta, weights.n_phi)
    traj = dvs_traj.traj
    r0 = dvs_traj.r_0
    n = weights.kappa * oversample
    ts = []
    t_acc = 0.0
    for i in range(traj.pieces):
        ts.append(t_acc + traj.durations[i] * np.arange(n + 1) / n)
        t_acc += traj.durations[i]
    ts = np.clip(np.concatenate(ts), 0.0, traj.total_time)
    pos = traj.eval_batch(ts, 0)
    vel = traj.eval_batch(ts, 1)
    acc = traj.eval_batch(ts, 2)
    r, dr, ddr = pos[:, 3], vel[:, 3], acc[:, 3]
    z, dz, ddz = pos[:, 4], vel[:, 4], acc[:, 4]
    ez = np.exp(z)
    emz = 1.0 / ez
    du = (dr + r * dz) * ez / r0
    ddu = (ddr + 2 * dr * dz + r * dz ** 2 + r * ddz) * ez / r0
    dw = (dr - r * dz) * emz / r0
    ddw = (ddr - 2 * dr * dz + r * dz ** 2 - r * ddz) * emz / r0
    x0, y0 = base[:, 0][None, :], base[:, 1][None, :]
    vx = vel[:, 0:1] + x0 * du[:, None]
    vy = vel[:, 1:2] + y0 * dw[:, None]
    vz = vel[:, 2:3] + 0.0 * x0
    ax_ = acc[:, 0:1] + x0 * ddu[:, None]
    ay = acc[:, 1:2] + y0 * ddw[:, None]
    az = acc[:, 2:3] + 0.0 * x0
    v_worst = float(np.sqrt((vx ** 2 + vy ** 2 + vz ** 2).max()))
    a_worst = float(np.sqrt((ax_ ** 2 + ay ** 2 + az ** 2).max()))
    return v_worst, a_worst

"""Minimum-control piecewise-quintic trajectory backbone.

A trajectory is parameterized by interior waypoints q and piece durations T
(T_i = exp(tau_i) keeps durations positive). Coefficients come from a banded
linear system enforcing boundary states up to acceleration, waypoint
positions, and derivative continuity through order 4 at joins; among all
interpolants this is the unique minimum integrated-squared-jerk spline.
Gradients of penalized costs propagate to (q, tau) via the adjoint of the
coefficient solve.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import lu_factor, lu_solve

S_ORDER = 3                 # integrator chain order; quintic pieces
NCOEF = 2 * S_ORDER         # coefficients per piece
_FACT = [1.0, 1.0, 2.0, 6.0, 24.0, 120.0]


class InvalidDurationsError(ValueError):
    pass


class OutOfRangeError(ValueError):
    pass


def beta(t: float, order: int) -> np.ndarray:
    """Derivative of the natural basis [1, t, ..., t^5] at t, length 6."""
    out = np.zeros(NCOEF)
    for k in range(order, NCOEF):
        out[k] = _FACT[k] / _FACT[k - order] * t ** (k - order)
    return out


def beta_batch(ts: np.ndarray, order: int) -> np.ndarray:
    """(len(ts), 6) matrix of basis derivatives."""
    out = np.zeros((len(ts), NCOEF))
    for k in range(order, NCOEF):
        out[:, k] = _FACT[k] / _FACT[k - order] * ts ** (k - order)
    return out


@dataclass(frozen=True)
class PiecewisePoly:
    """M-piece degree-5 trajectory in m dimensions."""

    coeffs: np.ndarray          # (M, 6, m)
    durations: np.ndarray       # (M,)

    def __post_init__(self):
        object.__setattr__(self, "coeffs", np.asarray(self.coeffs, dtype=float))
        object.__setattr__(self, "durations",
                           np.asarray(self.durations, dtype=float))

    @property
    def pieces(self) -> int:
        return self.coeffs.shape[0]

    @property
    def dim(self) -> int:
        return self.coeffs.shape[2]

    @property
    def total_time(self) -> float:
        return float(self.durations.sum())

    def locate(self, t: float):
        """Owning piece and local time; right-continuous at joins."""
        if t < -1e-9 or t > self.total_time + 1e-9:
            raise OutOfRangeError(f"t={t} outside [0, {self.total_time}]")
        t = min(max(t, 0.0), self.total_time)
        acc = 0.0
        for i, Ti in enumerate(self.durations[:-1]):
            if t < acc + Ti:
                return i, t - acc
            acc += Ti
        return self.pieces - 1, t - acc

    def eval(self, t: float, order: int = 0) -> np.ndarray:
        i, tl = self.locate(t)
        if order >= NCOEF:
            return np.zeros(self.dim)
        return beta(tl, order) @ self.coeffs[i]

    def state(self, t: float) -> np.ndarray:
        """(3, m) position/velocity/acceleration stack."""
        return np.stack([self.eval(t, o) for o in range(S_ORDER)])

    def eval_batch(self, ts: np.ndarray, order: int = 0) -> np.ndarray:
        ts = np.asarray(ts, dtype=float)
        total = self.total_time
        if np.any(ts < -1e-9) or np.any(ts > total + 1e-9):
            raise OutOfRangeError("batch time outside trajectory span")
        ts = np.clip(ts, 0.0, total)
        edges = np.cumsum(self.durations)
        idx = np.minimum(np.searchsorted(edges, ts, side="right"),
                         self.pieces - 1)
        tl = ts - (edges[idx] - self.durations[idx])
        out = np.empty((len(ts), self.dim))
        if order >= NCOEF:
            out[:] = 0.0
            return out
        for i in np.unique(idx):
            sel = idx == i
            out[sel] = beta_batch(tl[sel], order) @ self.coeffs[i]
        return out


def solve_coeffs(q: np.ndarray, T: np.ndarray, sigma0: np.ndarray,
                 sigmaf: np.ndarray) -> PiecewisePoly:
    """Minimum-jerk quintic spline through waypoints q with durations T.

    q: (M-1, m) interior waypoint positions; sigma0/sigmaf: (3, m) boundary
    position/velocity/acceleration.
    """
    T = np.asarray(T, dtype=float)
    if np.any(T <= 0) or not np.all(np.isfinite(T)):
        raise InvalidDurationsError("piece durations must be positive")
    sigma0 = np.atleast_2d(np.asarray(sigma0, dtype=float))
    sigmaf = np.atleast_2d(np.asarray(sigmaf, dtype=float))
    q = np.asarray(q, dtype=float).reshape(len(T) - 1, sigma0.shape[1])
    A, _ = _build_matrix(T)
    b = _build_rhs(q, sigma0, sigmaf, len(T))
    c = lu_solve(lu_factor(A), b)
    return PiecewisePoly(c.reshape(len(T), NCOEF, -1), T)


def _build_matrix(T: np.ndarray):
    """System matrix and the rows depending on each T_i (for gradients)."""
    M = len(T)
    n = NCOEF * M
    A = np.zeros((n, n))
    t_rows = [[] for _ in range(M)]     # (row, order) pairs per piece duration
    for o in range(S_ORDER):
        A[o, 0:NCOEF] = beta(0.0, o)
    for j in range(M - 1):
        base = S_ORDER + NCOEF * j
        cj, cn = NCOEF * j, NCOEF * (j + 1)
        A[base, cj:cj + NCOEF] = beta(T[j], 0)
        t_rows[j].append((base, 0))
        for d in range(1, 2 * S_ORDER - 1):
            A[base + d, cj:cj + NCOEF] = beta(T[j], d)
            A[base + d, cn:cn + NCOEF] = -beta(0.0, d)
            t_rows[j].append((base + d, d))
        A[base + NCOEF - 1, cn:cn + NCOEF] = beta(0.0, 0)
    last = NCOEF * (M - 1)
    for o in range(S_ORDER):
        row = n - S_ORDER + o
        A[row, last:last + NCOEF] = beta(T[M - 1], o)
        t_rows[M - 1].append((row, o))
    return A, t_rows


def _build_rhs(q, sigma0, sigmaf, M):
    m = sigma0.shape[1]
    b = np.zeros((NCOEF * M, m))
    b[:S_ORDER] = sigma0
    for j in range(M - 1):
        base = S_ORDER + NCOEF * j
        b[base] = q[j]
        b[base + NCOEF - 1] = q[j]
    b[-S_ORDER:] = sigmaf
    return b


def _q_rows(M):
    return [(S_ORDER + NCOEF * j, S_ORDER + NCOEF * j + NCOEF - 1)
            for j in range(M - 1)]


def _effort_gram(Ti: float) -> np.ndarray:
    """Gram matrix of the jerk basis over [0, Ti] for coefficients 3..5."""
    f = np.array([6.0, 24.0, 60.0])
    Q = np.empty((3, 3))
    for a in range(3):
        for b_ in range(3):
            p = a + b_ + 1
            Q[a, b_] = f[a] * f[b_] * Ti ** p / p
    return Q


@dataclass
class TrajProblem:
    """Penalty-transcribed trajectory optimization over (q, tau).

    sample_penalty(ctx) is called with dict arrays pos/vel/acc of shape
    (M, kappa, m) plus piece times, and returns (P, gpos, gvel, gacc) where
    P is (M, kappa) and gradients match the input shapes. fixed_time_cost
    evaluates extra quadratic-style terms at fixed absolute times, and
    waypoint_cost acts on q directly.
    """

    M: int
    m: int
    sigma0: np.ndarray
    sigmaf: np.ndarray
    kappa: int = 16
    w_T: float = 0.0
    effort_weights: np.ndarray | None = None
    sample_penalty: object = None
    fixed_times: np.ndarray | None = None
    fixed_time_cost: object = None      # fn(pos (K, m)) -> (J, gpos)
    waypoint_cost: object = None        # fn(q) -> (J, gq)

    def __post_init__(self):
        self.sigma0 = np.atleast_2d(np.asarray(self.sigma0, dtype=float))
        self.sigmaf = np.atleast_2d(np.asarray(self.sigmaf, dtype=float))
        if self.effort_weights is None:
            self.effort_weights = np.ones(self.m)
        self.effort_weights = np.asarray(self.effort_weights, dtype=float)

    def build(self, q, T) -> PiecewisePoly:
        return solve_coeffs(q, T, self.sigma0, self.sigmaf)

    def _prepare(self, T: np.ndarray) -> dict:
        """Duration-dependent structure, cached: with fixed durations (the
        per-agent problems) everything here is built exactly once."""
        key = T.tobytes()
        if getattr(self, "_prep_key", None) == key:
            return self._prep
        M, kappa = self.M, self.kappa
        A, t_rows = _build_matrix(T)
        prep = {"lu": lu_factor(A)}
        prep["gram"] = np.array([_effort_gram(T[i]) for i in range(M)])
        prep["beta3_end"] = np.array([beta(T[i], 3) for i in range(M)])
        prep["trow_beta"] = [
            (np.array([row for row, _ in t_rows[i]], dtype=int),
             np.array([beta(T[i], order + 1) for _, order in t_rows[i]]))
            for i in range(M)]
        if self.sample_penalty is not None:
            u = np.arange(kappa) / kappa
            tloc = u[None, :] * T[:, None]
            B = np.zeros((4, M, kappa, NCOEF))
            for i in range(M):
                for o in range(4):
                    B[o, i] = beta_batch(tloc[i], o)
            prep["u"], prep["tloc"], prep["B"] = u, tloc, B
        if self.fixed_time_cost is not None and self.fixed_times is not None:
            total = float(T.sum())
            edges = np.cumsum(T)
            ts_raw = np.asarray(self.fixed_times, dtype=float)
            ts = np.minimum(ts_raw, total)
            idx = np.minimum(np.searchsorted(edges, ts, side="right"), M - 1)
            tl = ts - (edges[idx] - T[idx])
            clamped = ts_raw >= total - 1e-12
            prep["fix"] = (idx, tl, clamped,
                           beta_batch(tl, 0), beta_batch(tl, 1))
        self._prep_key, self._prep = key, prep
        return prep

    def cost(self, q: np.ndarray, tau: np.ndarray):
        """Return (J, dJ/dq, dJ/dtau) with analytic adjoint gradients."""
        M, m, kappa = self.M, self.m, self.kappa
        T = np.exp(np.asarray(tau, dtype=float))
        q = np.asarray(q, dtype=float).reshape(max(M - 1, 0), m)
        prep = self._prepare(T)
        lu = prep["lu"]
        b = _build_rhs(q, self.sigma0, self.sigmaf, M)
        c = lu_solve(lu, b).reshape(M, NCOEF, m)

        J = 0.0
        G = np.zeros_like(c)            # dJ/dc
        gT = np.zeros(M)                # explicit dJ/dT
        gq = np.zeros((max(M - 1, 0), m))
        w = self.effort_weights

        # control effort
        ch = c[:, S_ORDER:]
        Qc = np.einsum("mab,mbd->mad", prep["gram"], ch)
        J += float(np.einsum("mad,mad,d->", ch, Qc, w))
        G[:, S_ORDER:] += 2.0 * Qc * w[None, None, :]
        jerk_end = np.einsum("mc,mcd->md", prep["beta3_end"], c)
        gT += jerk_end ** 2 @ w

        # time regularization
        J += self.w_T * float(T.sum())
        gT += self.w_T

        # sampled penalties (left-Riemann, kappa per piece)
        if self.sample_penalty is not None:
            u, tloc, B = prep["u"], prep["tloc"], prep["B"]
            pos = np.einsum("mkc,mcd->mkd", B[0], c)
            vel = np.einsum("mkc,mcd->mkd", B[1], c)
            acc = np.einsum("mkc,mcd->mkd", B[2], c)
            jrk = np.einsum("mkc,mcd->mkd", B[3], c)
            P, gpos, gvel, gacc = self.sample_penalty(
                {"pos": pos, "vel": vel, "acc": acc, "t": tloc})
            wq = (T / kappa)[:, None]
            J += float((wq * P).sum())
            G += np.einsum("mkc,mkd->mcd", B[0], gpos * wq[:, :, None])
            G += np.einsum("mkc,mkd->mcd", B[1], gvel * wq[:, :, None])
            G += np.einsum("mkc,mkd->mcd", B[2], gacc * wq[:, :, None])
            gT += P.sum(axis=1) / kappa
            chain = (np.einsum("mkd,mkd->mk", gpos, vel)
                     + np.einsum("mkd,mkd->mk", gvel, acc)
                     + np.einsum("mkd,mkd->mk", gacc, jrk))
            gT += (T / kappa) * (chain * u[None, :]).sum(axis=1)

        # extra costs at fixed absolute times
        if self.fixed_time_cost is not None and self.fixed_times is not None:
            idx, tl, clamped, Bf0, Bf1 = prep["fix"]
            pos_f = np.einsum("kc,kcd->kd", Bf0, c[idx])
            Jf, gpos_f = self.fixed_time_cost(pos_f)
            J += float(Jf)
            dv = np.einsum("kd,kc,kcd->k", gpos_f, Bf1, c[idx])
            np.add.at(G, idx, Bf0[:, :, None] * gpos_f[:, None, :])
            # clamped samples ride the final duration; for interior samples
            # every earlier piece shifts the local evaluation time
            np.add.at(gT, idx[clamped], dv[clamped])
            per_piece = np.bincount(idx[~clamped], weights=dv[~clamped],
                                    minlength=M)
            gT -= np.concatenate([np.cumsum(per_piece[::-1])[::-1][1:], [0.0]])

        # direct waypoint costs
        if self.waypoint_cost is not None and M > 1:
            Jq, gq_d = self.waypoint_cost(q)
            J += float(Jq)
            gq += gq_d

        # adjoint back-propagation through the coefficient solve
        lam = lu_solve(lu, G.reshape(NCOEF * M, m), trans=1)
        for j, (ra, rb) in enumerate(_q_rows(M)):
            gq[j] += lam[ra] + lam[rb]
        for i in range(M):
            rows, brows = prep["trow_beta"][i]
            gT[i] -= float(np.einsum("rm,rm->", lam[rows], brows @ c[i]))

        if not np.isfinite(J):
            from .lbfgs import NonFiniteCostError
            raise NonFiniteCostError("non-finite trajectory cost")
        return J, gq, gT * T

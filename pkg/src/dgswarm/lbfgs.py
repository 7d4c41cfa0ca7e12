"""Limited-memory BFGS with a weak-Wolfe bisection line search."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

C1 = 1e-4
C2 = 0.9
MAX_LINE_TRIALS = 40


class NonFiniteCostError(RuntimeError):
    pass


@dataclass
class LbfgsResult:
    x: np.ndarray
    f: float
    g: np.ndarray
    iterations: int
    converged: bool
    degraded: bool          # line-search failure; best-so-far returned


def lbfgs_minimize(f, x0, memory: int = 8, max_iter: int = 200,
                   g_tol: float = 1e-5, f_rtol: float = 1e-8) -> LbfgsResult:
    """Minimize f(x) -> (value, gradient) starting from x0.

    Terminates on the max-norm gradient test, relative cost decrease, the
    iteration cap, or a failed line search (returning the best iterate with
    the degraded flag set). The returned cost never exceeds f(x0).
    """
    x = np.asarray(x0, dtype=float).copy()
    fx, g = f(x)
    if not np.isfinite(fx):
        raise NonFiniteCostError("objective not finite at x0")
    s_hist, y_hist, rho_hist = [], [], []
    degraded = False
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        if np.max(np.abs(g)) < g_tol:
            converged = True
            break
        d = -_two_loop(g, s_hist, y_hist, rho_hist)
        if d @ g >= 0.0:        # not a descent direction: reset memory
            s_hist, y_hist, rho_hist = [], [], []
            d = -g
        step0 = 1.0 if s_hist else min(1.0, 1.0 / max(np.max(np.abs(g)), 1e-12))
        ok, t, fx_new, g_new = _weak_wolfe(f, x, fx, g, d, step0)
        if not ok:
            degraded = True
            break
        x_new = x + t * d
        s = x_new - x
        y = g_new - g
        if s @ y > 1e-12 * np.linalg.norm(s) * np.linalg.norm(y):
            s_hist.append(s)
            y_hist.append(y)
            rho_hist.append(1.0 / (s @ y))
            if len(s_hist) > memory:
                s_hist.pop(0)
                y_hist.pop(0)
                rho_hist.pop(0)
        rel_drop = (fx - fx_new) / max(abs(fx), 1.0)
        x, fx, g = x_new, fx_new, g_new
        if 0.0 <= rel_drop < f_rtol:
            converged = True
            break
    return LbfgsResult(x, fx, g, it, converged, degraded)


def _two_loop(g, s_hist, y_hist, rho_hist):
    q = g.copy()
    alphas = []
    for s, y, rho in zip(reversed(s_hist), reversed(y_hist), reversed(rho_hist)):
        a = rho * (s @ q)
        alphas.append(a)
        q -= a * y
    if y_hist:
        y = y_hist[-1]
        q *= (s_hist[-1] @ y) / max(y @ y, 1e-300)
    for (s, y, rho), a in zip(zip(s_hist, y_hist, rho_hist), reversed(alphas)):
        b = rho * (y @ q)
        q += (a - b) * s
    return q


def _weak_wolfe(f, x, fx, g, d, t):
    """Lewis-Overton bisection satisfying Armijo (C1) and curvature (C2)."""
    g0d = g @ d
    lo, hi = 0.0, np.inf
    for _ in range(MAX_LINE_TRIALS):
        try:
            fx_new, g_new = f(x + t * d)
        except NonFiniteCostError:
            fx_new, g_new = np.inf, None
        if not np.isfinite(fx_new) or fx_new > fx + C1 * t * g0d:
            hi = t
            t = 0.5 * (lo + hi)
            continue
        if g_new @ d < C2 * g0d:
            lo = t
            t = 2.0 * t if np.isinf(hi) else 0.5 * (lo + hi)
            continue
        return True, t, fx_new, g_new
    return False, t, fx, g

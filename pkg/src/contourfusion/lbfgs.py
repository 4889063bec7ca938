"""Limited-memory BFGS with a strong-Wolfe line search.

Two-loop recursion for the search direction; bracketing plus zoom with
safeguarded cubic interpolation for the step length. An optional diagonal
scaling ``x = scale * y`` is applied by optimising over ``y``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class LbfgsResult:
    x: np.ndarray
    f: float
    g: np.ndarray
    n_iter: int
    n_eval: int
    status: str  # "converged" | "max_iterations" | "line_search_failed"
    trace: list[float] = field(default_factory=list)

    @property
    def success(self) -> bool:
        return self.status == "converged"


def two_loop(g, s_hist, y_hist):
    """Apply the inverse-Hessian approximation to ``g``."""
    q = g.copy()
    rhos = [1.0 / float(y @ s) for s, y in zip(s_hist, y_hist)]
    alphas = []
    for s, y, rho in zip(reversed(s_hist), reversed(y_hist), reversed(rhos)):
        a = rho * float(s @ q)
        alphas.append(a)
        q -= a * y
    if s_hist:
        s, y = s_hist[-1], y_hist[-1]
        q *= float(s @ y) / float(y @ y)
    for (s, y, rho), a in zip(zip(s_hist, y_hist, rhos), reversed(alphas)):
        b = rho * float(y @ q)
        q += (a - b) * s
    return q


def _cubic_min(a, fa, da, b, fb, db):
    """Minimiser of the cubic through two points with slopes; ``None`` if undefined."""
    d1 = da + db - 3.0 * (fa - fb) / (a - b)
    disc = d1 * d1 - da * db
    if disc < 0:
        return None
    d2 = np.sign(b - a) * np.sqrt(disc)
    denom = db - da + 2.0 * d2
    if denom == 0:
        return None
    return b - (b - a) * (db + d2 - d1) / denom


def _interpolate(lo, hi):
    a, fa, da = lo[:3]
    b, fb, db = hi[:3]
    t = _cubic_min(a, fa, da, b, fb, db)
    left, right = min(a, b), max(a, b)
    width = right - left
    if t is None or not np.isfinite(t) or t < left + 0.1 * width or t > right - 0.1 * width:
        t = 0.5 * (a + b)
    return t


def strong_wolfe(phi, f0, d0, a1, c1=1e-4, c2=0.9, a_max=1e10, max_evals=30):
    """Step length satisfying the strong Wolfe conditions.

    ``phi(a)`` returns ``(f, slope, payload)``. Returns ``(a, f, payload)``
    or ``None`` if no step with sufficient decrease was found.
    """
    prev = (0.0, f0, d0, None)
    a = a1
    for i in range(max_evals):
        f, d, payload = phi(a)
        if not np.isfinite(f):
            # overshoot into a non-finite region: shrink towards the last good step
            a = 0.5 * (prev[0] + a)
            continue
        cur = (a, f, d, payload)
        if f > f0 + c1 * a * d0 or (i > 0 and f >= prev[1]):
            return _zoom(phi, prev, cur, f0, d0, c1, c2, max_evals - i - 1)
        if abs(d) <= -c2 * d0:
            return a, f, payload
        if d >= 0:
            return _zoom(phi, cur, prev, f0, d0, c1, c2, max_evals - i - 1)
        prev = cur
        a = min(2.0 * a, a_max)
    return None


def _zoom(phi, lo, hi, f0, d0, c1, c2, budget):
    """``lo`` always satisfies sufficient decrease and has the lowest value seen."""
    for _ in range(max(budget, 0)):
        if abs(hi[0] - lo[0]) < 1e-14 * max(1.0, abs(lo[0])):
            break
        a = _interpolate(lo, hi)
        f, d, payload = phi(a)
        cur = (a, f, d, payload)
        if not np.isfinite(f) or f > f0 + c1 * a * d0 or f >= lo[1]:
            hi = cur
            continue
        if abs(d) <= -c2 * d0:
            return a, f, payload
        if d * (hi[0] - lo[0]) >= 0:
            hi = lo
        lo = cur
    # curvature condition not met: fall back to the best decrease point, if any
    if lo[0] > 0:
        return lo[0], lo[1], lo[3]
    return None


def minimize(fun, x0, scale=None, memory: int = 10, gtol: float = 1e-5, max_iter: int = 500,
             c1: float = 1e-4, c2: float = 0.9, callback=None) -> LbfgsResult:
    """Minimise ``fun(x) -> (f, grad)``.

    Stops when ``max|grad| < gtol`` (tested before the first step), after
    ``max_iter`` iterations, or when the line search fails; the last case
    returns the best point found with status ``"line_search_failed"``.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    scale = np.ones_like(x0) if scale is None else np.asarray(scale, dtype=np.float64)
    n_eval = 0

    def fy(y):
        nonlocal n_eval
        n_eval += 1
        f, g = fun(scale * y)
        return float(f), scale * np.asarray(g, dtype=np.float64), g

    y = x0 / scale
    f, gy, gx = fy(y)
    trace = [f]
    s_hist, y_hist = [], []
    status = "max_iterations"
    it = 0
    while True:
        if np.max(np.abs(gx), initial=0.0) < gtol:
            status = "converged"
            break
        if it >= max_iter:
            break
        d = -two_loop(gy, s_hist, y_hist)
        slope = float(gy @ d)
        if slope >= 0:
            # lost descent: restart from steepest descent
            s_hist.clear()
            y_hist.clear()
            d = -gy
            slope = float(gy @ d)
        a1 = 1.0 if s_hist else min(1.0, 1.0 / max(np.max(np.abs(gy)), 1e-300))

        def phi(a, y=y, d=d):
            fa, ga, gxa = fy(y + a * d)
            return fa, float(ga @ d), (ga, gxa)

        found = strong_wolfe(phi, f, slope, a1, c1, c2)
        if found is None:
            status = "line_search_failed"
            break
        a, f_new, (gy_new, gx_new) = found
        s = a * d
        yk = gy_new - gy
        if float(s @ yk) > 1e-12 * float(np.linalg.norm(s) * np.linalg.norm(yk)):
            s_hist.append(s)
            y_hist.append(yk)
            if len(s_hist) > memory:
                s_hist.pop(0)
                y_hist.pop(0)
        y = y + s
        f, gy, gx = f_new, gy_new, gx_new
        trace.append(f)
        it += 1
        if callback is not None:
            callback(it, scale * y, f)
    return LbfgsResult(scale * y, f, gx, it, n_eval, status, trace)

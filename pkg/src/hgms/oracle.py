"""Brute-force ground truth: dense chart scans, finite differences, kink and Hölder probes.

Nothing here is clever. Everything here is independent of the CG/sampling path
it is used to check.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import stats

from .core import InvalidConfig, OracleDisagreement, check_vector

__all__ = [
    "GridSpec",
    "KinkReport",
    "SlopeFit",
    "HolderReport",
    "dense_F",
    "fd_gradF",
    "dense_hessian",
    "check_hvp",
    "check_mixed",
    "kink_probe",
    "holder_probe",
    "fit_loglog",
]

_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0
_DEFAULT_POINTS = {1: 100_000, 2: 1_000_000, 3: 1_000_000}


@dataclass(frozen=True)
class GridSpec:
    lo: float
    hi: float
    points: int

    def __post_init__(self):
        if not self.lo < self.hi:
            raise InvalidConfig("grid needs lo < hi", name="lo", value=self.lo)
        if self.points < 2:
            raise InvalidConfig("grid needs >= 2 points", name="points", value=self.points)

    def values(self) -> np.ndarray:
        return np.linspace(self.lo, self.hi, self.points)


@dataclass
class SlopeFit:
    slope: float
    intercept: float
    r_squared: float
    n: int
    slope_stderr: float = float("nan")

    def to_dict(self) -> dict:
        return {"slope": self.slope, "intercept": self.intercept, "r_squared": self.r_squared,
                "n": self.n, "slope_stderr": self.slope_stderr}


@dataclass
class KinkReport:
    theta: np.ndarray
    F: np.ndarray
    d_minus: np.ndarray
    d_plus: np.ndarray
    candidates: np.ndarray
    kinks: np.ndarray
    threshold: float
    floor: float
    jump_ratios: list = field(default_factory=list)

    @property
    def flagged_cells(self) -> np.ndarray:
        """Grid indices of the nearest grid point to each certified kink."""
        return np.array([int(np.argmin(np.abs(self.theta - k))) for k in self.kinks], dtype=int)


@dataclass
class HolderReport:
    theta_k: float
    grad_at_kink: float
    radii: np.ndarray
    grad: np.ndarray
    log_ratio: np.ndarray
    holder_quotient: np.ndarray
    alpha: float

    @property
    def log_ratio_spread(self) -> float:
        return float(self.log_ratio.max() / self.log_ratio.min())

    @property
    def holder_growth(self) -> float:
        """Quotient at the smallest radius over the quotient at the largest."""
        order = np.argsort(self.radii)
        return float(self.holder_quotient[order[0]] / self.holder_quotient[order[-1]])


def _golden(fn, lo, hi, iters):
    c = hi - _GOLDEN * (hi - lo)
    d = lo + _GOLDEN * (hi - lo)
    fc, fd = fn(c), fn(d)
    for _ in range(iters):
        if fc <= fd:
            hi, d, fd = d, c, fc
            c = hi - _GOLDEN * (hi - lo)
            fc = fn(c)
        else:
            lo, c, fc = c, d, fd
            d = lo + _GOLDEN * (hi - lo)
            fd = fn(d)
    return (c, fc) if fc <= fd else (d, fd)


def dense_F(ap, theta, resolution: Optional[int] = None, refine_iters: int = 20):
    """Minimize ``f(theta, .)`` over a dense chart grid, then refine by golden section.

    Returns ``(F, u)`` with ``u`` the chart coordinates of the minimizer.
    """
    theta = check_vector(theta, ap.dims.m, "theta")
    p = ap.problem
    k = ap.k
    if k == 0:
        x = ap.chart(np.zeros((0,)), theta)
        return float(p.f(theta, x)), np.zeros(0)
    if k >= 4:
        raise InvalidConfig("dense chart scan refuses k >= 4", name="k", value=k)
    total = resolution or _DEFAULT_POINTS[k]
    per_axis = max(2, int(round(total ** (1.0 / k))))
    axes = [np.linspace(lo, hi, per_axis, endpoint=not periodic) for lo, hi, periodic in ap.chart_domain]
    mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, k)
    best_val, best_u = math.inf, None
    for start in range(0, len(mesh), 250_000):
        chunk = mesh[start:start + 250_000]
        vals = p.f_batch(theta, ap.chart(chunk, theta))
        i = int(np.argmin(vals))
        if vals[i] < best_val:
            best_val, best_u = float(vals[i]), chunk[i].copy()

    u = best_u.copy()
    val = best_val
    sweeps = 1 if k == 1 else 3
    for _ in range(sweeps):
        for i, ax in enumerate(axes):
            h = ax[1] - ax[0]
            lo, hi = u[i] - h, u[i] + h

            def along(t, i=i):
                w = u.copy()
                w[i] = t
                return float(p.f(theta, ap.chart(w, theta)))

            t, ft = _golden(along, lo, hi, refine_iters)
            # the grid point can beat the refinement when both sit at round-off level
            if ft < val:
                u[i], val = t, ft
    return val, u


def fd_gradF(ap, theta, step: float = 1e-5, rtol: float = 1e-5, floor: float = 1e-10,
             resolution: Optional[int] = None, source: str = "dense"):
    """Central differences of ``F`` with one Richardson halving.

    Raises :class:`OracleDisagreement` when the two step sizes disagree by
    more than ``10 * rtol`` (relative, with absolute ``floor``), which is what
    happens at a kink. Returns the Richardson-extrapolated estimate.
    """
    theta = check_vector(theta, ap.dims.m, "theta")
    if source == "dense":
        F = lambda th: dense_F(ap, th, resolution)[0]
    elif source == "exact":
        F = ap.F_exact
    else:
        raise InvalidConfig("source must be 'dense' or 'exact'", name="source", value=source)
    feas = ap.problem.feasible
    grad = np.empty(ap.dims.m)
    for i in range(ap.dims.m):
        e = np.zeros(ap.dims.m)
        e[i] = 1.0
        for sgn in (1, -1):
            if not feas.contains(theta + sgn * step * e):
                raise InvalidConfig("finite-difference stencil leaves Theta", name="theta",
                                    value=(theta + sgn * step * e).tolist())
        d1 = (F(theta + step * e) - F(theta - step * e)) / (2 * step)
        h2 = step / 2
        d2 = (F(theta + h2 * e) - F(theta - h2 * e)) / (2 * h2)
        if abs(d1 - d2) > 10 * rtol * max(abs(d2), floor):
            raise OracleDisagreement(
                "Richardson check failed (kink or unresolved grid)",
                name="theta", value=theta.tolist(), coord=i, d_step=d1, d_half=d2,
            )
        grad[i] = (4 * d2 - d1) / 3
    return grad


def dense_hessian(p, theta, x, step: float = 1e-4):
    """Lower Hessian by central differences of ``grad_x g``, Richardson-extrapolated, symmetrized."""
    d = p.dims.d
    if d > 64:
        raise InvalidConfig("dense Hessian refuses d > 64", name="d", value=d)
    theta = check_vector(theta, p.dims.m, "theta")
    x = check_vector(x, d, "x")

    def central(h):
        cols = []
        for e in np.eye(d):
            gp = np.asarray(p.grad_x_g(theta, x + h * e), dtype=float)
            gm = np.asarray(p.grad_x_g(theta, x - h * e), dtype=float)
            cols.append((gp - gm) / (2 * h))
        return np.column_stack(cols)

    H = (4 * central(step / 2) - central(step)) / 3
    return 0.5 * (H + H.T)


def check_hvp(p, probes: int = 10, seed: int = 0, step: float = 1e-5, rtol: float = 1e-5) -> float:
    """Compare ``hvp`` against directional differences of ``grad_x g`` at random points."""
    rng = np.random.default_rng(seed)
    m, d = p.dims.m, p.dims.d
    worst = 0.0
    for _ in range(probes):
        theta, x, v = rng.uniform(-1, 1, m), rng.uniform(-1, 1, d), rng.uniform(-1, 1, d)
        fd = (np.asarray(p.grad_x_g(theta, x + step * v)) - np.asarray(p.grad_x_g(theta, x - step * v))) / (2 * step)
        hv = np.asarray(p.hvp(theta, x, v), dtype=float)
        err = float(np.linalg.norm(hv - fd) / max(np.linalg.norm(fd), 1.0))
        worst = max(worst, err)
        if err > rtol:
            raise OracleDisagreement("hvp disagrees with finite differences", name="hvp", value=err,
                                     theta=theta.tolist(), x=x.tolist())
    return worst


def check_mixed(p, probes: int = 10, seed: int = 0, step: float = 1e-5, rtol: float = 1e-5,
                points=None) -> float:
    """Compare ``mixed(v)`` against theta-differences of ``<grad_x g, v>``.

    ``points`` may supply explicit ``(theta, x)`` pairs; otherwise they are
    drawn from ``[-1, 1]``.
    """
    rng = np.random.default_rng(seed)
    m, d = p.dims.m, p.dims.d
    if points is None:
        points = [(rng.uniform(-1, 1, m), rng.uniform(-1, 1, d)) for _ in range(probes)]
    worst = 0.0
    for theta, x in points:
        theta, x = np.asarray(theta, dtype=float), np.asarray(x, dtype=float)
        v = rng.uniform(-1, 1, d)
        fd = np.empty(m)
        for i in range(m):
            e = np.zeros(m)
            e[i] = step
            fd[i] = (np.asarray(p.grad_x_g(theta + e, x)) @ v - np.asarray(p.grad_x_g(theta - e, x)) @ v) / (2 * step)
        mv = np.asarray(p.mixed(theta, x, v), dtype=float)
        err = float(np.linalg.norm(mv - fd) / max(np.linalg.norm(fd), 1e-12))
        worst = max(worst, err)
        if err > rtol:
            raise OracleDisagreement("mixed action disagrees with finite differences", name="mixed", value=err)
    return worst


def _slope_jump(F, center, s, reach, half=8):
    """Largest two-cell slope change within ``reach`` cells of ``center``.

    Returns ``(J, location, side)``: the total slope change, the kink location
    from intersecting the two outer secants, and the larger outer slope.
    """
    pts = center + s * np.arange(-half, half + 1)
    vals = np.array([F(np.array([t])) for t in pts])
    slopes = np.diff(vals) / np.diff(pts)
    jumps = np.diff(slopes)  # jumps[i] sits at pts[i + 1]
    pair = jumps[:-1] + jumps[1:]  # kink inside (pts[i+1], pts[i+2])
    mid = pts[1:-2] + 0.5 * s
    near = np.abs(mid - center) <= reach * s
    i = int(np.argmax(np.where(near, np.abs(pair), -1.0)))
    sl, sr = slopes[i], slopes[i + 2]
    a, b = pts[i + 1], pts[i + 2]
    if sl != sr:
        loc = (vals[i + 2] - vals[i + 1] + sl * a - sr * b) / (sl - sr)
        loc = min(max(loc, a), b)
    else:
        loc = 0.5 * (a + b)
    return float(pair[i]), float(loc), max(abs(sl), abs(sr))


def kink_probe(ap, grid: GridSpec, fd_step: Optional[float] = None, threshold: float = 0.5,
               floor: float = 0.0, source: str = "exact", levels: int = 6, zoom: float = 10.0,
               retain: float = 0.995, resolution: Optional[int] = None) -> KinkReport:
    """Detect points where ``F`` has unequal one-sided derivatives.

    Stage one flags grid points where one-sided quotients disagree,
    ``|D+ - D-| > threshold * max(|D+|, |D-|, floor)``. ``fd_step=None`` uses
    neighbouring grid points, so a kink anywhere in a cell is seen.

    Stage two certifies each flagged cluster by zooming in ``levels`` times by
    ``zoom`` and tracking the total slope change across the kink. A genuine
    kink keeps it constant; a smooth point loses it linearly in the step and a
    merely non-Hölder derivative (``F' ~ 1/sqrt(log)``) loses it slowly. The
    change over the last three levels must stay within ``[retain, 1/retain]``.
    """
    if source == "exact":
        F = ap.F_exact
    elif source == "dense":
        F = lambda th: dense_F(ap, th, resolution)[0]
    else:
        raise InvalidConfig("source must be 'exact' or 'dense'", name="source", value=source)
    if levels < 3:
        raise InvalidConfig("levels must be >= 3", name="levels", value=levels)
    feas = ap.problem.feasible
    if not (feas.contains([grid.lo]) and feas.contains([grid.hi])):
        raise InvalidConfig("grid leaves Theta", name="grid", value=(grid.lo, grid.hi))
    th = grid.values()
    vals = np.array([F(np.array([t])) for t in th])
    n = len(th)
    dm = np.full(n, np.nan)
    dp = np.full(n, np.nan)
    if fd_step is None:
        sl = np.diff(vals) / np.diff(th)
        dm[1:] = sl
        dp[:-1] = sl
    else:
        for j in range(1, n - 1):
            f0 = vals[j]
            dm[j] = (f0 - F(np.array([th[j] - fd_step]))) / fd_step
            dp[j] = (F(np.array([th[j] + fd_step])) - f0) / fd_step
    cand = np.zeros(n, dtype=bool)
    inner = slice(1, n - 1)
    scale = np.maximum(np.maximum(np.abs(dm[inner]), np.abs(dp[inner])), floor)
    cand[inner] = np.abs(dp[inner] - dm[inner]) > threshold * scale

    spacing = (grid.hi - grid.lo) / (n - 1)
    kinks, ratios = [], []
    idx = np.flatnonzero(cand)
    clusters = np.split(idx, np.flatnonzero(np.diff(idx) > 1) + 1) if idx.size else []
    for cl in clusters:
        center = 0.5 * (th[cl[0]] + th[cl[-1]])
        s = spacing
        history = []
        ok = True
        for level in range(levels + 1):
            if center - 8 * s <= grid.lo or center + 8 * s >= grid.hi:
                ok = False
                break
            reach = 0.5 * (th[cl[-1]] - th[cl[0]]) / s + 1.5 if level == 0 else 6.0
            J, center, side = _slope_jump(F, center, s, reach)
            history.append((J, side))
            s /= zoom
        if not ok:
            continue
        J_end, side_end = history[-1]
        J_ref = history[-4][0]
        if J_ref == 0 or J_end == 0:
            continue
        ratio = J_end / J_ref
        strong = abs(J_end) > threshold * max(side_end, floor)
        dup = any(abs(center - k) <= spacing for k in kinks)
        if strong and not dup and retain <= ratio <= 1.0 / retain and grid.lo < center < grid.hi:
            kinks.append(center)
            ratios.append(ratio)
    order = np.argsort(kinks)
    return KinkReport(th, vals, dm, dp, cand, np.asarray(kinks, dtype=float)[order], threshold, floor,
                      [ratios[i] for i in order])


def holder_probe(ap, theta_k: Optional[float] = None,
                 radii: Sequence[float] = (1e-2, 1e-3, 1e-4, 1e-5, 1e-6),
                 alpha: float = 0.1) -> HolderReport:
    """Tabulate ``|F'(theta_k + r) - F'(theta_k)|`` against the radius ``r``.

    ``log_ratio`` is the difference times ``sqrt(log(1/r))`` (bounded if the
    modulus is logarithmic); ``holder_quotient`` divides by ``r**alpha``.
    Defaults to the largest recorded Hölder-failure point in the problem's window.
    """
    if theta_k is None:
        lo, hi = ap.meta.get("theta_window", (0.08, 0.36))
        pts = ap.holder_points(lo, hi)
        if len(pts) == 0:
            raise InvalidConfig("problem records no Hölder-failure points", name="problem", value=ap.name)
        theta_k = float(pts[-1])
    radii = np.asarray(radii, dtype=float)
    if np.any(radii <= 0) or np.any(radii >= 1):
        raise InvalidConfig("radii must lie in (0, 1)", name="radii", value=radii.tolist())
    g0 = float(ap.grad_F_exact(np.array([theta_k]))[0])
    grads = np.array([float(ap.grad_F_exact(np.array([theta_k + r]))[0]) for r in radii])
    diff = np.abs(grads - g0)
    return HolderReport(theta_k, g0, radii, grads, diff * np.sqrt(np.log(1.0 / radii)),
                        diff / radii**alpha, alpha)


def fit_loglog(xs, ys) -> SlopeFit:
    """Least-squares line through ``(log x, log y)``."""
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    if xs.shape != ys.shape or xs.size < 3:
        raise InvalidConfig("need >= 3 paired points", name="points", value=int(xs.size))
    if np.any(xs <= 0) or np.any(ys <= 0):
        raise InvalidConfig("log-log fit needs positive data", name="data",
                            value=float(min(xs.min(), ys.min())))
    res = stats.linregress(np.log(xs), np.log(ys))
    return SlopeFit(float(res.slope), float(res.intercept), float(res.rvalue**2), int(xs.size),
                    float(res.stderr))

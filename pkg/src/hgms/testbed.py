"""Analytic bilevel problems with closed-form minimizer manifolds.

Every problem here knows its lower-level solution set in closed form, so the
optimistic selection ``x_star``, the hyper-objective ``F_exact`` and, where it
exists, its gradient are available as ground truth.

Charts use angles in degrees and evaluate trigonometric functions with
``scipy.special.cosdg``/``sindg``, which are exact at multiples of 90 degrees.
That keeps the poles of circles and spheres exactly representable, which
matters when ``F`` is of order ``1e-60``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.special import cosdg, erfcx, sindg

from .core import BilevelProblem, FeasibleSet, InvalidConfig, ProblemDims

__all__ = [
    "AnalyticProblem",
    "HessianSpectrum",
    "make_circle_kink",
    "make_degenerate_circle",
    "make_sphere",
    "make_singleton",
    "hessian_on_manifold",
    "get_problem",
    "list_problems",
    "CATALOG",
    "bump",
    "bump_prime",
    "eta",
    "phi",
    "tstar",
]

KINK_WINDOW = (0.08, 0.36)
UNDERFLOW_GUARD = 0.05


@dataclass(frozen=True)
class AnalyticProblem:
    """A :class:`BilevelProblem` together with its exact solution structure.

    ``chart(u, theta)`` maps chart coordinates of shape ``(..., k)`` to points of
    ``S(theta)``; ``chart_domain`` lists ``(lo, hi, periodic)`` per coordinate.
    ``x_star`` and ``grad_F_exact`` return ``None`` where the optimistic
    selection is not unique (known kinks).
    """

    problem: BilevelProblem
    k: int
    chart: Callable
    chart_domain: tuple
    x_star: Callable
    F_exact: Callable
    grad_F_exact: Callable
    dist_to_manifold: Callable
    sample_manifold: Callable
    normal_gap: float
    kink_points: Callable = lambda lo, hi: np.empty(0)
    holder_points: Callable = lambda lo, hi: np.empty(0)
    meta: dict = field(default_factory=dict)

    @property
    def name(self) -> str:
        return self.problem.name

    @property
    def dims(self) -> ProblemDims:
        return self.problem.dims


@dataclass
class HessianSpectrum:
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    n_zero: int
    k: int
    normal_gap: float
    threshold: float

    @property
    def consistent(self) -> bool:
        normal = self.eigenvalues[self.n_zero:]
        return self.n_zero == self.k and bool(np.all(normal >= self.normal_gap * (1 - 1e-10)))


# --- scalar building blocks -------------------------------------------------

def _sin10(th):
    """``sin(10/theta)``, exactly zero at the float images of ``10/(k pi)``."""
    z = 10.0 / th
    k = np.rint(z / np.pi)
    tie = (k != 0) & (np.abs(z - k * np.pi) <= 4.0 * np.finfo(float).eps * np.abs(z))
    return np.where(tie, 0.0, np.sin(z))


def bump(theta, scale: float = 1.0):
    """``scale * exp(-1/theta^2) sin(10/theta)``, exactly zero for ``|theta| < 0.05``."""
    th = np.asarray(theta, dtype=float)
    safe = np.where(np.abs(th) < UNDERFLOW_GUARD, 1.0, th)
    val = scale * np.exp(-1.0 / safe**2) * _sin10(safe)
    out = np.where(np.abs(th) < UNDERFLOW_GUARD, 0.0, val)
    return out if out.ndim else float(out)


def bump_prime(theta, scale: float = 1.0):
    th = np.asarray(theta, dtype=float)
    safe = np.where(np.abs(th) < UNDERFLOW_GUARD, 1.0, th)
    e = np.exp(-1.0 / safe**2)
    val = scale * e * ((2.0 / safe**3) * _sin10(safe) - (10.0 / safe**2) * np.cos(10.0 / safe))
    out = np.where(np.abs(th) < UNDERFLOW_GUARD, 0.0, val)
    return out if out.ndim else float(out)


def eta(t):
    """``sign(t) exp(-1/t^2)``; strictly increasing, flat at 0."""
    t = np.asarray(t, dtype=float)
    with np.errstate(divide="ignore", over="ignore"):
        val = np.sign(t) * np.exp(-1.0 / np.where(t == 0, 1.0, t) ** 2)
    out = np.where(t == 0, 0.0, val)
    return out if out.ndim else float(out)


def eta_prime(t):
    t = np.asarray(t, dtype=float)
    tiny = np.abs(t) < 0.03  # exp(-1/t^2) underflows to 0 here anyway
    safe = np.where(tiny, 1.0, t)
    val = 2.0 / np.abs(safe) ** 3 * np.exp(-1.0 / safe**2)
    out = np.where(tiny, 0.0, val)
    return out if out.ndim else float(out)


def phi(t):
    """Antiderivative of :func:`eta` vanishing at 0.

    Closed form ``exp(-1/u^2) (u - sqrt(pi) erfcx(1/u))`` with ``u = |t|``;
    ``erfcx`` avoids the cancellation of the plain ``erfc`` expression.
    """
    t = np.asarray(t, dtype=float)
    u = np.abs(t)
    safe = np.where(u == 0, 1.0, u)
    with np.errstate(over="ignore", divide="ignore"):
        val = np.exp(-1.0 / safe**2) * (safe - math.sqrt(math.pi) * erfcx(1.0 / safe))
    out = np.where(u == 0, 0.0, val)
    return out if out.ndim else float(out)


def tstar(a: float) -> float:
    """Unique root of ``eta(t) + a = 0``."""
    if a == 0:
        return 0.0
    return -math.copysign(1.0, a) * math.log(1.0 / abs(a)) ** -0.5


def _ridge_factor(theta):
    return 1.0 + float(theta[0]) ** 2


def _sphere_chart(u, r):
    """Hyperspherical chart in degrees; the first angle is measured from ``e_1``."""
    u = np.asarray(u, dtype=float)
    k = u.shape[-1]
    d = k + 1
    x = np.empty(u.shape[:-1] + (d,))
    sin_prod = np.ones(u.shape[:-1])
    for i in range(k):
        x[..., i] = sin_prod * cosdg(u[..., i])
        sin_prod = sin_prod * sindg(u[..., i])
    x[..., d - 1] = sin_prod
    return r * x


def _sphere_domain(k):
    return tuple([(0.0, 180.0, False)] * (k - 1) + [(0.0, 360.0, True)])


def _ring_lower(d):
    """Lower-level pieces for ``g = (|x|^2 - (1 + theta^2))^2``."""

    def g(theta, x):
        x = np.asarray(x, dtype=float)
        return (np.sum(x * x, axis=-1) - _ridge_factor(theta)) ** 2

    def grad_x_g(theta, x):
        x = np.asarray(x, dtype=float)
        s = np.sum(x * x, axis=-1, keepdims=True) - _ridge_factor(theta)
        return 4.0 * s * x

    def hvp(theta, x, v):
        x = np.asarray(x, dtype=float)
        v = np.asarray(v, dtype=float)
        s = x @ x - _ridge_factor(theta)
        return 4.0 * s * v + 8.0 * x * (x @ v)

    def mixed(theta, x, v):
        return np.array([-8.0 * float(theta[0]) * float(np.asarray(x) @ np.asarray(v))])

    return g, grad_x_g, hvp, mixed


def _ring_meta(window, rho=0.25):
    lo, hi = window
    r_min = math.sqrt(1.0 + min(lo * lo, hi * hi) if lo * hi > 0 else 1.0)
    r_max = math.sqrt(1.0 + max(lo * lo, hi * hi))
    R = r_max + rho
    return {
        "rho": rho,
        "L_g3": 24.0 * R,
        "hess_bound": 12.0 * R * R,
        "r_min": r_min,
        "r_max": r_max,
    }


def _circle_sampler(theta, rng, n):
    r = math.sqrt(_ridge_factor(theta))
    ang = rng.uniform(0.0, 2 * math.pi, n)
    return r * np.stack([np.cos(ang), np.sin(ang)], axis=-1)


def _ring_dist(theta, x):
    x = np.asarray(x, dtype=float)
    return np.abs(np.linalg.norm(x, axis=-1) - math.sqrt(_ridge_factor(theta)))


def _kinks_between(lo, hi):
    """``10/(k pi)`` for positive integers ``k`` with the value inside ``[lo, hi]``."""
    if hi <= 0:
        return np.empty(0)
    lo = max(lo, 1e-12)
    k_min = max(1, math.ceil(10.0 / (math.pi * hi)))
    k_max = math.floor(10.0 / (math.pi * lo))
    ks = np.arange(k_min, k_max + 1)
    pts = 10.0 / (ks * math.pi)
    return np.sort(pts[(pts >= lo) & (pts <= hi)])


# --- problem constructors ---------------------------------------------------

def make_circle_kink(theta_box=KINK_WINDOW) -> AnalyticProblem:
    """``f = a(theta) x1 + x2^2`` on the circle of radius ``sqrt(1+theta^2)``.

    ``F = -r|a|`` has a kink wherever ``a`` changes sign.
    """
    g, grad_x_g, hvp, mixed = _ring_lower(2)

    def f(theta, x):
        x = np.asarray(x, dtype=float)
        return bump(theta[0]) * x[..., 0] + x[..., 1] ** 2

    def grad_theta_f(theta, x):
        return np.array([bump_prime(theta[0]) * float(x[0])])

    def grad_x_f(theta, x):
        return np.array([bump(theta[0]), 2.0 * float(x[1])])

    meta = _ring_meta(theta_box)
    meta.update(L_f1=2.0 * (meta["r_max"] + meta["rho"]) + 1.0, theta_window=KINK_WINDOW)
    prob = BilevelProblem(
        ProblemDims(1, 2), f, grad_theta_f, grad_x_f, g, grad_x_g, hvp, mixed,
        feasible=FeasibleSet.box([theta_box[0]], [theta_box[1]]),
        vectorized=True, name="circle-kink", meta=meta,
    )

    def x_star(theta):
        a = bump(theta[0])
        if a == 0:
            return None
        r = math.sqrt(_ridge_factor(theta))
        return np.array([-math.copysign(r, a), 0.0])

    def F_exact(theta):
        return -math.sqrt(_ridge_factor(theta)) * abs(bump(theta[0]))

    def grad_F_exact(theta):
        th = float(theta[0])
        a = bump(th)
        if a == 0:
            return None
        r = math.sqrt(1.0 + th * th)
        return np.array([-(th / r) * abs(a) - r * math.copysign(1.0, a) * bump_prime(th)])

    return AnalyticProblem(
        problem=prob, k=1,
        chart=lambda u, theta: _sphere_chart(u, math.sqrt(_ridge_factor(theta))),
        chart_domain=_sphere_domain(1),
        x_star=x_star, F_exact=F_exact, grad_F_exact=grad_F_exact,
        dist_to_manifold=_ring_dist, sample_manifold=_circle_sampler,
        normal_gap=8.0 * meta["r_min"] ** 2,
        kink_points=_kinks_between,
        meta=meta,
    )


def make_degenerate_circle(b: float = 1.0, theta_box=KINK_WINDOW) -> AnalyticProblem:
    """Unique but degenerate optimistic minimizer; ``F`` is C^1 without a Hölder modulus."""
    if not b > 0:
        raise InvalidConfig("b must be > 0", name="b", value=b)
    g, grad_x_g, hvp, mixed = _ring_lower(2)
    scale = 0.25

    def rho_pen(s):
        s = np.asarray(s, dtype=float)
        safe = np.where(s > 0, s, 1.0)
        out = np.where(s > 0, np.exp(-1.0 / safe), 0.0)
        return out if out.ndim else float(out)

    def rho_pen_prime(s):
        s = np.asarray(s, dtype=float)
        safe = np.where(s > 0, s, 1.0)
        out = np.where(s > 0, np.exp(-1.0 / safe) / safe**2, 0.0)
        return out if out.ndim else float(out)

    def f(theta, x):
        x = np.asarray(x, dtype=float)
        a = bump(theta[0], scale)
        return (
            phi(x[..., 1]) + a * x[..., 1] + rho_pen(-x[..., 0])
            + b * (np.sum(x * x, axis=-1) - _ridge_factor(theta))
        )

    def grad_theta_f(theta, x):
        th = float(theta[0])
        return np.array([bump_prime(th, scale) * float(x[1]) - 2.0 * b * th])

    def grad_x_f(theta, x):
        x1, x2 = float(x[0]), float(x[1])
        return np.array([
            -rho_pen_prime(-x1) + 2.0 * b * x1,
            eta(x2) + bump(theta[0], scale) + 2.0 * b * x2,
        ])

    meta = _ring_meta(theta_box)
    meta.update(b=b, L_f1=2.0 * b * (meta["r_max"] + meta["rho"]) + 2.0, theta_window=KINK_WINDOW)
    prob = BilevelProblem(
        ProblemDims(1, 2), f, grad_theta_f, grad_x_f, g, grad_x_g, hvp, mixed,
        feasible=FeasibleSet.box([theta_box[0]], [theta_box[1]]),
        vectorized=True, name="degenerate-circle", meta=meta,
    )

    def x_star(theta):
        t = tstar(bump(theta[0], scale))
        r2 = _ridge_factor(theta)
        return np.array([math.sqrt(r2 - t * t), t])

    def F_exact(theta):
        a = bump(theta[0], scale)
        t = tstar(a)
        return float(phi(t)) + a * t

    def grad_F_exact(theta):
        th = float(theta[0])
        return np.array([bump_prime(th, scale) * tstar(bump(th, scale))])

    return AnalyticProblem(
        problem=prob, k=1,
        chart=lambda u, theta: _sphere_chart(u, math.sqrt(_ridge_factor(theta))),
        chart_domain=_sphere_domain(1),
        x_star=x_star, F_exact=F_exact, grad_F_exact=grad_F_exact,
        dist_to_manifold=_ring_dist, sample_manifold=_circle_sampler,
        normal_gap=8.0 * meta["r_min"] ** 2,
        holder_points=_kinks_between,
        meta=meta,
    )


def make_sphere(d: int = 3, theta_box=(-2.0, 2.0)) -> AnalyticProblem:
    """``f = x1`` on the sphere of radius ``sqrt(1+theta^2)`` in ``R^d``; ``k = d - 1``."""
    if int(d) != d or d < 3:
        raise InvalidConfig("sphere requires d >= 3", name="d", value=d)
    d = int(d)
    g, grad_x_g, hvp, mixed = _ring_lower(d)
    e1 = np.zeros(d)
    e1[0] = 1.0

    def f(theta, x):
        return np.asarray(x, dtype=float)[..., 0]

    def grad_theta_f(theta, x):
        return np.zeros(1)

    def grad_x_f(theta, x):
        return e1.copy()

    meta = _ring_meta(theta_box)
    meta.update(L_f1=1.0)
    prob = BilevelProblem(
        ProblemDims(1, d), f, grad_theta_f, grad_x_f, g, grad_x_g, hvp, mixed,
        feasible=FeasibleSet.box([theta_box[0]], [theta_box[1]]),
        vectorized=True, name=f"sphere-d{d}", meta=meta,
    )

    def sample(theta, rng, n):
        z = rng.standard_normal((n, d))
        z /= np.linalg.norm(z, axis=1, keepdims=True)
        return math.sqrt(_ridge_factor(theta)) * z

    return AnalyticProblem(
        problem=prob, k=d - 1,
        chart=lambda u, theta: _sphere_chart(u, math.sqrt(_ridge_factor(theta))),
        chart_domain=_sphere_domain(d - 1),
        x_star=lambda theta: -math.sqrt(_ridge_factor(theta)) * e1,
        F_exact=lambda theta: -math.sqrt(_ridge_factor(theta)),
        grad_F_exact=lambda theta: np.array([-float(theta[0]) / math.sqrt(_ridge_factor(theta))]),
        dist_to_manifold=_ring_dist, sample_manifold=sample,
        normal_gap=8.0 * meta["r_min"] ** 2,
        meta=meta,
    )


def make_singleton(A=None, theta_box=(-2.0, 2.0)) -> AnalyticProblem:
    """Strongly convex control: ``g = |x - A^T theta|^2 / 2``, ``f = |x|^2 / 2``."""
    A = np.eye(2) if A is None else np.atleast_2d(np.asarray(A, dtype=float))
    if not np.all(np.isfinite(A)):
        raise InvalidConfig("A must be finite", name="A", value=A.tolist())
    m, d = A.shape

    def f(theta, x):
        x = np.asarray(x, dtype=float)
        return 0.5 * np.sum(x * x, axis=-1)

    def g(theta, x):
        r = np.asarray(x, dtype=float) - A.T @ np.asarray(theta, dtype=float)
        return 0.5 * np.sum(r * r, axis=-1)

    def grad_x_g(theta, x):
        return np.asarray(x, dtype=float) - A.T @ np.asarray(theta, dtype=float)

    prob = BilevelProblem(
        ProblemDims(m, d),
        f,
        lambda theta, x: np.zeros(m),
        lambda theta, x: np.array(x, dtype=float),
        g,
        grad_x_g,
        lambda theta, x, v: np.array(v, dtype=float),
        lambda theta, x, v: -A @ np.asarray(v, dtype=float),
        feasible=FeasibleSet.box(theta_box[0], theta_box[1], m=m),
        vectorized=True, name="singleton",
        meta={"positive_definite": True, "hess_bound": 1.0, "L_f1": 2.0 * np.abs(A).sum(), "A": A.tolist()},
    )

    def x_star(theta):
        return A.T @ np.asarray(theta, dtype=float)

    return AnalyticProblem(
        problem=prob, k=0,
        chart=lambda u, theta: np.broadcast_to(x_star(theta), np.shape(u)[:-1] + (d,)).copy(),
        chart_domain=(),
        x_star=x_star,
        F_exact=lambda theta: 0.5 * float(np.sum(x_star(theta) ** 2)),
        grad_F_exact=lambda theta: A @ A.T @ np.asarray(theta, dtype=float),
        dist_to_manifold=lambda theta, x: np.linalg.norm(np.asarray(x) - x_star(theta), axis=-1),
        sample_manifold=lambda theta, rng, n: np.tile(x_star(theta), (n, 1)),
        normal_gap=1.0,
        meta=prob.meta,
    )


def hessian_on_manifold(ap: AnalyticProblem, theta, u) -> HessianSpectrum:
    """Eigendecomposition of the lower Hessian at ``chart(u, theta)``, assembled from hvp columns."""
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    x = ap.chart(np.asarray(u, dtype=float).reshape(ap.k), theta)
    d = ap.dims.d
    H = np.column_stack([ap.problem.hvp(theta, x, e) for e in np.eye(d)])
    H = 0.5 * (H + H.T)
    w, V = np.linalg.eigh(H)
    thresh = 1e-6 * max(1.0, float(np.max(np.abs(w))))
    n_zero = int(np.sum(np.abs(w) < thresh))
    return HessianSpectrum(w, V, n_zero, ap.k, ap.normal_gap, thresh)


# --- catalog ----------------------------------------------------------------

CATALOG = {
    "circle-kink": make_circle_kink,
    "degenerate-circle": make_degenerate_circle,
    "singleton": make_singleton,
}


def list_problems() -> list[str]:
    return ["circle-kink", "degenerate-circle", "sphere-d{d}", "singleton"]


def get_problem(name: str, **params) -> AnalyticProblem:
    """Build a catalog problem by name, e.g. ``sphere-d3`` or ``singleton``."""
    if name.startswith("sphere-d"):
        try:
            d = int(name[len("sphere-d"):])
        except ValueError:
            raise InvalidConfig("malformed sphere name", name="problem", value=name) from None
        return make_sphere(d, **params)
    if name not in CATALOG:
        raise InvalidConfig("unknown problem", name="problem", value=name)
    return CATALOG[name](**params)

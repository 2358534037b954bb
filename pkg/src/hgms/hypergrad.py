"""Hyper-gradient estimate at a selected lower-level point.

The pseudoinverse action is approximated by a ridge-regularized conjugate
gradient solve that touches the lower Hessian only through ``hvp``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .core import (
    CgBudgetExceeded,
    InvalidConfig,
    NonFinite,
    OracleDisagreement,
    check_vector,
)

__all__ = [
    "HyperGradConfig",
    "CGResult",
    "HyperGradEstimate",
    "default_cg_budget",
    "ridge_cg_solve",
    "clip",
    "tube_radius",
    "hypergradient",
    "exact_pseudoinverse_hypergradient",
]


@dataclass(frozen=True)
class HyperGradConfig:
    gamma: float = 1e-2
    eta: float = 1e-8
    max_cg_iters: Optional[int] = None
    clip_radius: Optional[float] = None
    warm_start: bool = False

    def __post_init__(self):
        if not (np.isfinite(self.gamma) and self.gamma >= 0):
            raise InvalidConfig("gamma must be >= 0", name="gamma", value=self.gamma)
        if not (np.isfinite(self.eta) and self.eta > 0):
            raise InvalidConfig("eta must be > 0", name="eta", value=self.eta)
        if self.max_cg_iters is not None and (int(self.max_cg_iters) != self.max_cg_iters or self.max_cg_iters < 1):
            raise InvalidConfig("max_cg_iters must be >= 1", name="max_cg_iters", value=self.max_cg_iters)
        if self.clip_radius is not None and not self.clip_radius > 0:
            raise InvalidConfig("clip_radius must be > 0", name="clip_radius", value=self.clip_radius)

    def to_dict(self) -> dict:
        return {"gamma": self.gamma, "eta": self.eta, "max_cg_iters": self.max_cg_iters,
                "clip_radius": self.clip_radius, "warm_start": self.warm_start}


@dataclass
class CGResult:
    v: np.ndarray
    iterations: int
    residual: float
    converged: bool


@dataclass
class HyperGradEstimate:
    h_hat: np.ndarray
    v: np.ndarray
    v_tilde: np.ndarray
    cg_iterations: int
    cg_residual: float
    clipped: bool
    tube_radius: Optional[float]
    converged: bool = True


def _check_gamma(p, cfg):
    if cfg.gamma == 0 and not p.positive_definite:
        raise InvalidConfig(
            "gamma = 0 needs a problem declared positive definite", name="gamma", value=cfg.gamma
        )


def default_cg_budget(p, theta, x, gamma: float, eta: float) -> int:
    """``ceil(4 sqrt((L + gamma)/gamma) log(1/eta))`` capped at ``10 d``.

    ``L`` is ``meta['hess_bound']`` when present, else the largest diagonal
    entry probed through ``hvp``.
    """
    d = p.dims.d
    cap = 10 * d
    if gamma <= 0:
        return cap
    L = p.meta.get("hess_bound")
    if L is None:
        L = max(abs(float(p.hvp(theta, x, e)[i])) for i, e in enumerate(np.eye(d)))
    est = math.ceil(4.0 * math.sqrt((L + gamma) / gamma) * max(math.log(1.0 / eta), 1.0))
    return max(1, min(est, cap))


def ridge_cg_solve(p, theta, x_hat, cfg: HyperGradConfig, b=None, v0=None, strict: bool = False) -> CGResult:
    """Solve ``(H + gamma I) v = grad_x f`` by CG until ``|residual| <= eta``.

    Starts from zero unless ``v0`` is given. When the budget runs out the
    partial result is returned with ``converged=False``; ``strict`` raises
    :class:`CgBudgetExceeded` instead.
    """
    _check_gamma(p, cfg)
    d = p.dims.d
    theta = check_vector(theta, p.dims.m, "theta")
    x_hat = check_vector(x_hat, d, "x_hat")
    b = check_vector(p.grad_x_f(theta, x_hat) if b is None else b, d, "grad_x_f")
    gamma = cfg.gamma
    max_iter = cfg.max_cg_iters or default_cg_budget(p, theta, x_hat, gamma, cfg.eta)

    def apply(u):
        return np.asarray(p.hvp(theta, x_hat, u), dtype=float) + gamma * u

    if v0 is None:
        v = np.zeros(d)
        r = b.copy()
    else:
        v = check_vector(v0, d, "v0").copy()
        r = b - apply(v)
    rs = float(r @ r)
    it = 0
    if math.sqrt(rs) <= cfg.eta:
        return CGResult(v, 0, math.sqrt(rs), True)
    direction = r.copy()
    while it < max_iter:
        Ad = apply(direction)
        curv = float(direction @ Ad)
        if not np.isfinite(curv) or curv <= 0:
            raise NonFinite(
                "CG breakdown: nonpositive curvature; point far off the tube?",
                name="curvature", value=curv, iteration=it,
            )
        step = rs / curv
        v = v + step * direction
        r = r - step * Ad
        rs_new = float(r @ r)
        it += 1
        if math.sqrt(rs_new) <= cfg.eta:
            return CGResult(v, it, math.sqrt(rs_new), True)
        direction = r + (rs_new / rs) * direction
        rs = rs_new
    result = CGResult(v, it, math.sqrt(rs), False)
    if strict:
        raise CgBudgetExceeded(
            "CG residual above eta after the iteration budget", result=result,
            name="max_cg_iters", value=max_iter, residual=result.residual,
        )
    return result


def clip(v_tilde, radius: Optional[float]):
    """Euclidean-ball projection; identity when ``radius`` is None."""
    v_tilde = np.asarray(v_tilde, dtype=float)
    if radius is None:
        return v_tilde.copy(), False
    nrm = float(np.linalg.norm(v_tilde))
    if nrm <= radius:
        return v_tilde.copy(), False
    return v_tilde * (radius / nrm), True


def tube_radius(p, gamma: float) -> Optional[float]:
    """``min(rho, gamma / (2 max(L_g3, 1)))`` when the problem supplies ``rho`` and ``L_g3``."""
    rho, L3 = p.meta.get("rho"), p.meta.get("L_g3")
    if rho is None or L3 is None:
        return None
    return min(rho, gamma / (2.0 * max(L3, 1.0)))


def hypergradient(p, theta, x_hat, cfg: HyperGradConfig, v0=None, strict: bool = False) -> HyperGradEstimate:
    """``grad_theta f - mixed(v)`` with ``v`` the (clipped) ridge-CG solution."""
    theta = check_vector(theta, p.dims.m, "theta")
    x_hat = check_vector(x_hat, p.dims.d, "x_hat")
    sol = ridge_cg_solve(p, theta, x_hat, cfg, v0=v0 if cfg.warm_start else None, strict=strict)
    v, clipped = clip(sol.v, cfg.clip_radius)
    h = np.asarray(p.grad_theta_f(theta, x_hat), dtype=float) - np.asarray(p.mixed(theta, x_hat, v), dtype=float)
    if not np.all(np.isfinite(h)):
        raise NonFinite("hyper-gradient is not finite", name="h_hat", value=h.tolist())
    return HyperGradEstimate(h, v, sol.v, sol.iterations, sol.residual, clipped,
                             tube_radius(p, cfg.gamma), sol.converged)


def exact_pseudoinverse_hypergradient(ap, theta, fd_step: float = 1e-4, rel_threshold: float = 1e-8):
    """Hyper-gradient through the Moore-Penrose pseudoinverse at ``x_star(theta)``.

    The Hessian is assembled by finite differences of ``grad_x g``, so this
    path shares nothing with the CG estimate except the problem evaluators.
    """
    from .oracle import dense_hessian

    p = ap.problem
    theta = check_vector(theta, p.dims.m, "theta")
    xs = ap.x_star(theta)
    if xs is None:
        raise InvalidConfig("optimistic selection is not unique at theta", name="theta", value=theta.tolist())
    H = dense_hessian(p, theta, xs, fd_step)
    w, V = np.linalg.eigh(H)
    keep = np.abs(w) >= rel_threshold * float(np.max(np.abs(w)))
    n_zero = int(np.sum(~keep))
    if n_zero != ap.k:
        raise OracleDisagreement(
            "near-zero eigenvalue count differs from the manifold dimension",
            name="n_zero", value=n_zero, k=ap.k, eigenvalues=w.tolist(),
        )
    Vn = V[:, keep]
    v = Vn @ ((Vn.T @ p.grad_x_f(theta, xs)) / w[keep])
    return np.asarray(p.grad_theta_f(theta, xs), dtype=float) - np.asarray(p.mixed(theta, xs, v), dtype=float)

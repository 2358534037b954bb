"""Problem abstraction, feasible sets, errors and input validation helpers."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Optional

import numpy as np

__all__ = [
    "ToolError",
    "DimensionMismatch",
    "NonFinite",
    "InvalidConfig",
    "CgBudgetExceeded",
    "OracleDisagreement",
    "ProblemDims",
    "FeasibleSet",
    "BilevelProblem",
    "ValidationReport",
    "validate_problem",
    "check_vector",
    "check_positive",
]


class ToolError(Exception):
    """Base error. ``context`` always names the offending quantity."""

    kind = "ToolError"

    def __init__(self, message: str, **context: Any):
        super().__init__(message)
        self.message = message
        self.context = context

    def __str__(self) -> str:
        if not self.context:
            return self.message
        ctx = ", ".join(f"{k}={v!r}" for k, v in self.context.items())
        return f"{self.message} ({ctx})"


class DimensionMismatch(ToolError):
    kind = "DimensionMismatch"


class NonFinite(ToolError):
    kind = "NonFinite"


class InvalidConfig(ToolError):
    kind = "InvalidConfig"


class CgBudgetExceeded(ToolError):
    """Raised only on request; carries the partial solve in ``result``."""

    kind = "CgBudgetExceeded"

    def __init__(self, message: str, result: Any = None, **context: Any):
        super().__init__(message, **context)
        self.result = result


class OracleDisagreement(ToolError):
    kind = "OracleDisagreement"


def check_vector(value, size: int, name: str) -> np.ndarray:
    """Coerce to a finite float64 vector of the given length."""
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    if arr.shape != (size,):
        raise DimensionMismatch(
            f"{name} has shape {arr.shape}, expected ({size},)", name=name, value=arr.shape
        )
    if not np.all(np.isfinite(arr)):
        raise NonFinite(f"{name} contains non-finite entries", name=name, value=arr.tolist())
    return arr


def check_positive(value, name: str, strict: bool = True) -> None:
    ok = value > 0 if strict else value >= 0
    if not (np.isfinite(value) and ok):
        rel = "> 0" if strict else ">= 0"
        raise InvalidConfig(f"{name} must be {rel}", name=name, value=value)


@dataclass(frozen=True)
class ProblemDims:
    m: int
    d: int

    def __post_init__(self):
        for name in ("m", "d"):
            val = getattr(self, name)
            if int(val) != val or val < 1:
                raise InvalidConfig(f"{name} must be a positive integer", name=name, value=val)


@dataclass(frozen=True)
class FeasibleSet:
    """Upper-level feasible set: ``box``, ``simplex`` or ``full``."""

    kind: str
    lower: Optional[np.ndarray] = None
    upper: Optional[np.ndarray] = None
    dim: Optional[int] = None

    def __post_init__(self):
        if self.kind not in ("box", "simplex", "full"):
            raise InvalidConfig("unknown feasible set kind", name="kind", value=self.kind)
        if self.kind == "box":
            lo = np.atleast_1d(np.asarray(self.lower, dtype=float))
            hi = np.atleast_1d(np.asarray(self.upper, dtype=float))
            if lo.shape != hi.shape:
                raise DimensionMismatch("box bounds differ in shape", name="lower", value=lo.shape)
            if np.any(lo > hi):
                raise InvalidConfig("box requires lower <= upper", name="lower", value=lo.tolist())
            object.__setattr__(self, "lower", lo)
            object.__setattr__(self, "upper", hi)
            object.__setattr__(self, "dim", lo.size)
        elif self.kind == "simplex":
            if self.dim is None or self.dim < 1:
                raise InvalidConfig("simplex requires dimension >= 1", name="dim", value=self.dim)

    @classmethod
    def box(cls, lower, upper, m: Optional[int] = None) -> "FeasibleSet":
        lo, hi = np.asarray(lower, dtype=float), np.asarray(upper, dtype=float)
        if m is not None:
            lo = np.broadcast_to(lo, (m,)).copy()
            hi = np.broadcast_to(hi, (m,)).copy()
        return cls("box", lo, hi)

    @classmethod
    def simplex(cls, m: int) -> "FeasibleSet":
        return cls("simplex", dim=m)

    @classmethod
    def full(cls) -> "FeasibleSet":
        return cls("full")

    def contains(self, theta, atol: float = 1e-12) -> bool:
        theta = np.asarray(theta, dtype=float)
        if self.kind == "box":
            return bool(np.all(theta >= self.lower) and np.all(theta <= self.upper))
        if self.kind == "simplex":
            return bool(np.all(theta >= 0) and abs(theta.sum() - 1.0) <= atol)
        return bool(np.all(np.isfinite(theta)))

    def to_dict(self) -> dict:
        out: dict = {"kind": self.kind}
        if self.kind == "box":
            out.update(lower=self.lower.tolist(), upper=self.upper.tolist())
        elif self.kind == "simplex":
            out["dim"] = self.dim
        return out


Evaluator = Callable[..., Any]


@dataclass(frozen=True)
class BilevelProblem:
    """Evaluator bundle for ``min_theta min_{x in argmin g} f``.

    Hessians are only available as actions. Every evaluator takes ``(theta, x)``
    (plus ``v`` for the actions). ``vectorized`` problems accept ``x`` of shape
    ``(n, d)`` for ``f`` and ``grad_x_g`` and return row-wise results; the
    sampler and selector use this to run chains in lockstep.

    ``meta`` holds optional constants: ``positive_definite`` (bool),
    ``hess_bound`` (spectral bound on the lower Hessian), ``rho`` and ``L_g3``
    (tube radius inputs), ``L_f1``.
    """

    dims: ProblemDims
    f: Evaluator
    grad_theta_f: Evaluator
    grad_x_f: Evaluator
    g: Evaluator
    grad_x_g: Evaluator
    hvp: Evaluator
    mixed: Evaluator
    feasible: FeasibleSet = field(default_factory=FeasibleSet.full)
    vectorized: bool = False
    name: str = "problem"
    meta: dict = field(default_factory=dict)

    @property
    def positive_definite(self) -> bool:
        return bool(self.meta.get("positive_definite", False))

    def f_batch(self, theta, xs) -> np.ndarray:
        xs = np.asarray(xs, dtype=float)
        if self.vectorized:
            return np.asarray(self.f(theta, xs), dtype=float).reshape(len(xs))
        return np.array([float(self.f(theta, x)) for x in xs])

    def grad_x_g_batch(self, theta, xs) -> np.ndarray:
        xs = np.asarray(xs, dtype=float)
        if self.vectorized:
            return np.asarray(self.grad_x_g(theta, xs), dtype=float).reshape(xs.shape)
        return np.array([self.grad_x_g(theta, x) for x in xs], dtype=float).reshape(xs.shape)


@dataclass
class ValidationReport:
    symmetry: float
    hvp_linearity: float
    mixed_linearity: float
    probes: int

    def max_residual(self) -> float:
        return max(self.symmetry, self.hvp_linearity, self.mixed_linearity)


def _call(fn, name, size, *args) -> np.ndarray:
    out = np.asarray(fn(*args), dtype=float)
    if size == 0:
        if out.size != 1:
            raise DimensionMismatch(f"{name} must return a scalar", name=name, value=out.shape)
        out = out.reshape(())
    elif out.shape != (size,):
        raise DimensionMismatch(
            f"{name} returned shape {out.shape}, expected ({size},)", name=name, value=out.shape
        )
    if not np.all(np.isfinite(out)):
        raise NonFinite(f"{name} returned non-finite values", name=name, value=out.tolist())
    return out


def validate_problem(p: BilevelProblem, probes: int = 10, seed: int = 0) -> ValidationReport:
    """Probe shapes, finiteness, hvp symmetry and linearity of both Hessian actions.

    Draws ``(theta, x, u, v)`` uniformly from ``[-1, 1]``; the caller compares the
    returned residuals to a tolerance.
    """
    if probes < 1:
        raise InvalidConfig("probes must be >= 1", name="probes", value=probes)
    m, d = p.dims.m, p.dims.d
    rng = np.random.default_rng(seed)
    sym = lin_h = lin_m = 0.0
    for _ in range(probes):
        theta = rng.uniform(-1, 1, m)
        x = rng.uniform(-1, 1, d)
        u = rng.uniform(-1, 1, d)
        v = rng.uniform(-1, 1, d)
        a, b = rng.uniform(-2, 2, 2)
        _call(p.f, "f", 0, theta, x)
        _call(p.g, "g", 0, theta, x)
        _call(p.grad_theta_f, "grad_theta_f", m, theta, x)
        _call(p.grad_x_f, "grad_x_f", d, theta, x)
        _call(p.grad_x_g, "grad_x_g", d, theta, x)
        hu = _call(p.hvp, "hvp", d, theta, x, u)
        hv = _call(p.hvp, "hvp", d, theta, x, v)
        huv = _call(p.hvp, "hvp", d, theta, x, a * u + b * v)
        mu = _call(p.mixed, "mixed", m, theta, x, u)
        mv = _call(p.mixed, "mixed", m, theta, x, v)
        muv = _call(p.mixed, "mixed", m, theta, x, a * u + b * v)
        sym = max(sym, abs(u @ hv - v @ hu))
        lin_h = max(lin_h, float(np.max(np.abs(huv - a * hu - b * hv))))
        lin_m = max(lin_m, float(np.max(np.abs(muv - a * mu - b * mv))))
    return ValidationReport(sym, lin_h, lin_m, probes)

"""Projected-gradient outer loop, gradient mapping and run traces."""
from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .core import FeasibleSet, InvalidConfig, NonFinite, ToolError, check_vector
from .hypergrad import HyperGradConfig, hypergradient
from .sampler import MIX_FUNCTION, FixedPoints, GibbsSamplerConfig, sample_parallel
from .selector import best_of_n

__all__ = [
    "OuterConfig",
    "IterationRecord",
    "RunTrace",
    "Schedule",
    "TRACE_COLUMNS",
    "project",
    "step",
    "run_hgms",
    "run_exact_gradient",
    "parameter_schedule",
]

LOG = logging.getLogger(__name__)

TRACE_COLUMNS = ("f_selected", "grad_map_norm", "cg_iters", "cg_residual", "clipped",
                 "dist_to_manifold", "oracle_err", "error")
_INCREASE_WINDOW = 5


@dataclass(frozen=True)
class OuterConfig:
    alpha: float
    T: int
    stop_on_error: bool = False
    record_oracle_error: bool = True

    def __post_init__(self):
        if not (np.isfinite(self.alpha) and self.alpha > 0):
            raise InvalidConfig("alpha must be > 0", name="alpha", value=self.alpha)
        if int(self.T) != self.T or self.T < 1:
            raise InvalidConfig("T must be >= 1", name="T", value=self.T)

    def to_dict(self) -> dict:
        return {"alpha": self.alpha, "T": self.T, "stop_on_error": self.stop_on_error,
                "record_oracle_error": self.record_oracle_error}


@dataclass
class IterationRecord:
    t: int
    theta: np.ndarray
    theta_next: np.ndarray
    h_hat: np.ndarray
    grad_map: np.ndarray
    f_selected: float
    f_min: float = float("nan")
    f_mean: float = float("nan")
    cg_iters: int = 0
    cg_residual: float = float("nan")
    clipped: bool = False
    r_gamma: Optional[float] = None
    dist_to_manifold: Optional[float] = None
    oracle_err: Optional[float] = None
    grad_map_exact: Optional[float] = None
    F_true: Optional[float] = None
    error: Optional[str] = None

    @property
    def grad_map_norm(self) -> float:
        return float(np.linalg.norm(self.grad_map))

    @property
    def flagged(self) -> bool:
        return self.error is not None


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


@dataclass
class RunTrace:
    records: list
    configs: dict
    seed: int
    problem: str
    theta0: np.ndarray
    theta0_projected: bool = False
    theta_final: Optional[np.ndarray] = None
    F_final: Optional[float] = None
    wall_time: float = 0.0
    aborted: bool = False
    error: Optional[str] = None
    warnings: list = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    @property
    def mean_grad_map_sq(self) -> float:
        return float(np.mean([r.grad_map_norm**2 for r in self.records]))

    def columns(self) -> list:
        m = len(self.theta0)
        return ["t"] + [f"theta_{i}" for i in range(m)] + list(TRACE_COLUMNS)

    def rows(self) -> list:
        out = []
        for r in self.records:
            row = [str(r.t)] + [repr(float(v)) for v in r.theta]
            row += [_fmt(r.f_selected), _fmt(r.grad_map_norm), _fmt(r.cg_iters), _fmt(r.cg_residual),
                    _fmt(r.clipped), _fmt(r.dist_to_manifold), _fmt(r.oracle_err), r.error or ""]
            out.append(row)
        return out

    def write_csv(self, path, comments=()) -> None:
        with open(path, "w", newline="") as fh:
            for line in comments:
                fh.write(f"# {line}\n")
            w = csv.writer(fh)
            w.writerow(self.columns())
            w.writerows(self.rows())

    def pgd_bound(self) -> Optional[dict]:
        """Both sides of the inexact projected-gradient bound, when ``e_t`` was recorded.

        ``lhs`` averages the squared gradient mapping built from the exact
        gradient; ``F_min`` is the smallest true value seen along the trace.
        """
        recs = self.records
        if not recs or any(r.oracle_err is None or r.grad_map_exact is None or r.F_true is None for r in recs):
            return None
        alpha = self.configs["outer"]["alpha"]
        T = len(recs)
        values = [r.F_true for r in recs] + ([self.F_final] if self.F_final is not None else [])
        lhs = float(np.mean([r.grad_map_exact**2 for r in recs]))
        drop = recs[0].F_true - min(values)
        rhs = 8.0 * drop / (alpha * T) + 10.0 * float(np.mean([r.oracle_err**2 for r in recs]))
        return {"lhs": lhs, "rhs": rhs, "F0_minus_Fmin": drop, "T": T}

    def summary(self) -> dict:
        recs = self.records
        gm = [r.grad_map_norm for r in recs]
        errs = [r.oracle_err for r in recs if r.oracle_err is not None]
        return {
            "problem": self.problem,
            "seed": self.seed,
            "iterations": len(recs),
            "theta0": self.theta0.tolist(),
            "theta0_projected": self.theta0_projected,
            "theta_final": None if self.theta_final is None else self.theta_final.tolist(),
            "F_final": self.F_final,
            "mean_grad_map_sq": float(np.mean(np.square(gm))) if gm else None,
            "final_grad_map_norm": gm[-1] if gm else None,
            "mean_oracle_err_sq": float(np.mean(np.square(errs))) if errs else None,
            "mean_cg_iters": float(np.mean([r.cg_iters for r in recs])) if recs else None,
            "flagged_rows": sum(r.flagged for r in recs),
            "aborted": self.aborted,
            "error": self.error,
            "warnings": list(self.warnings),
            "wall_time": self.wall_time,
            "mix_function": MIX_FUNCTION,
            "configs": self.configs,
        }

    def to_json(self, path=None, **extra) -> str:
        text = json.dumps({**self.summary(), **extra}, indent=2, sort_keys=True)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text + "\n")
        return text


def _simplex(u):
    s = np.sort(u)[::-1]
    css = np.cumsum(s) - 1.0
    ks = np.arange(1, len(u) + 1)
    rho = np.flatnonzero(s - css / ks > 0)[-1]
    tau = css[rho] / (rho + 1)
    return np.maximum(u - tau, 0.0)


def project(fset: FeasibleSet, u) -> np.ndarray:
    """Euclidean projection onto ``fset``."""
    u = np.asarray(u, dtype=float)
    if not np.all(np.isfinite(u)):
        raise NonFinite("cannot project a non-finite point", name="theta", value=u.tolist())
    if fset.kind == "box":
        return np.clip(u, fset.lower, fset.upper)
    if fset.kind == "simplex":
        return _simplex(u)
    return u.copy()


def step(theta, h_hat, alpha: float, fset: FeasibleSet):
    """One projected step. Returns ``(theta_next, G)`` with ``G = (theta - theta_next)/alpha``."""
    if not alpha > 0:
        raise InvalidConfig("alpha must be > 0", name="alpha", value=alpha)
    theta = np.asarray(theta, dtype=float)
    h_hat = np.asarray(h_hat, dtype=float)
    if not np.all(np.isfinite(h_hat)):
        raise NonFinite("hyper-gradient is not finite", name="h_hat", value=h_hat.tolist())
    nxt = project(fset, theta - alpha * h_hat)
    return nxt, (theta - nxt) / alpha


def _split(problem):
    if hasattr(problem, "problem") and hasattr(problem, "F_exact"):
        return problem.problem, problem
    return problem, None


def _safe(fn, *args):
    try:
        val = np.asarray(fn(*args), dtype=float)
    except (ToolError, ValueError, ArithmeticError):
        return None
    return val if np.all(np.isfinite(val)) else None


def _start(p, theta0):
    theta0 = check_vector(theta0, p.dims.m, "theta0")
    theta = theta0
    projected = False
    if not p.feasible.contains(theta0):
        theta = project(p.feasible, theta0)
        projected = True
        LOG.info("theta0 %s is infeasible; projected to %s", theta0.tolist(), theta.tolist())
    return theta0, theta, projected


def _oracle_fields(ap, theta, h_hat, alpha, fset, rec):
    g = _safe(ap.grad_F_exact, theta)
    if g is not None:
        rec.oracle_err = float(np.linalg.norm(h_hat - g))
        rec.grad_map_exact = float(np.linalg.norm(step(theta, g, alpha, fset)[1]))
    F = _safe(ap.F_exact, theta)
    rec.F_true = None if F is None else float(F)


def run_hgms(problem, theta0, sampler_cfg: GibbsSamplerConfig, hyper_cfg: HyperGradConfig,
             outer_cfg: OuterConfig) -> RunTrace:
    """HG-MS: sample, select, solve, clip, assemble, project; ``T`` times.

    ``problem`` is a :class:`BilevelProblem` or an analytic problem; the
    latter enables manifold-based chain starts and the oracle error ``e_t``.
    Errors become flagged records (``h_hat = 0``) unless ``stop_on_error``,
    which ends the run with a partial trace and ``aborted=True``.
    """
    p, ap = _split(problem)
    fset = p.feasible
    theta0, theta, projected = _start(p, theta0)
    configs = {"sampler": sampler_cfg.to_dict(), "hypergrad": hyper_cfg.to_dict(), "outer": outer_cfg.to_dict(),
               "feasible_set": fset.to_dict()}
    trace = RunTrace([], configs, sampler_cfg.seed, p.name, theta0, projected)
    alpha = outer_cfg.alpha
    prev_x = prev_v = None
    rises = 0
    last_f = None
    t0 = time.perf_counter()
    for t in range(outer_cfg.T):
        cfg = sampler_cfg
        if sampler_cfg.warm_start and prev_x is not None:
            cfg = replace(sampler_cfg, init=FixedPoints(prev_x))
        rec = None
        err = None
        try:
            chains = sample_parallel(p, theta, cfg, outer_iteration=t, analytic=ap)
            sel = best_of_n(p, theta, chains, analytic=ap)
            est = hypergradient(p, theta, sel.point, hyper_cfg, v0=prev_v)
            h_hat = est.h_hat
            if not est.converged:
                err = "CgBudgetExceeded"
                h_hat = np.zeros(p.dims.m)
            nxt, G = step(theta, h_hat, alpha, fset)
            rec = IterationRecord(
                t, theta.copy(), nxt, h_hat, G, sel.value, float(np.min(sel.all_values)),
                float(np.mean(sel.all_values)), est.cg_iterations, est.cg_residual, est.clipped,
                est.tube_radius, sel.dist_to_manifold, error=err,
            )
            prev_x, prev_v = sel.point, est.v_tilde
        except InvalidConfig:
            raise
        except ToolError as exc:
            err = exc.kind
            LOG.warning("outer iteration %d: %s", t, exc)
            nxt, G = theta.copy(), np.zeros(p.dims.m)
            rec = IterationRecord(t, theta.copy(), nxt, np.zeros(p.dims.m), G, float("nan"), error=err)
        if ap is not None and outer_cfg.record_oracle_error:
            _oracle_fields(ap, theta, rec.h_hat, alpha, fset, rec)
        trace.records.append(rec)
        if err is not None and outer_cfg.stop_on_error:
            trace.aborted = True
            trace.error = f"{err} at t={t}"
            break
        if last_f is not None and np.isfinite(rec.f_selected) and rec.f_selected > last_f:
            rises += 1
            if rises == _INCREASE_WINDOW:
                msg = (f"selected f increased {_INCREASE_WINDOW} times in a row at t={t}; "
                       f"consider alpha={alpha / 2:g}")
                LOG.warning(msg)
                trace.warnings.append(msg)
                rises = 0
        else:
            rises = 0
        last_f = rec.f_selected if np.isfinite(rec.f_selected) else last_f
        theta = rec.theta_next
    trace.theta_final = theta
    if ap is not None:
        F = _safe(ap.F_exact, theta)
        trace.F_final = None if F is None else float(F)
    trace.wall_time = time.perf_counter() - t0
    return trace


def run_exact_gradient(ap, theta0, outer_cfg: OuterConfig) -> RunTrace:
    """Control run: the same projected loop driven by ``grad_F_exact``."""
    p = ap.problem
    theta0, theta, projected = _start(p, theta0)
    trace = RunTrace([], {"outer": outer_cfg.to_dict(), "feasible_set": p.feasible.to_dict()}, 0,
                     ap.name, theta0, projected)
    t0 = time.perf_counter()
    for t in range(outer_cfg.T):
        g = check_vector(ap.grad_F_exact(theta), p.dims.m, "grad_F_exact")
        nxt, G = step(theta, g, outer_cfg.alpha, p.feasible)
        F = float(ap.F_exact(theta))
        rec = IterationRecord(t, theta.copy(), nxt, g, G, F, oracle_err=0.0,
                              grad_map_exact=float(np.linalg.norm(G)), F_true=F)
        trace.records.append(rec)
        theta = nxt
    trace.theta_final = theta
    trace.F_final = float(ap.F_exact(theta))
    trace.wall_time = time.perf_counter() - t0
    return trace


@dataclass(frozen=True)
class Schedule:
    epsilon: float
    k: int
    N: int
    lam: float
    gamma: float
    eta: float
    R_v_rule: str = "R_v >= (2/gamma) * (L_f1 + eta)"

    def clip_radius(self, L_f1: float) -> float:
        """Smallest radius allowed by the clipping rule."""
        return 2.0 / self.gamma * (L_f1 + self.eta)

    def to_dict(self) -> dict:
        return {"epsilon": self.epsilon, "k": self.k, "N": self.N, "lambda": self.lam,
                "gamma": self.gamma, "eta": self.eta, "R_v_rule": self.R_v_rule}


def parameter_schedule(epsilon: float, k: int, cap: float = 1e6) -> Schedule:
    """``N = ceil(eps^-4k)``, ``lambda = eps^8 / log(1 + N)``, ``gamma = eps``, ``eta = eps^2``."""
    if not 0 < epsilon < 1:
        raise InvalidConfig("epsilon must lie in (0, 1)", name="epsilon", value=epsilon)
    if int(k) != k or k < 1:
        raise InvalidConfig("k must be a positive integer", name="k", value=k)
    raw = epsilon ** (-4.0 * k)
    if raw > cap * (1 + 1e-12):
        raise InvalidConfig("schedule needs more chains than the cap allows", name="N", value=raw, cap=cap)
    # absorb round-off in exact powers such as 0.5**-4
    N = max(1, math.ceil(raw * (1 - 1e-12)))
    return Schedule(float(epsilon), int(k), N, epsilon**8 / math.log1p(N), float(epsilon), epsilon**2)

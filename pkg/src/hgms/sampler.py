"""Unadjusted Langevin sampling of the Gibbs measure ``exp(-g(theta, x)/lambda)``.

Chains run in lockstep as one ``(N, d)`` array, but each chain draws its
Gaussian increments from its own generator, so a chain's output depends only
on ``(seed, chain_index, outer_iteration, theta, config)`` and never on how
many other chains run beside it.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np

from .core import BilevelProblem, InvalidConfig, NonFinite, check_vector

__all__ = [
    "MIX_FUNCTION",
    "splitmix64",
    "substream_seed",
    "GaussianAtCenter",
    "GaussianOnManifold",
    "FixedPoints",
    "GibbsSamplerConfig",
    "ChainOutput",
    "ula_chain",
    "sample_parallel",
    "ula_run",
    "stationary_variance_diag",
    "tube_scaling",
]

LOG = logging.getLogger(__name__)

MASK64 = (1 << 64) - 1
MIX_FUNCTION = "splitmix64(splitmix64(splitmix64(seed) ^ chain) ^ outer_iteration)"
_BLOCK = 512


def splitmix64(z: int) -> int:
    """SplitMix64 finalizer (Steele, Lea, Flood 2014)."""
    z = (z + 0x9E3779B97F4A7C15) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def substream_seed(seed: int, chain: int, outer_iteration: int = 0) -> int:
    z = splitmix64(int(seed) & MASK64)
    z = splitmix64(z ^ (int(chain) & MASK64))
    return splitmix64(z ^ (int(outer_iteration) & MASK64))


@dataclass(frozen=True)
class GaussianAtCenter:
    center: np.ndarray
    tau: float = 1.0


@dataclass(frozen=True)
class GaussianOnManifold:
    """Uniform point on ``S(theta)`` plus ``N(0, tau*lambda*I)``; needs an analytic problem."""

    tau: float = 1.0


@dataclass(frozen=True)
class FixedPoints:
    """Explicit chain starts: a ``(N, d)`` array, a single point, or ``theta -> points``."""

    points: Union[np.ndarray, Callable]


InitSpec = Union[GaussianAtCenter, GaussianOnManifold, FixedPoints]


@dataclass(frozen=True)
class GibbsSamplerConfig:
    lam: float
    n_chains: int
    n_steps: int
    step_size: float
    init: InitSpec = field(default_factory=GaussianOnManifold)
    seed: int = 0
    warm_start: bool = False

    def __post_init__(self):
        if not (np.isfinite(self.lam) and self.lam > 0):
            raise InvalidConfig("lambda must be > 0", name="lambda", value=self.lam)
        if not (np.isfinite(self.step_size) and self.step_size > 0):
            raise InvalidConfig("stepsize must be > 0", name="stepsize", value=self.step_size)
        if int(self.n_chains) != self.n_chains or self.n_chains < 1:
            raise InvalidConfig("chains must be >= 1", name="chains", value=self.n_chains)
        if int(self.n_steps) != self.n_steps or self.n_steps < 0:
            raise InvalidConfig("steps must be >= 0", name="steps", value=self.n_steps)
        tau = getattr(self.init, "tau", None)
        if tau is not None and not tau > 0:
            raise InvalidConfig("tau must be > 0", name="tau", value=tau)

    def to_dict(self) -> dict:
        init = {"kind": type(self.init).__name__}
        if isinstance(self.init, (GaussianAtCenter, GaussianOnManifold)):
            init["tau"] = self.init.tau
        if isinstance(self.init, GaussianAtCenter):
            init["center"] = np.asarray(self.init.center).tolist()
        return {
            "lambda": self.lam, "chains": self.n_chains, "steps": self.n_steps,
            "stepsize": self.step_size, "seed": self.seed, "warm_start": self.warm_start,
            "init": init,
        }


@dataclass
class ChainOutput:
    points: np.ndarray
    seeds: list
    dist_mean: Optional[float] = None
    dist_max: Optional[float] = None

    def __len__(self):
        return len(self.points)


def _initial_states(p, theta, cfg, gens, manifold_sampler):
    d = p.dims.d
    n = len(gens)
    init = cfg.init
    if isinstance(init, FixedPoints):
        pts = init.points(theta) if callable(init.points) else init.points
        pts = np.asarray(pts, dtype=float)
        if pts.ndim == 1:
            pts = np.tile(check_vector(pts, d, "init point"), (n, 1))
        return pts.copy()
    sd = np.sqrt(init.tau * cfg.lam)
    if isinstance(init, GaussianAtCenter):
        center = check_vector(init.center, d, "init center")
        return np.stack([center + sd * gen.standard_normal(d) for gen in gens])
    if manifold_sampler is None:
        raise InvalidConfig(
            "GaussianOnManifold needs an analytic problem", name="init", value="GaussianOnManifold"
        )
    return np.stack([manifold_sampler(theta, gen, 1)[0] + sd * gen.standard_normal(d) for gen in gens])


def ula_run(p: BilevelProblem, theta, x0, lam: float, step_size: float, n_steps: int, gens,
            chain_offset: int = 0, keep_path: bool = False):
    """Advance the ``(n, d)`` states ``x0`` by ``n_steps`` ULA steps.

    ``gens[i]`` supplies the increments of row ``i``. With ``keep_path`` the
    ``(n_steps, n, d)`` array of all iterates is returned instead.
    """
    x = np.array(x0, dtype=float)
    n, d = x.shape
    path = np.empty((n_steps, n, d)) if keep_path else None
    noise_scale = np.sqrt(2.0 * lam * step_size)
    done = 0
    while done < n_steps:
        b = min(_BLOCK, n_steps - done)
        xi = np.stack([gen.standard_normal((b, d)) for gen in gens], axis=1)
        # divergence is reported below as NonFinite, not as numpy warnings
        with np.errstate(over="ignore", invalid="ignore"):
            for s in range(b):
                x = x - step_size * p.grad_x_g_batch(theta, x) + noise_scale * xi[s]
                if keep_path:
                    path[done + s] = x
        if not np.all(np.isfinite(x)):
            bad = int(np.flatnonzero(~np.all(np.isfinite(x), axis=1))[0])
            raise NonFinite(
                "ULA iterate left the finite range; stepsize too large?",
                name="stepsize", value=step_size, chain_index=chain_offset + bad, step=done + b,
            )
        done += b
    return path if keep_path else x


def _generators(seed, indices, outer_iteration):
    seeds = [substream_seed(seed, i, outer_iteration) for i in indices]
    return seeds, [np.random.default_rng(s) for s in seeds]


def sample_parallel(p: BilevelProblem, theta, cfg: GibbsSamplerConfig, outer_iteration: int = 0,
                    analytic=None) -> ChainOutput:
    """Run ``cfg.n_chains`` independent ULA chains; output is ordered by chain index."""
    theta = check_vector(theta, p.dims.m, "theta")
    seeds, gens = _generators(cfg.seed, range(cfg.n_chains), outer_iteration)
    sampler = analytic.sample_manifold if analytic is not None else None
    x0 = _initial_states(p, theta, cfg, gens, sampler)
    pts = ula_run(p, theta, x0, cfg.lam, cfg.step_size, cfg.n_steps, gens)
    out = ChainOutput(pts, seeds)
    if analytic is not None:
        dist = np.asarray(analytic.dist_to_manifold(theta, pts), dtype=float)
        out.dist_mean, out.dist_max = float(dist.mean()), float(dist.max())
    return out


def ula_chain(p: BilevelProblem, theta, cfg: GibbsSamplerConfig, chain_index: int,
              outer_iteration: int = 0, analytic=None) -> np.ndarray:
    """Final state of one chain; identical to row ``chain_index`` of :func:`sample_parallel`."""
    if not 0 <= chain_index < cfg.n_chains:
        raise InvalidConfig("chain_index out of range", name="chain_index", value=chain_index)
    theta = check_vector(theta, p.dims.m, "theta")
    seeds, gens = _generators(cfg.seed, [chain_index], outer_iteration)
    sampler = analytic.sample_manifold if analytic is not None else None
    init = cfg.init
    if isinstance(init, FixedPoints):
        pts = init.points(theta) if callable(init.points) else init.points
        pts = np.asarray(pts, dtype=float)
        x0 = pts[chain_index][None, :] if pts.ndim == 2 else pts[None, :]
    else:
        x0 = _initial_states(p, theta, cfg, gens, sampler)
    return ula_run(p, theta, x0, cfg.lam, cfg.step_size, cfg.n_steps, gens, chain_index)[0]


def stationary_variance_diag(lam: float, step_size: float, n_steps: int, n_samples: int,
                             seed: int = 0, d: int = 1) -> dict:
    """Empirical ULA variance on ``g = |x|^2/2`` against ``lam / (1 - h/2)``.

    Uses ``n_samples`` independent chains started at 0 and keeps each final
    state, so the samples are independent.
    """
    from .core import FeasibleSet, ProblemDims

    quad = BilevelProblem(
        ProblemDims(1, d),
        f=lambda th, x: 0.0, grad_theta_f=lambda th, x: np.zeros(1), grad_x_f=lambda th, x: np.zeros(d),
        g=lambda th, x: 0.5 * np.sum(np.asarray(x) ** 2, axis=-1),
        grad_x_g=lambda th, x: np.asarray(x, dtype=float),
        hvp=lambda th, x, v: np.asarray(v, dtype=float),
        mixed=lambda th, x, v: np.zeros(1),
        feasible=FeasibleSet.full(), vectorized=True, name="gaussian",
    )
    cfg = GibbsSamplerConfig(lam, n_samples, n_steps, step_size, FixedPoints(np.zeros(d)), seed)
    out = sample_parallel(quad, np.zeros(1), cfg)
    emp = float(np.mean(out.points**2))
    pred = lam / (1.0 - step_size / 2.0)
    return {"lambda": lam, "h": step_size, "k_steps": n_steps, "samples": n_samples * d,
            "empirical_var": emp, "predicted_var": pred, "rel_err": abs(emp - pred) / pred}


def tube_scaling(ap, theta, lambdas, template: GibbsSamplerConfig):
    """Mean squared distance to ``S(theta)`` of the final chain states, per ``lambda``.

    Returns ``(rows, fit)`` with ``rows = [(lambda, mean_sq_dist), ...]`` and a
    log-log fit of distance against ``lambda`` when there are >= 3 values.
    """
    from dataclasses import replace

    from .oracle import fit_loglog

    theta = check_vector(theta, ap.dims.m, "theta")
    rows = []
    for lam in sorted(float(v) for v in lambdas):
        out = sample_parallel(ap.problem, theta, replace(template, lam=lam), analytic=ap)
        dist = np.asarray(ap.dist_to_manifold(theta, out.points), dtype=float)
        rows.append((lam, float(np.mean(dist**2))))
    fit = fit_loglog([r[0] for r in rows], [r[1] for r in rows]) if len(rows) >= 3 else None
    return rows, fit

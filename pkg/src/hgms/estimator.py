"""Estimator-style wrapper around :func:`run_hgms`."""
from __future__ import annotations

from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator

from .hypergrad import HyperGradConfig
from .outer import OuterConfig, run_hgms
from .sampler import GaussianAtCenter, GaussianOnManifold, GibbsSamplerConfig

__all__ = ["HGMS"]


class HGMS(BaseEstimator):
    """Hyper-gradient descent with minima selection.

    ``fit`` takes the bilevel problem in place of a data matrix. Chains start
    on the solution manifold when the problem is analytic, else around
    ``init_center`` (zeros by default).

    Attributes set by ``fit``: ``theta_``, ``trace_``, ``n_iter_``.
    """

    def __init__(self, lam: float = 1e-4, n_chains: int = 64, n_steps: int = 1000, step_size: float = 1e-3,
                 tau: float = 1.0, init_center=None, gamma: float = 1e-1, eta: float = 1e-8,
                 max_cg_iters: Optional[int] = None, clip_radius: Optional[float] = None,
                 alpha: float = 0.1, T: int = 100, stop_on_error: bool = False,
                 record_oracle_error: bool = True, warm_start: bool = False, seed: int = 0):
        self.lam = lam
        self.n_chains = n_chains
        self.n_steps = n_steps
        self.step_size = step_size
        self.tau = tau
        self.init_center = init_center
        self.gamma = gamma
        self.eta = eta
        self.max_cg_iters = max_cg_iters
        self.clip_radius = clip_radius
        self.alpha = alpha
        self.T = T
        self.stop_on_error = stop_on_error
        self.record_oracle_error = record_oracle_error
        self.warm_start = warm_start
        self.seed = seed

    def _configs(self, problem):
        analytic = hasattr(problem, "F_exact")
        if analytic:
            init = GaussianOnManifold(self.tau)
        else:
            d = problem.dims.d
            center = np.zeros(d) if self.init_center is None else np.asarray(self.init_center, dtype=float)
            init = GaussianAtCenter(center, self.tau)
        sampler = GibbsSamplerConfig(self.lam, self.n_chains, self.n_steps, self.step_size, init,
                                     self.seed, self.warm_start)
        hyper = HyperGradConfig(self.gamma, self.eta, self.max_cg_iters, self.clip_radius, self.warm_start)
        outer = OuterConfig(self.alpha, self.T, self.stop_on_error, self.record_oracle_error)
        return sampler, hyper, outer

    def fit(self, problem, theta0=None):
        """Run the outer loop from ``theta0`` (the problem's feasible-set projection of 0 if omitted)."""
        sampler, hyper, outer = self._configs(problem)
        if theta0 is None:
            theta0 = np.zeros(problem.dims.m)
        self.trace_ = run_hgms(problem, theta0, sampler, hyper, outer)
        self.theta_ = self.trace_.theta_final
        self.n_iter_ = len(self.trace_)
        return self

    def score(self, problem, y=None) -> float:
        """Negative hyper-objective at ``theta_`` (exact when analytic, else the best sampled ``f``)."""
        if hasattr(problem, "F_exact"):
            return -float(problem.F_exact(self.theta_))
        p = problem
        sampler, _, _ = self._configs(problem)
        from .sampler import sample_parallel
        from .selector import best_of_n

        pts = sample_parallel(p, self.theta_, sampler, outer_iteration=self.n_iter_)
        return -best_of_n(p, self.theta_, pts).value

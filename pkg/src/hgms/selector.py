"""Best-of-N optimistic selection and the selection-error sweep."""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from .core import InvalidConfig, NonFinite, check_vector
from .sampler import ChainOutput, GibbsSamplerConfig, sample_parallel, splitmix64

__all__ = ["SelectionResult", "best_of_n", "RateRow", "RateTable", "selection_error_sweep"]


@dataclass
class SelectionResult:
    index: int
    point: np.ndarray
    value: float
    all_values: np.ndarray
    dist_to_manifold: Optional[float] = None


def best_of_n(p, theta, candidates, analytic=None) -> SelectionResult:
    """Pick the candidate with the smallest upper-level value.

    Ties go to the smallest index (exact float comparison). ``candidates`` is a
    :class:`ChainOutput` or an ``(N, d)`` array.
    """
    pts = candidates.points if isinstance(candidates, ChainOutput) else np.asarray(candidates, dtype=float)
    if pts.ndim != 2 or len(pts) == 0:
        raise InvalidConfig("candidates must be a nonempty (N, d) array", name="candidates", value=pts.shape)
    theta = check_vector(theta, p.dims.m, "theta")
    values = p.f_batch(theta, pts)
    if np.any(np.isnan(values)):
        bad = int(np.flatnonzero(np.isnan(values))[0])
        raise NonFinite("f is NaN at a candidate", name="f", value=float("nan"), chain_index=bad)
    i = int(np.argmin(values))  # first occurrence of the minimum
    dist = None
    if analytic is not None:
        dist = float(analytic.dist_to_manifold(theta, pts[i]))
    return SelectionResult(i, pts[i].copy(), float(values[i]), values, dist)


@dataclass
class RateRow:
    lam: float
    n: int
    mean_sq_err: float
    stderr: Optional[float]
    replicates: int


@dataclass
class RateTable:
    rows: list
    slope_vs_n: Optional[object] = None
    slope_vs_lambda: Optional[object] = None
    theta: Optional[list] = None

    def lookup(self, lam, n) -> RateRow:
        for row in self.rows:
            if row.lam == lam and row.n == n:
                return row
        raise KeyError((lam, n))


def _replicate_seed(seed: int, replicate: int) -> int:
    return splitmix64((splitmix64(int(seed)) ^ (0xA5A5 + int(replicate))) & ((1 << 64) - 1))


def selection_error_sweep(ap, theta, lambdas: Sequence[float], ns: Sequence[int], replicates: int,
                          template: GibbsSamplerConfig, workers: int = 1) -> RateTable:
    """Mean ``|x_hat - x_star|^2`` over replicates for every ``(lambda, N)`` pair.

    Replicate ``r`` draws its chains from ``(seed_r, chain)`` substreams, so the
    first ``N`` chains are shared across all ``N`` values of a replicate.
    Slopes are fitted against ``N`` at the smallest ``lambda`` and against
    ``lambda`` at the largest ``N`` (when the respective grid has >= 3 points).
    """
    from .oracle import fit_loglog

    lambdas = [float(v) for v in lambdas]
    ns = sorted(int(v) for v in ns)
    if not lambdas or not ns:
        raise InvalidConfig("grids must be nonempty", name="grid", value=(lambdas, ns))
    if replicates < 1:
        raise InvalidConfig("replicates must be >= 1", name="replicates", value=replicates)
    theta = check_vector(theta, ap.dims.m, "theta")
    xs = ap.x_star(theta)
    if xs is None:
        raise InvalidConfig("x_star undefined at theta", name="theta", value=theta.tolist())
    p = ap.problem
    n_max = ns[-1]

    def one(lam, r):
        cfg = replace(template, lam=lam, n_chains=n_max, seed=_replicate_seed(template.seed, r))
        pts = sample_parallel(p, theta, cfg, analytic=ap).points
        errs = []
        for n in ns:
            sel = best_of_n(p, theta, pts[:n])
            errs.append(float(np.sum((sel.point - xs) ** 2)))
        return errs

    rows = []
    for lam in lambdas:
        if workers and workers > 1:
            with ThreadPoolExecutor(workers) as ex:
                errs = np.array(list(ex.map(lambda r: one(lam, r), range(replicates))))
        else:
            errs = np.array([one(lam, r) for r in range(replicates)])
        for j, n in enumerate(ns):
            col = errs[:, j]
            se = float(col.std(ddof=1) / np.sqrt(replicates)) if replicates > 1 else None
            rows.append(RateRow(lam, n, float(col.mean()), se, replicates))

    table = RateTable(rows, theta=theta.tolist())
    if len(ns) >= 3:
        lam0 = min(lambdas)
        table.slope_vs_n = fit_loglog(ns, [table.lookup(lam0, n).mean_sq_err for n in ns])
    if len(lambdas) >= 3:
        table.slope_vs_lambda = fit_loglog(
            sorted(lambdas), [table.lookup(lam, n_max).mean_sq_err for lam in sorted(lambdas)]
        )
    return table

import itertools
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from hgms import testbed as tb
from hgms.core import FeasibleSet, InvalidConfig, NonFinite
from hgms.hypergrad import HyperGradConfig
from hgms.outer import OuterConfig, parameter_schedule, project, run_exact_gradient, run_hgms, step
from hgms.sampler import FixedPoints, GaussianOnManifold, GibbsSamplerConfig

finite = st.floats(-50, 50)


def _exact_sampler(ap, seed=0):
    return GibbsSamplerConfig(1e-4, 1, 0, 1e-3, FixedPoints(lambda th: ap.x_star(th)), seed=seed)


# ---------- projection and step ----------

def test_simplex_projection_example():
    assert np.allclose(project(FeasibleSet.simplex(3), [0.5, 0.5, 2.0]), [0.0, 0.0, 1.0])
    assert np.allclose(project(FeasibleSet.simplex(3), [0.2, 0.3, 0.5]), [0.2, 0.3, 0.5])
    assert np.allclose(project(FeasibleSet.simplex(2), [1.0, 1.0]), [0.5, 0.5])


def test_simplex_projection_matches_grid_search():
    rng = np.random.default_rng(2)
    h = 1 / 200
    grid = np.array([(a * h, b * h, 1 - (a + b) * h) for a, b in itertools.product(range(201), repeat=2)
                     if a + b <= 200])
    for _ in range(10):
        u = rng.normal(0, 1, 3)
        best = grid[np.argmin(np.sum((grid - u) ** 2, axis=1))]
        assert np.linalg.norm(project(FeasibleSet.simplex(3), u) - best) <= 2 * h


def test_box_and_full_projection():
    box = FeasibleSet.box([0.0, -1.0], [1.0, 1.0])
    assert np.allclose(project(box, [2.0, -3.0]), [1.0, -1.0])
    assert np.allclose(project(FeasibleSet.full(), [5.0, -7.0]), [5.0, -7.0])


def test_project_rejects_nonfinite():
    with pytest.raises(NonFinite):
        project(FeasibleSet.box(0, 1, m=1), [float("nan")])


def test_step_example():
    nxt, G = step([0.2], [1.0], 0.5, FeasibleSet.box(0.08, 0.36, m=1))
    assert np.allclose(nxt, [0.08]) and np.allclose(G, [0.24])
    nxt, G = step([0.2], [0.1], 0.5, FeasibleSet.box(0.08, 0.36, m=1))
    assert np.allclose(nxt, [0.15]) and np.allclose(G, [0.1])


@given(arrays(np.float64, 4, elements=finite))
def test_box_idempotent(u):
    box = FeasibleSet.box([-1, 0, 2, -5], [1, 3, 4, -4])
    p = project(box, u)
    assert box.contains(p)
    assert np.array_equal(project(box, p), p)


@given(arrays(np.float64, 4, elements=finite), arrays(np.float64, 4, elements=finite))
def test_box_nonexpansive(u, w):
    box = FeasibleSet.box([-1, 0, 2, -5], [1, 3, 4, -4])
    assert np.linalg.norm(project(box, u) - project(box, w)) <= np.linalg.norm(u - w) + 1e-12


@given(arrays(np.float64, st.integers(1, 8), elements=finite))
def test_simplex_idempotent_and_feasible(u):
    s = FeasibleSet.simplex(len(u))
    p = project(s, u)
    assert s.contains(p)
    assert np.allclose(project(s, p), p, atol=1e-12)


@given(st.integers(1, 8).flatmap(lambda n: st.tuples(arrays(np.float64, n, elements=finite),
                                                      arrays(np.float64, n, elements=finite))))
def test_simplex_nonexpansive(uw):
    u, w = uw
    s = FeasibleSet.simplex(len(u))
    assert np.linalg.norm(project(s, u) - project(s, w)) <= np.linalg.norm(u - w) + 1e-9


@given(st.floats(0.09, 0.35), st.floats(-0.01, 0.01), st.floats(0.01, 1.0))
def test_grad_map_equals_h_when_projection_inactive(theta, h, alpha):
    box = FeasibleSet.box(0.08, 0.36, m=1)
    nxt, G = step([theta], [h], alpha, box)
    if box.contains(np.array([theta]) - alpha * h) and 0.08 < nxt[0] < 0.36:
        assert G[0] == pytest.approx(h, rel=1e-9, abs=1e-12)


# ---------- outer loop ----------

def test_singleton_converges_identity():
    ap = tb.make_singleton()
    tr = run_hgms(ap, [1.5, -0.7], _exact_sampler(ap), HyperGradConfig(gamma=0.0, eta=1e-12),
                  OuterConfig(alpha=1.0, T=5))
    assert np.linalg.norm(tr.theta_final) <= 1e-6


def test_singleton_converges_general_A():
    A = np.array([[2.0, 0.5], [0.0, 1.0]])
    ap = tb.make_singleton(A)
    alpha = 1 / np.linalg.norm(A @ A.T, 2)
    tr = run_hgms(ap, [1.5, -0.7], _exact_sampler(ap), HyperGradConfig(gamma=0.0, eta=1e-12),
                  OuterConfig(alpha=alpha, T=300))
    assert np.linalg.norm(tr.theta_final) <= 1e-6
    assert all(r.oracle_err <= 1e-9 for r in tr.records)


def test_single_iteration_record(sphere3):
    cfg = GibbsSamplerConfig(1e-4, 8, 100, 1e-3, GaussianOnManifold(), seed=1)
    tr = run_hgms(sphere3, [1.5], cfg, HyperGradConfig(gamma=0.1), OuterConfig(alpha=0.2, T=1))
    assert len(tr) == 1
    r = tr.records[0]
    assert r.t == 0 and np.allclose(r.theta, [1.5])
    assert np.allclose(r.grad_map, (r.theta - r.theta_next) / 0.2)
    assert r.error is None and not r.flagged
    assert r.f_selected == r.f_min <= r.f_mean
    assert r.oracle_err is not None and r.F_true == pytest.approx(sphere3.F_exact(np.array([1.5])))
    assert tr.columns() == ["t", "theta_0", "f_selected", "grad_map_norm", "cg_iters", "cg_residual",
                            "clipped", "dist_to_manifold", "oracle_err", "error"]


def test_iterates_stay_feasible(circle):
    cfg = GibbsSamplerConfig(1e-4, 16, 200, 1e-3, GaussianOnManifold(), seed=2)
    tr = run_hgms(circle, [0.35], cfg, HyperGradConfig(gamma=0.1), OuterConfig(alpha=0.5, T=20))
    assert all(circle.problem.feasible.contains(r.theta_next) for r in tr.records)


def test_infeasible_start_is_projected(circle):
    cfg = GibbsSamplerConfig(1e-4, 4, 10, 1e-3, GaussianOnManifold(), seed=0)
    tr = run_hgms(circle, [2.0], cfg, HyperGradConfig(gamma=0.1), OuterConfig(alpha=0.1, T=1))
    assert tr.theta0_projected and np.allclose(tr.records[0].theta, [0.36])
    assert tr.summary()["theta0"] == [2.0]


def test_cg_budget_flags_rows(sphere3):
    cfg = GibbsSamplerConfig(1e-4, 8, 100, 1e-3, GaussianOnManifold(), seed=0)
    tr = run_hgms(sphere3, [1.5], cfg, HyperGradConfig(gamma=0.1, eta=1e-14, max_cg_iters=1),
                  OuterConfig(alpha=0.2, T=4))
    assert len(tr) == 4 and all(r.error == "CgBudgetExceeded" for r in tr.records)
    assert all(np.all(r.h_hat == 0) for r in tr.records)
    assert tr.summary()["flagged_rows"] == 4 and not tr.aborted


def test_stop_on_error_aborts(sphere3):
    cfg = GibbsSamplerConfig(1e-4, 8, 100, 1e-3, GaussianOnManifold(), seed=0)
    tr = run_hgms(sphere3, [1.5], cfg, HyperGradConfig(gamma=0.1, eta=1e-14, max_cg_iters=1),
                  OuterConfig(alpha=0.2, T=4, stop_on_error=True))
    assert len(tr) == 1 and tr.aborted and "CgBudgetExceeded" in tr.error


def test_gamma_zero_on_degenerate_problem_raises(circle):
    cfg = GibbsSamplerConfig(1e-4, 4, 10, 1e-3, GaussianOnManifold(), seed=0)
    with pytest.raises(InvalidConfig):
        run_hgms(circle, [0.3], cfg, HyperGradConfig(gamma=0.0), OuterConfig(alpha=0.1, T=2))


def test_reproducible(sphere3):
    cfg = GibbsSamplerConfig(1e-4, 8, 50, 1e-3, GaussianOnManifold(), seed=7)
    a = run_hgms(sphere3, [1.5], cfg, HyperGradConfig(gamma=0.1), OuterConfig(alpha=0.2, T=5))
    b = run_hgms(sphere3, [1.5], cfg, HyperGradConfig(gamma=0.1), OuterConfig(alpha=0.2, T=5))
    assert a.rows() == b.rows()


def test_warm_start_runs(sphere3):
    cfg = GibbsSamplerConfig(1e-4, 8, 500, 1e-3, GaussianOnManifold(), seed=7, warm_start=True)
    tr = run_hgms(sphere3, [1.5], cfg, HyperGradConfig(gamma=0.1, warm_start=True), OuterConfig(alpha=0.2, T=5))
    assert len(tr) == 5 and tr.summary()["flagged_rows"] == 0


def test_pgd_bound_holds(sphere3):
    cfg = GibbsSamplerConfig(1e-4, 32, 500, 1e-3, GaussianOnManifold(), seed=3)
    tr = run_hgms(sphere3, [1.5], cfg, HyperGradConfig(gamma=0.1), OuterConfig(alpha=0.2, T=30))
    b = tr.pgd_bound()
    assert b is not None and b["lhs"] <= b["rhs"]


def test_exact_gradient_control(sphere3):
    tr = run_exact_gradient(sphere3, [1.5], OuterConfig(alpha=0.2, T=100))
    assert len(tr) == 100
    assert tr.F_final <= tr.records[0].F_true
    b = tr.pgd_bound()
    assert b["lhs"] <= b["rhs"]


def test_csv_and_json(tmp_path, sphere3):
    cfg = GibbsSamplerConfig(1e-4, 4, 20, 1e-3, GaussianOnManifold(), seed=0)
    tr = run_hgms(sphere3, [1.5], cfg, HyperGradConfig(gamma=0.1), OuterConfig(alpha=0.2, T=3))
    tr.write_csv(tmp_path / "t.csv", comments=["seed: 0"])
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == "# seed: 0" and lines[1].startswith("t,theta_0") and len(lines) == 5
    import json

    d = json.loads(tr.to_json())
    assert d["iterations"] == 3 and d["configs"]["hypergrad"]["gamma"] == 0.1


@pytest.mark.parametrize("kw", [{"alpha": 0.0, "T": 1}, {"alpha": 0.1, "T": 0}, {"alpha": float("inf"), "T": 3}])
def test_outer_config_validation(kw):
    with pytest.raises(InvalidConfig):
        OuterConfig(**kw)


# ---------- parameter schedule ----------

def test_schedule_examples():
    s = parameter_schedule(0.5, 1)
    assert s.N == 16 and s.gamma == 0.5 and s.eta == 0.25
    assert s.lam == pytest.approx(0.5**8 / math.log(17))
    assert s.lam == pytest.approx(0.0013787, rel=1e-4)
    assert parameter_schedule(0.9, 2).N == 3
    assert s.clip_radius(1.0) == pytest.approx(2 / 0.5 * 1.25)


def test_schedule_cap():
    with pytest.raises(InvalidConfig):
        parameter_schedule(0.1, 2)
    assert parameter_schedule(0.1, 1).N == 10_000


@pytest.mark.parametrize("eps,k", [(0.0, 1), (1.0, 1), (0.5, 0), (0.5, 1.5)])
def test_schedule_validation(eps, k):
    with pytest.raises(InvalidConfig):
        parameter_schedule(eps, k)

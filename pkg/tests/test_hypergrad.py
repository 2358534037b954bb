import dataclasses

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from hgms import testbed as tb
from hgms.core import BilevelProblem, CgBudgetExceeded, FeasibleSet, InvalidConfig, OracleDisagreement, ProblemDims
from hgms.hypergrad import (
    HyperGradConfig,
    clip,
    default_cg_budget,
    exact_pseudoinverse_hypergradient,
    hypergradient,
    ridge_cg_solve,
    tube_radius,
)
from hgms.oracle import fit_loglog
from hgms.sampler import GaussianOnManifold, GibbsSamplerConfig, sample_parallel


def _quadratic(H, pd=True):
    """Lower level ``x^T H x / 2`` with constant Hessian ``H``; f is linear in x."""
    H = np.asarray(H, dtype=float)
    d = H.shape[0]
    return BilevelProblem(
        ProblemDims(1, d),
        lambda th, x: float(np.sum(x)),
        lambda th, x: np.zeros(1),
        lambda th, x: np.ones(d),
        lambda th, x: 0.5 * float(x @ H @ x),
        lambda th, x: H @ x,
        lambda th, x, v: H @ np.asarray(v, dtype=float),
        lambda th, x, v: np.zeros(1),
        feasible=FeasibleSet.box(-1.0, 1.0, m=1),
        name="quadratic",
        meta={"positive_definite": pd},
    )


# ---------- worked examples ----------

def test_cg_on_rank_one_ring_hessian():
    ap = tb.make_circle_kink(theta_box=(0.08, 1.5))
    x = np.array([np.sqrt(2.0), 0.0])
    th = np.array([1.0])
    res = ridge_cg_solve(ap.problem, th, x, HyperGradConfig(gamma=0.1, eta=1e-12), b=np.array([1.0, 1.0]))
    assert res.converged
    assert np.allclose(res.v, [1 / 16.1, 10.0], rtol=0, atol=1e-10)
    assert res.iterations <= 2


def test_identity_hessian_one_iteration():
    p = _quadratic(np.eye(3))
    res = ridge_cg_solve(p, [0.0], np.zeros(3), HyperGradConfig(gamma=0.0, eta=1e-12), b=np.array([1.0, -2.0, 3.0]))
    assert res.iterations == 1
    assert np.allclose(res.v, [1.0, -2.0, 3.0], atol=1e-14)


def test_zero_rhs_returns_immediately():
    p = _quadratic(np.eye(2))
    res = ridge_cg_solve(p, [0.0], np.zeros(2), HyperGradConfig(gamma=0.1), b=np.zeros(2))
    assert res.iterations == 0 and res.residual == 0.0 and res.converged
    assert np.all(res.v == 0)


def test_clip_examples():
    v, c = clip([0.0621, 10.0], 5.0)
    assert c and abs(np.linalg.norm(v) - 5.0) < 1e-12
    assert np.allclose(v / np.linalg.norm(v), np.array([0.0621, 10.0]) / np.hypot(0.0621, 10.0))
    v, c = clip([0.0621, 10.0], 20.0)
    assert not c and np.allclose(v, [0.0621, 10.0])
    v, c = clip([3.0, 4.0], None)
    assert not c and np.allclose(v, [3.0, 4.0])


def test_singleton_unregularized_exact(singleton):
    for th in ([0.3, -1.2], [1.0, 1.0], [0.0, 0.0]):
        th = np.array(th)
        est = hypergradient(singleton.problem, th, singleton.x_star(th), HyperGradConfig(gamma=0.0, eta=1e-13))
        assert np.allclose(est.h_hat, singleton.grad_F_exact(th), atol=1e-10)


def test_singleton_nondiagonal_exact():
    ap = tb.make_singleton(np.array([[2.0, 0.5], [0.0, 1.0]]))
    th = np.array([0.7, -0.4])
    est = hypergradient(ap.problem, th, ap.x_star(th), HyperGradConfig(gamma=0.0, eta=1e-13))
    assert np.allclose(est.h_hat, ap.grad_F_exact(th), atol=1e-10)


def test_sphere_small_ridge(sphere3):
    th = np.array([1.0])
    est = hypergradient(sphere3.problem, th, sphere3.x_star(th), HyperGradConfig(gamma=1e-6, eta=1e-12))
    assert abs(est.h_hat[0] - sphere3.grad_F_exact(th)[0]) <= 1e-4


def test_ridge_bias_linear_in_gamma(circle):
    th = np.array([0.3])
    xs = circle.x_star(th)
    g_true = circle.grad_F_exact(th)[0]
    gammas = [1e-1, 3e-2, 1e-2, 3e-3, 1e-3]
    errs = [abs(hypergradient(circle.problem, th, xs, HyperGradConfig(g, 1e-13)).h_hat[0] - g_true) for g in gammas]
    fit = fit_loglog(gammas, errs)
    assert 0.7 <= fit.slope <= 1.3


@pytest.mark.parametrize("name,theta", [("circle-kink", 0.3), ("circle-kink", 0.2), ("sphere-d3", 1.0),
                                        ("sphere-d4", -0.5), ("degenerate-circle", 0.3)])
def test_pinv_matches_exact(name, theta):
    ap = tb.get_problem(name)
    th = np.array([theta])
    assert np.allclose(exact_pseudoinverse_hypergradient(ap, th), ap.grad_F_exact(th), rtol=1e-6, atol=1e-8)


def test_pinv_singleton(singleton):
    th = np.array([1.0, 0.0])
    assert np.allclose(exact_pseudoinverse_hypergradient(singleton, th), [1.0, 0.0], atol=1e-8)


# ---------- failure modes ----------

def test_gamma_zero_needs_positive_definite(circle):
    th = np.array([0.3])
    with pytest.raises(InvalidConfig) as e:
        hypergradient(circle.problem, th, circle.x_star(th), HyperGradConfig(gamma=0.0))
    assert e.value.context["name"] == "gamma"


@pytest.mark.parametrize("kw", [{"gamma": -1.0}, {"eta": 0.0}, {"max_cg_iters": 0}, {"clip_radius": -2.0},
                                {"gamma": float("nan")}])
def test_config_validation(kw):
    with pytest.raises(InvalidConfig):
        HyperGradConfig(**kw)


def test_strict_budget_raises():
    H = np.diag(np.linspace(0.1, 10.0, 8))
    p = _quadratic(H)
    with pytest.raises(CgBudgetExceeded) as e:
        ridge_cg_solve(p, [0.0], np.zeros(8), HyperGradConfig(gamma=0.0, eta=1e-14, max_cg_iters=2), strict=True)
    assert e.value.result.iterations == 2 and not e.value.result.converged
    lax = ridge_cg_solve(p, [0.0], np.zeros(8), HyperGradConfig(gamma=0.0, eta=1e-14, max_cg_iters=2))
    assert not lax.converged


def test_pinv_rejects_wrong_manifold_dimension(circle):
    wrong = dataclasses.replace(circle, k=2)
    with pytest.raises(OracleDisagreement):
        exact_pseudoinverse_hypergradient(wrong, np.array([0.3]))


def test_pinv_rejects_nonunique_selection(circle):
    th = np.array([10.0 / (9 * np.pi)])
    with pytest.raises(InvalidConfig):
        exact_pseudoinverse_hypergradient(circle, th)


def test_default_budget_capped(sphere3):
    th = np.array([1.0])
    assert default_cg_budget(sphere3.problem, th, sphere3.x_star(th), 1e-8, 1e-12) == 30
    assert default_cg_budget(sphere3.problem, th, sphere3.x_star(th), 0.0, 1e-8) == 30


def test_tube_radius(circle, singleton):
    r = tube_radius(circle.problem, 0.1)
    assert r == pytest.approx(min(0.25, 0.1 / (2 * circle.problem.meta["L_g3"])))
    assert tube_radius(singleton.problem, 0.1) is None


def test_warm_start_uses_previous_solution(sphere3):
    th = np.array([1.0])
    xs = sphere3.x_star(th)
    cfg = HyperGradConfig(gamma=0.1, eta=1e-10, warm_start=True)
    cold = hypergradient(sphere3.problem, th, xs, cfg)
    warm = hypergradient(sphere3.problem, th, xs, cfg, v0=cold.v_tilde)
    assert warm.cg_iterations <= 1
    assert np.allclose(warm.h_hat, cold.h_hat, atol=1e-9)


# ---------- invariants ----------

@given(st.integers(1, 12).flatmap(lambda d: st.tuples(
    arrays(np.float64, (d, d), elements=st.floats(-1, 1)),
    arrays(np.float64, d, elements=st.floats(-1, 1)),
    st.floats(0.1, 1.0),
)))
def test_cg_matches_direct_solve(args):
    B, b, gamma = args
    d = len(b)
    H = B @ B.T
    p = _quadratic(H, pd=False)
    eta = 1e-11
    res = ridge_cg_solve(p, [0.0], np.zeros(d), HyperGradConfig(gamma=gamma, eta=eta), b=b)
    assert res.converged and res.iterations <= 2 * d
    A = H + gamma * np.eye(d)
    assert np.linalg.norm(A @ res.v - b) <= 10 * eta + 1e-13
    assert np.allclose(res.v, np.linalg.solve(A, b), atol=1e-9)


@pytest.mark.parametrize("name,theta", [("circle-kink", 0.3), ("sphere-d3", 1.0), ("degenerate-circle", 0.25)])
def test_ridge_bias_constant_stable(name, theta):
    ap = tb.get_problem(name)
    th = np.array([theta])
    xs, g_true = ap.x_star(th), ap.grad_F_exact(th)
    C = []
    for g in (1e-1, 1e-2, 1e-3, 1e-4):
        h = hypergradient(ap.problem, th, xs, HyperGradConfig(g, 1e-13)).h_hat
        C.append(np.linalg.norm(h - g_true) / g)
    assert max(C) / min(C) <= 2.0


@pytest.mark.parametrize("name,theta", [("circle-kink", 0.3), ("sphere-d3", 1.0), ("degenerate-circle", 0.3)])
@pytest.mark.parametrize("gamma", [1e-1, 1e-2, 1e-3])
def test_selected_point_stability(name, theta, gamma):
    ap = tb.get_problem(name)
    th = np.array([theta])
    xs = ap.x_star(th)
    h0 = hypergradient(ap.problem, th, xs, HyperGradConfig(gamma, 1e-13)).h_hat
    bound = ap.problem.meta["L_f1"]
    for ang in (1e-3, 1e-4):
        c, s = np.cos(ang), np.sin(ang)
        x = xs.copy()
        x[0], x[1] = c * xs[0] - s * xs[1], s * xs[0] + c * xs[1]
        h = hypergradient(ap.problem, th, x, HyperGradConfig(gamma, 1e-13)).h_hat
        assert np.linalg.norm(h - h0) <= bound * np.linalg.norm(x - xs) / gamma


@given(arrays(np.float64, st.integers(1, 6), elements=st.floats(-1e6, 1e6)), st.floats(1e-3, 1e3))
def test_clip_bound(v, R):
    out, clipped = clip(v, R)
    assert np.linalg.norm(out) <= R * (1 + 1e-12)
    if clipped:
        assert np.linalg.norm(out) == pytest.approx(R, rel=1e-12)
    else:
        assert np.array_equal(out, v)


@pytest.mark.parametrize("name,theta", [("circle-kink", 0.3), ("sphere-d3", 1.0)])
def test_clip_inactive_on_tube(name, theta):
    ap = tb.get_problem(name)
    th = np.array([theta])
    gamma, eta = 0.1, 1e-8
    R = 2.0 / gamma * (ap.problem.meta["L_f1"] + eta)
    cfg = GibbsSamplerConfig(1e-4, 32, 500, 1e-3, GaussianOnManifold(), seed=3)
    pts = sample_parallel(ap.problem, th, cfg, analytic=ap).points
    r_tube = tube_radius(ap.problem, gamma)
    near = [x for x in pts if ap.dist_to_manifold(th, x) <= r_tube]
    assert near
    for x in near:
        est = hypergradient(ap.problem, th, x, HyperGradConfig(gamma, eta, clip_radius=R))
        assert not est.clipped

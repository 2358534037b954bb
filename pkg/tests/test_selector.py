import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hgms.core import BilevelProblem, InvalidConfig, NonFinite, ProblemDims
from hgms.sampler import GaussianOnManifold, GibbsSamplerConfig
from hgms.selector import best_of_n, selection_error_sweep

TEMPLATE = GibbsSamplerConfig(1e-4, 1, 1000, 1e-3, GaussianOnManifold(), seed=11)


def _linear(d=2):
    return BilevelProblem(
        ProblemDims(1, d), f=lambda th, x: np.asarray(x)[..., 0], grad_theta_f=lambda th, x: np.zeros(1),
        grad_x_f=lambda th, x: np.eye(d)[0], g=lambda th, x: 0.0, grad_x_g=lambda th, x: np.zeros(d),
        hvp=lambda th, x, v: np.zeros(d), mixed=lambda th, x, v: np.zeros(1), vectorized=True,
    )


def _cands(values):
    v = np.asarray(values, dtype=float)
    return np.column_stack([v, np.arange(len(v), dtype=float)])


def test_single_candidate():
    sel = best_of_n(_linear(), [0.0], _cands([5.0]))
    assert sel.index == 0 and sel.value == 5.0


def test_tie_goes_to_smallest_index():
    sel = best_of_n(_linear(), [0.0], _cands([3.0, 1.0, 1.0]))
    assert sel.index == 1 and sel.value == 1.0
    np.testing.assert_array_equal(sel.point, [1.0, 1.0])


def test_nan_raises():
    with pytest.raises(NonFinite) as exc:
        best_of_n(_linear(), [0.0], _cands([1.0, np.nan]))
    assert exc.value.context["chain_index"] == 1


def test_empty_raises():
    with pytest.raises(InvalidConfig):
        best_of_n(_linear(), [0.0], np.zeros((0, 2)))


values = st.lists(st.integers(-5, 5).map(float), min_size=1, max_size=30)


@given(values, st.data())
def test_nested_monotonicity(vals, data):
    k = data.draw(st.integers(1, len(vals)))
    p = _linear()
    small = best_of_n(p, [0.0], _cands(vals[:k]))
    big = best_of_n(p, [0.0], _cands(vals))
    assert big.value <= small.value
    assert all(big.value <= v for v in vals)
    assert big.value == min(big.all_values)


@given(values, st.randoms(use_true_random=False))
def test_permutation_covariance(vals, rnd):
    p = _linear()
    cands = _cands(vals)
    perm = list(range(len(vals)))
    rnd.shuffle(perm)
    a = best_of_n(p, [0.0], cands)
    b = best_of_n(p, [0.0], cands[perm])
    assert a.value == b.value
    # the winner is the value-minimal candidate of smallest position in the permuted order
    ties = [i for i, j in enumerate(perm) if vals[j] == b.value]
    assert b.index == ties[0]


def test_sweep_validation(circle):
    with pytest.raises(InvalidConfig):
        selection_error_sweep(circle, [0.3], [], [4], 2, TEMPLATE)
    with pytest.raises(InvalidConfig):
        selection_error_sweep(circle, [0.3], [1e-3], [], 2, TEMPLATE)
    with pytest.raises(InvalidConfig):
        selection_error_sweep(circle, [10 / (9 * np.pi)], [1e-3], [4], 2, TEMPLATE)


def test_single_replicate_has_no_stderr(circle):
    tab = selection_error_sweep(circle, [0.3], [1e-3], [4, 8], 1, TEMPLATE)
    assert all(r.stderr is None for r in tab.rows)
    assert tab.slope_vs_n is None


def test_workers_do_not_change_results(circle):
    a = selection_error_sweep(circle, [0.3], [1e-3], [4, 16], 4, TEMPLATE, workers=1)
    b = selection_error_sweep(circle, [0.3], [1e-3], [4, 16], 4, TEMPLATE, workers=3)
    assert [r.mean_sq_err for r in a.rows] == [r.mean_sq_err for r in b.rows]


def test_singleton_error_is_lambda_dominated(singleton):
    tab = selection_error_sweep(singleton, [0.5, -0.5], [1e-2, 1e-4], [4], 50, TEMPLATE)
    hi, lo = tab.lookup(1e-2, 4).mean_sq_err, tab.lookup(1e-4, 4).mean_sq_err
    assert hi / lo >= 10


def test_circle_rate_in_n(circle):
    tab = selection_error_sweep(circle, [0.3], [1e-4], [4, 16, 64, 256, 1024], 100, TEMPLATE)
    print(f"circle-kink slope vs N: {tab.slope_vs_n.slope:.3f}")
    assert -1.4 <= tab.slope_vs_n.slope <= -0.6


def test_circle_rate_in_lambda(circle):
    tab = selection_error_sweep(circle, [0.3], [1e-2, 1e-3, 1e-4, 1e-5], [1024], 30, TEMPLATE)
    print(f"circle-kink slope vs lambda: {tab.slope_vs_lambda.slope:.3f}")
    assert 0.3 <= tab.slope_vs_lambda.slope <= 0.7


def test_sphere_rate_in_n(sphere3):
    tab = selection_error_sweep(sphere3, [1.0], [1e-5], [16, 64, 256, 1024, 4096], 30, TEMPLATE)
    print(f"sphere-d3 slope vs N: {tab.slope_vs_n.slope:.3f}")
    assert -0.75 <= tab.slope_vs_n.slope <= -0.25

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from mlwave.errors import DataError, NonFiniteObjective
from mlwave.optim import (
    BoxBounds,
    OptimizerOptions,
    check_gradient,
    minimize,
    minimize_box_quadratic,
    projected_gradient,
)

from oracles import projected_gradient_descent, rosenbrock


def sphere(c):
    c = np.asarray(c, dtype=float)
    return lambda x: (float(np.sum((x - c) ** 2)), 2 * (x - c))


def test_bounds_validation():
    with pytest.raises(DataError):
        BoxBounds([0.0, 1.0], [1.0, 0.0])
    with pytest.raises(DataError):
        BoxBounds([0.0], [1.0, 2.0])
    b = BoxBounds.unbounded(3)
    assert b.contains([1e300, -1e300, 0.0])


def test_quadratic_with_center_inside_the_box():
    c = np.array([0.3, -0.2, 0.9, 0.0, -0.5, 0.1])
    x, value, status = minimize(sphere(c), np.zeros(6), BoxBounds(-np.ones(6), np.ones(6)))
    assert np.max(np.abs(x - c)) < 1e-10 and value < 1e-10
    assert status == "converged"


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_quadratic_with_center_outside_is_clamped(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 9))
    lo = rng.uniform(-2, 0, n)
    hi = lo + rng.uniform(0.1, 2, n)
    c = rng.uniform(-4, 4, n)
    d = rng.uniform(0.5, 5, n)
    f = lambda x: (float(np.sum(d * (x - c) ** 2)), 2 * d * (x - c))  # noqa: E731
    b = BoxBounds(lo, hi)
    res = minimize(f, rng.uniform(lo, hi), b, OptimizerOptions(grad_tol=1e-10))
    assert np.max(np.abs(res.x - np.clip(c, lo, hi))) < 1e-8


def test_unbounded_problem_degrades_to_lbfgs(rng):
    a = rng.normal(size=(8, 8))
    h = a @ a.T + np.eye(8)
    c = rng.normal(size=8)
    f = lambda x: (float(0.5 * x @ h @ x - c @ x), h @ x - c)  # noqa: E731
    x, _, status = minimize(f, np.zeros(8), BoxBounds.unbounded(8), OptimizerOptions(grad_tol=1e-10, max_iters=500))
    assert status == "converged"
    assert np.allclose(x, np.linalg.solve(h, c), atol=1e-8)
    x2, _, _ = minimize(f, np.zeros(8), None, OptimizerOptions(grad_tol=1e-10, max_iters=500))
    assert np.allclose(x2, x)


def test_rosenbrock_matches_projected_gradient_oracle():
    lo, hi = np.full(6, -2.0), np.full(6, 2.0)
    x0 = np.array([-1.2, 1.0, -1.2, 1.0, -1.2, 1.0])
    _, oracle = projected_gradient_descent(rosenbrock, x0, lo, hi)
    res = minimize(rosenbrock, x0, BoxBounds(lo, hi), OptimizerOptions(max_iters=2000, grad_tol=1e-9))
    assert abs(res.value - oracle) <= 1e-6


def test_rosenbrock_with_active_bounds_matches_oracle():
    lo, hi = np.full(6, -2.0), np.full(6, 0.7)
    x0 = np.full(6, -1.0)
    # at f near 2.7 the projected gradient bottoms out around 1e-8 from round-off
    xo, oracle = projected_gradient_descent(rosenbrock, x0, lo, hi, tol=1e-7)
    res = minimize(rosenbrock, x0, BoxBounds(lo, hi), OptimizerOptions(max_iters=2000, grad_tol=1e-9))
    assert abs(res.value - oracle) <= 1e-6
    assert np.max(np.abs(res.x - xo)) < 1e-4
    assert res.x[0] == 0.7


def test_iterates_are_feasible_and_monotone(rng):
    lo, hi = np.full(6, -0.5), np.full(6, 0.5)
    b = BoxBounds(lo, hi)
    seen = []

    def f(x):
        seen.append(x.copy())
        return rosenbrock(x)

    res = minimize(f, rng.uniform(-3, 3, 6), b, OptimizerOptions(max_iters=200))
    assert all(b.contains(x) for x in seen)
    assert np.all(np.diff(res.values) <= 0)
    assert res.value <= res.values[0]


def test_start_outside_box_is_clamped():
    res = minimize(sphere([0.0, 0.0]), np.array([5.0, -5.0]), BoxBounds([-1.0, -1.0], [1.0, 1.0]))
    assert np.allclose(res.x, 0.0, atol=1e-8)


def test_non_finite_objective_raises():
    with pytest.raises(NonFiniteObjective):
        minimize(lambda x: (float("nan"), np.zeros_like(x)), np.zeros(2))


def test_iteration_cap_reports_status():
    res = minimize(rosenbrock, np.full(6, -1.5), BoxBounds(np.full(6, -2.0), np.full(6, 2.0)), OptimizerOptions(max_iters=3))
    assert res.status == "max_iters" and res.iterations == 3


def test_check_gradient_detects_wrong_gradients(rng):
    x = rng.normal(size=6)
    assert check_gradient(rosenbrock, x) < 1e-6
    wrong = lambda z: (rosenbrock(z)[0], 1.01 * rosenbrock(z)[1])  # noqa: E731
    assert check_gradient(wrong, x) > 1e-4


def test_projected_gradient_vanishes_at_a_bound_optimum():
    b = BoxBounds([0.0], [1.0])
    assert projected_gradient(np.array([1.0]), np.array([-3.0]), b)[0] == 0.0
    assert projected_gradient(np.array([0.5]), np.array([-0.2]), b)[0] == pytest.approx(0.2)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_box_quadratic_clamp_exact(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 30))
    d = rng.uniform(0.1, 10, n)
    c = rng.uniform(-3, 3, n)
    x0 = rng.uniform(-1, 1, n)
    # q(x) = sum d (x - c)^2 / 2 up to a constant, written around x0
    res = minimize_box_quadratic(sp.diags(d), d * (x0 - c), x0, BoxBounds(-np.ones(n), np.ones(n)), grad_tol=1e-12)
    assert res.converged
    assert np.max(np.abs(res.x - np.clip(c, -1, 1))) < 1e-8


def test_box_quadratic_matches_dense_kkt(rng):
    n = 12
    a = rng.normal(size=(20, n))
    h = a.T @ a
    g = rng.normal(size=n) * 5
    x0 = np.zeros(n)
    b = BoxBounds(np.full(n, -0.3), np.full(n, 0.3))
    res = minimize_box_quadratic(h, g, x0, b, grad_tol=1e-12, max_iters=1000)
    assert res.converged
    grad = g + h @ (res.x - x0)
    assert np.max(np.abs(projected_gradient(res.x, grad, b))) < 1e-10
    q = lambda z: g @ (z - x0) + 0.5 * (z - x0) @ h @ (z - x0)  # noqa: E731
    assert res.value_change == pytest.approx(q(res.x))
    for _ in range(200):
        z = b.project(res.x + 0.01 * rng.normal(size=n))
        assert q(z) >= q(res.x) - 1e-12


def test_box_quadratic_ignores_zero_curvature_variables():
    h = np.diag([2.0, 0.0])
    res = minimize_box_quadratic(h, np.array([-2.0, 0.0]), np.array([0.0, 0.4]), BoxBounds([-5.0, -1.0], [5.0, 1.0]))
    assert res.x[0] == pytest.approx(1.0) and res.x[1] == 0.4

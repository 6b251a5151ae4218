import numpy as np
import pytest

from stvem.element import PhysicalCoefficients
from stvem.problems import (
    PROBLEM_NAMES,
    finite_difference_residual,
    get_problem,
    incompatible_solution,
    kahan_sum,
    patch_expr,
)

COEFFS = [PhysicalCoefficients(), PhysicalCoefficients(c_H=2.0, nu=0.3)]


def interior_points(rng, dim, n=1000, t_min=0.05):
    return np.hstack([rng.uniform(0.05, 0.95, (n, dim)), rng.uniform(t_min, 0.95, (n, 1))])


@pytest.mark.parametrize("coeffs", COEFFS)
@pytest.mark.parametrize("name", ["patch-1", "patch-4", "smooth-1d", "smooth-2d", "singular-0.55", "singular-0.75"])
def test_manufactured_source_is_consistent(name, coeffs):
    sol = get_problem(name, coeffs)
    P = interior_points(np.random.default_rng(0), sol.dim, t_min=0.2)
    res = finite_difference_residual(sol, P, coeffs, step=1e-4)
    scale = 1 + np.abs(sol.f(P)).max()
    assert np.abs(res).max() < 1e-4 * scale


def test_incompatible_series_solves_the_heat_equation():
    coeffs = PhysicalCoefficients()
    sol = incompatible_solution(coeffs)
    P = interior_points(np.random.default_rng(1), 1, 200, t_min=0.05)
    assert np.abs(finite_difference_residual(sol, P, coeffs, step=1e-4)).max() < 1e-3
    # at t = 0.05 the tail beyond the 250th term is far below round-off
    assert np.allclose(sol.u(P), incompatible_solution(coeffs, terms=400).u(P), atol=1e-14)
    # data: u0 = 1, zero boundary values
    assert np.all(sol.u0(np.array([[0.3]])) == 1.0)
    assert sol.g(np.array([[0.0, 0.5]]))[0] == 0.0
    assert abs(sol.u(np.array([[0.0, 0.5], [1.0, 0.5]]))).max() < 1e-14


def test_gradient_and_time_derivative_match_finite_differences():
    sol = get_problem("smooth-2d")
    P = interior_points(np.random.default_rng(2), 2, 50)
    step = 1e-6
    for i in range(2):
        e = np.zeros(3)
        e[i] = step
        fd = (sol.u(P + e) - sol.u(P - e)) / (2 * step)
        assert np.allclose(sol.grad(P)[:, i], fd, atol=1e-7)
    e = np.array([0, 0, step])
    assert np.allclose(sol.dt(P), (sol.u(P + e) - sol.u(P - e)) / (2 * step), atol=1e-7)


@pytest.mark.parametrize("p", [1, 2, 3, 4, 5])
def test_patch_polynomial_degree(p):
    import sympy as sy

    x, t = sy.symbols("x t")
    poly = sy.Poly(sy.expand(patch_expr(p)(x, t)), x, t)
    assert poly.total_degree() == p
    # genuinely time dependent for p >= 2
    if p >= 2:
        assert sy.diff(patch_expr(p)(x, t), t) != 0


def test_kahan_sum_beats_naive_summation():
    terms = [np.array([1.0])] + [np.array([1e-16])] * 10000
    assert kahan_sum(terms)[0] == pytest.approx(1.0 + 1e-12, rel=1e-15)
    assert kahan_sum([]) is None


def test_registry_errors():
    with pytest.raises(KeyError):
        get_problem("unknown")
    with pytest.raises(KeyError):
        get_problem("patch")
    with pytest.raises(KeyError):
        get_problem("singular", alpha=-0.7)
    assert len(PROBLEM_NAMES) == 5


def test_singular_tag_requests_graded_rules():
    assert get_problem("singular-0.75").graded
    assert get_problem("incompatible").graded
    assert not get_problem("smooth-1d").graded

import numpy as np
import pytest
import scipy.linalg as sla
from hypothesis import given, settings
from hypothesis import strategies as st

from stvem.element import (
    Element,
    PhysicalCoefficients,
    compute_load,
    compute_pin,
    compute_pistar,
    local_operators,
    mass_matrices,
    pin_system,
)
from stvem.mesh import SpaceTimeMesh, TimePartition, spatial_mesh_from_cells
from stvem.polybasis import dim_poly_space, make_quadrature

from _support import Poly, oracle_cell, oracle_dofs, oracle_prism, random_element

seeds = st.integers(0, 2**32 - 1)
dims = st.sampled_from([1, 2])
degrees = st.integers(1, 4)


def element_on(vertices, cells, t0=0.0, t1=1.0, p=1):
    sm = spatial_mesh_from_cells(vertices, cells)
    return Element.from_mesh(SpaceTimeMesh(sm, TimePartition([t0, t1])), 0, 1, p)


def unit_prism(p=1):
    """K = (0, 1) x (0, 1), so h_Kx = h_In = |K| = 1."""
    return element_on([0.0, 1.0], [(0, 1)], p=p)


def coeffs_of(el, exponent):
    c = np.zeros(el.prism_basis.size)
    c[el.prism_basis.index(exponent)] = 1.0
    return c


def monomial_dofs(el, ops, exponent):
    return ops.D @ coeffs_of(el, exponent)


# DoFs and the D matrix ------------------------------------------------------


@pytest.mark.parametrize("dim,p", [(1, 1), (1, 3), (2, 1), (2, 4)])
def test_dof_counts(dim, p):
    el = random_element(np.random.default_rng(p), dim, p)
    nf = len(el.facets)
    expected = dim_poly_space(p - 1, dim + 1) + nf * dim_poly_space(p, dim) + dim_poly_space(p, dim)
    assert el.layout.size == expected
    assert el.layout.bottom.stop == el.layout.size


def test_constant_monomial_dofs():
    el = unit_prism(2)
    ops = local_operators(el)
    lay = el.layout
    d = monomial_dofs(el, ops, (0, 0))
    assert d[lay.bulk.start] == pytest.approx(1.0)
    assert d[lay.facet(0).start] == pytest.approx(1.0)
    assert d[lay.bottom.start] == pytest.approx(1.0)


@settings(max_examples=30)
@given(seeds, dims, degrees)
def test_unisolvence_and_reproduction(seed, dim, p):
    el = random_element(np.random.default_rng(seed), dim, p)
    ops = local_operators(el)
    nP = el.prism_basis.size
    assert np.linalg.matrix_rank(ops.D) == nP
    assert np.allclose(ops.PiN @ ops.D, np.eye(nP), atol=1e-10)
    assert np.allclose(ops.PiStar @ ops.D, np.eye(nP), atol=1e-10)


def test_dofs_match_oracle_moments():
    rng = np.random.default_rng(5)
    for dim in (1, 2):
        el = random_element(rng, dim, 3)
        ops = local_operators(el)
        c = rng.standard_normal(el.prism_basis.size)
        q = Poly(el.prism_basis.exponents, c, el.prism_basis.center, el.prism_basis.scale)
        assert np.allclose(ops.D @ c, oracle_dofs(el, q, 3), rtol=1e-11, atol=1e-11)


# projectors -------------------------------------------------------------------


def test_pin_reproduces_x():
    el = unit_prism(1)
    ops = local_operators(el)
    assert np.allclose(ops.PiN @ monomial_dofs(el, ops, (1, 0)), coeffs_of(el, (1, 0)))
    assert np.allclose(ops.PiN @ np.zeros(el.layout.size), 0.0)


def test_pistar_reproduces_t():
    el = unit_prism(2)
    ops = local_operators(el)
    assert np.allclose(ops.PiStar @ monomial_dofs(el, ops, (0, 1)), coeffs_of(el, (0, 1)))


@pytest.mark.parametrize("p", [1, 2, 3, 4])
def test_pin_condition_system_is_invertible(p):
    G, _ = pin_system(unit_prism(p))
    cond = np.linalg.cond(G)
    assert np.isfinite(cond) and cond < 1e8


def test_pin_is_independent_of_rhs_normalization():
    el = random_element(np.random.default_rng(3), 2, 3)
    assert np.allclose(compute_pin(el) @ local_operators(el).D, np.eye(el.prism_basis.size), atol=1e-10)
    assert np.allclose(compute_pistar(el) @ local_operators(el).D, np.eye(el.prism_basis.size), atol=1e-10)


def test_l2_projector_examples():
    el = unit_prism(2)
    ops = local_operators(el)
    l2 = ops.l2
    # P_{p-1} bulk projection of a degree p-1 polynomial is itself
    c = coeffs_of(el, (1, 0))
    bulk_coeffs = l2.bulk @ (ops.D @ c)
    assert np.allclose(bulk_coeffs, np.eye(el.bulk_basis.size)[el.bulk_basis.index((1, 0))])
    # facet projection of 1 is 1 on every facet
    one = monomial_dofs(el, ops, (0, 0))
    for Pf in l2.facets:
        assert np.allclose(Pf @ one, np.eye(Pf.shape[0])[0])
    # mean of x over (0, 1) at the bottom: the monomial is x - 0.5, so x = (x - 0.5) + 0.5
    x = ops.D @ (coeffs_of(el, (1, 0)) + 0.5 * coeffs_of(el, (0, 0)))
    assert (l2.bottom_mean @ x)[0] == pytest.approx(0.5)


# stabilization and a_h ----------------------------------------------------------


@settings(max_examples=20)
@given(seeds, dims, degrees)
def test_stabilization_psd_and_joint_kernel(seed, dim, p):
    el = random_element(np.random.default_rng(seed), dim, p)
    ops = local_operators(el)
    S = ops.S
    assert np.allclose(S, S.T)
    eig = np.linalg.eigvalsh(S)
    assert eig.min() >= -1e-12 * eig.max()
    stacked = np.vstack([S, ops.PiN])
    assert np.linalg.matrix_rank(stacked) == el.layout.size
    ah = np.linalg.eigvalsh(ops.Ah)
    assert ah.min() >= -1e-10 * ah.max()


def test_stabilization_of_constant_on_unit_prism():
    el = unit_prism(1)
    ops = local_operators(el)
    one = monomial_dofs(el, ops, (0, 0))
    # bulk 1 + two facets 1 each + bottom 1
    assert one @ ops.S @ one == pytest.approx(4.0)


def test_ah_examples_on_unit_prism():
    el = unit_prism(2)
    ops = local_operators(el, PhysicalCoefficients(nu=1.0))
    x = monomial_dofs(el, ops, (1, 0))
    assert x @ ops.Ah @ x == pytest.approx(1.0)
    for exp in ((0, 0), (0, 1), (0, 2)):
        assert np.allclose(ops.Ah @ monomial_dofs(el, ops, exp), 0.0, atol=1e-12)


@pytest.mark.parametrize("dim,p", [(1, 1), (1, 3), (2, 2), (2, 3)])
def test_ah_kernel_is_time_only_polynomials(dim, p):
    el = random_element(np.random.default_rng(10 * dim + p), dim, p)
    ops = local_operators(el)
    eig = np.linalg.eigvalsh(ops.Ah)
    tol = 1e-9 * eig.max()
    assert np.sum(eig < tol) == p + 1


@pytest.mark.parametrize("dim,p", [(1, 2), (2, 3)])
def test_poincare_kernel(dim, p):
    el = random_element(np.random.default_rng(7), dim, p)
    ops = local_operators(el)
    K = ops.K_grad
    w, V = np.linalg.eigh(K)
    null = V[:, w < 1e-10 * w.max()]
    time_only = np.array([not e[:dim].any() for e in el.prism_basis.exponents])
    assert null.shape[1] == time_only.sum() == p + 1
    assert np.allclose(null[~time_only], 0.0, atol=1e-10)


@given(seeds, dims, degrees)
def test_stability_on_polynomials(seed, dim, p):
    # a_h(Dq, Dq) = nu |grad q|^2 exactly, since (I - D PiN) D = 0
    rng = np.random.default_rng(seed)
    el = random_element(rng, dim, p)
    nu = 10 ** rng.uniform(-2, 2)
    ops = local_operators(el, PhysicalCoefficients(nu=nu))
    q = rng.standard_normal(el.prism_basis.size)
    lhs = (ops.D @ q) @ ops.Ah @ (ops.D @ q)
    assert lhs == pytest.approx(nu * q @ ops.K_grad @ q, rel=1e-9, abs=1e-12 * nu * np.abs(q).sum() ** 2)


def _inverse_constants(el):
    """Largest generalized eigenvalues of the two polynomial inverse inequalities."""
    rule = make_quadrature(el.cell, 2 * el.p + 2)
    P = el.prism_basis
    prule = el.prism_rule
    V = P.eval(prule.points)
    M = V.T @ (prule.weights[:, None] * V)
    _, _, _, K = mass_matrices(el)
    dT = P.deriv(prule.points, el.time_var)
    Kt = dT.T @ (prule.weights[:, None] * dT)
    lhs = M + el.hx**2 * K + el.ht**2 * Kt

    def proj_gram(W):
        # Gram of the L2(K) projection onto span(W columns), as a form on P coefficients
        G = W.T @ (prule.weights[:, None] * W)
        B = W.T @ (prule.weights[:, None] * V)
        return B.T @ np.linalg.solve(G, B)

    Vb = el.bulk_basis.eval(prule.points)
    time_only = Vb[:, [i for i, e in enumerate(el.bulk_basis.exponents) if not e[: el.dim].any()]]
    bottom = np.hstack([rule.points, np.full((len(rule.weights), 1), el.t0)])
    Vbot = P.eval(bottom)
    mean_row = rule.weights @ Vbot / el.cell_measure
    rhs_n = el.hx**2 * K + proj_gram(time_only) + el.ht * el.cell_measure * np.outer(mean_row, mean_row)
    rhs_s = proj_gram(Vb) + el.ht * Vbot.T @ (rule.weights[:, None] * Vbot)
    return sla.eigh(lhs, rhs_n, eigvals_only=True).max(), sla.eigh(lhs, rhs_s, eigvals_only=True).max()


@pytest.mark.parametrize("dim,p", [(1, 1), (1, 3), (2, 2)])
def test_inverse_inequality_constants_are_h_stable(dim, p):
    if dim == 1:
        base = np.array([0.0, 1.0])
        cells = [(0, 1)]
    else:
        base = np.array([[0.0, 0.0], [1.0, 0.1], [1.2, 0.9], [0.1, 1.0], [-0.3, 0.5]])
        cells = [tuple(range(5))]
    consts = []
    for level in range(3):
        s = 0.5**level
        el = element_on(base * s, cells, 0.3, 0.3 + 0.7 * s, p)
        consts.append(_inverse_constants(el))
    consts = np.array(consts)
    assert np.all(np.isfinite(consts))
    assert np.all(consts.max(0) <= 4 * consts.min(0))


# the upwind form b_h --------------------------------------------------------------


def test_bh_examples_on_unit_prism():
    el = unit_prism(1)
    ops = local_operators(el)
    t = ops.D @ (coeffs_of(el, (0, 1)) + 0.5 * coeffs_of(el, (0, 0)))  # q = t
    one = monomial_dofs(el, ops, (0, 0))
    assert one @ ops.Bh_in @ t == pytest.approx(1.0)
    assert one @ ops.Bh_in @ one == pytest.approx(1.0)


@settings(max_examples=15)
@given(seeds, dims, degrees)
def test_consistency_identity(seed, dim, p):
    rng = np.random.default_rng(seed)
    el = random_element(rng, dim, p)
    co = PhysicalCoefficients(10 ** rng.uniform(-1, 1), 10 ** rng.uniform(-1, 1))
    ops = local_operators(el, co)
    center, scale = el.prism_basis.center, el.prism_basis.scale
    q = Poly.random(rng, p, dim + 1, center, scale)
    v = Poly.random(rng, p, dim + 1, center, scale)
    verts, deg = el.cell.vertices, 2 * p

    def at_t0(X):
        return np.hstack([X, np.full((len(X), 1), el.t0)])

    b = co.c_H * oracle_prism(verts, el.t0, el.t1, lambda P: q.d(dim)(P) * v(P), deg)
    b += co.nu * sum(
        oracle_prism(verts, el.t0, el.t1, lambda P, i=i: q.d(i)(P) * v.d(i)(P), deg) for i in range(dim)
    )
    jump = co.c_H * oracle_cell(verts, lambda X: q(at_t0(X)) * v(at_t0(X)), deg)
    got = oracle_dofs(el, v, p) @ ops.Bh_in @ oracle_dofs(el, q, p)
    assert got == pytest.approx(b + jump, rel=1e-10, abs=1e-10 * (abs(b) + abs(jump) + 1e-300))


@given(seeds, dims, degrees)
def test_local_energy_identity(seed, dim, p):
    rng = np.random.default_rng(seed)
    el = random_element(rng, dim, p)
    co = PhysicalCoefficients(c_H=10 ** rng.uniform(-1, 1))
    ops = local_operators(el, co)
    v = rng.standard_normal(el.layout.size)
    top = ops.trace_top @ v
    bot = ops.trace_bottom_map @ ops.PiStar @ v
    rhs = 0.5 * co.c_H * (top @ ops.M_bottom @ top - bot @ ops.M_bottom @ bot)
    lhs = v @ ops.bh_time @ v
    assert lhs == pytest.approx(rhs, rel=1e-10, abs=1e-12 * (abs(rhs) + np.abs(v).max() ** 2))


def test_bh_prev_pairs_previous_top_trace():
    el = unit_prism(2)
    ops = local_operators(el)
    C = ops.bh_prev(ops)
    v = np.random.default_rng(0).standard_normal(el.layout.size)
    w = np.random.default_rng(1).standard_normal(el.layout.size)
    expected = -(ops.trace_top @ v) @ (el.cell_measure * w[el.layout.bottom])
    assert w @ C @ v == pytest.approx(expected)


# load ------------------------------------------------------------------------------


def test_load_examples():
    el = unit_prism(2)
    ops = local_operators(el)
    assert np.allclose(compute_load(el, lambda P: np.zeros(len(P)), ops), 0.0)
    one = monomial_dofs(el, ops, (0, 0))
    assert one @ compute_load(el, lambda P: np.ones(len(P)), ops) == pytest.approx(1.0)


def test_load_uses_bulk_projection():
    rng = np.random.default_rng(4)
    el = random_element(rng, 2, 2)
    ops = local_operators(el)
    # for f of degree <= p - 1 the load equals (f, v) for polynomial v
    f = Poly.random(rng, 1, 3, el.prism_basis.center, el.prism_basis.scale)
    v = Poly.random(rng, 2, 3, el.prism_basis.center, el.prism_basis.scale)
    exact = oracle_prism(el.cell.vertices, el.t0, el.t1, lambda P: f(P) * v(P), 3)
    got = oracle_dofs(el, v, 2) @ compute_load(el, f, ops)
    assert got == pytest.approx(exact, rel=1e-10)


def test_nonfinite_source_is_rejected():
    el = unit_prism(1)
    ops = local_operators(el)
    with pytest.raises(FloatingPointError):
        compute_load(el, lambda P: np.full(len(P), np.nan), ops)


def test_bad_inputs():
    with pytest.raises(ValueError):
        PhysicalCoefficients(c_H=0.0)
    with pytest.raises(ValueError):
        unit_prism(0)

"""Element-local virtual element operators on a prism ``K = K_x x (t0, t1)``.

Local degrees of freedom, in this order:

* bulk moments ``(1/|K|) int_K v m_a`` against the scaled monomials of
  degree ``p - 1`` on the prism,
* for each spatial facet of the cell (in mesh order), time-like moments
  ``(1/|F|) int_F v m_b`` against degree-``p`` monomials on ``F = F_x x I``,
* bottom moments ``(1/|K_x|) int_{K_x} v(., t0) m_g`` against degree-``p``
  monomials on the cell.

Every operator below is assembled from these moments only. Polynomials are
represented by coefficients in the prism basis ``P_p(K)`` (or its prefix
``P_{p-1}(K)`` for bulk quantities).

The scalings ``c_H_tilde = h_t`` and ``nu_tilde = h_x**2`` that define the
local virtual space are kept on :class:`ElementScalings` for reference but no
matrix depends on them: all computable operators only see moments. Do not
thread them into the projector systems.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .mesh import SpaceTimeMesh
from .polybasis import (
    Interval,
    Polytope,
    Prism,
    QuadratureRule,
    ScaledMonomialBasis,
    TimeLikeFacet,
    dim_poly_space,
    make_quadrature,
    restriction_coeffs,
)


@dataclass(frozen=True)
class PhysicalCoefficients:
    c_H: float = 1.0
    nu: float = 1.0

    def __post_init__(self):
        if not (self.c_H > 0 and self.nu > 0):
            raise ValueError("heat capacity and conductivity must be positive")


@dataclass(frozen=True)
class ElementScalings:
    c_H_tilde: float
    nu_tilde: float


@dataclass(frozen=True)
class DofLayout:
    p: int
    dim: int
    n_facets: int

    @property
    def n_bulk(self) -> int:
        return dim_poly_space(self.p - 1, self.dim + 1)

    @property
    def n_facet(self) -> int:
        return dim_poly_space(self.p, self.dim)

    @property
    def n_bottom(self) -> int:
        return dim_poly_space(self.p, self.dim)

    @property
    def size(self) -> int:
        return self.n_bulk + self.n_facets * self.n_facet + self.n_bottom

    @property
    def bulk(self) -> slice:
        return slice(0, self.n_bulk)

    def facet(self, k: int) -> slice:
        start = self.n_bulk + k * self.n_facet
        return slice(start, start + self.n_facet)

    @property
    def bottom(self) -> slice:
        start = self.n_bulk + self.n_facets * self.n_facet
        return slice(start, start + self.n_bottom)

    def selector(self, block: slice) -> np.ndarray:
        """Rows of the identity extracting ``block`` from a local DoF vector."""
        return np.eye(self.size)[block]


@dataclass(frozen=True)
class FacetGeometry:
    vertices: np.ndarray  # spatial vertices (1 in 1D, 2 in 2D)
    outward_normal: np.ndarray
    midpoint: np.ndarray
    tangent: np.ndarray | None  # global orientation of the facet (2D only)
    length: float  # spatial measure (1 in 1D)


class Element:
    """Geometry, bases and quadrature of one prism.

    Facet bases use the facet's global orientation so that both neighbors of
    an interior facet define identical moment functionals.
    """

    def __init__(self, cell: Polytope, centroid, hx, cell_measure, facets, t0, t1, p, quad_degree=None, time_rule=None):
        if p < 1:
            raise ValueError("polynomial degree must be >= 1")
        self.cell = cell
        self.xc = np.atleast_1d(np.asarray(centroid, dtype=float))
        self.dim = self.xc.size
        self.hx = float(hx)
        self.t0, self.t1 = float(t0), float(t1)
        self.ht = self.t1 - self.t0
        self.tc = 0.5 * (self.t0 + self.t1)
        self.cell_measure = float(cell_measure)
        self.measure = self.cell_measure * self.ht
        self.facets = tuple(facets)
        self.facet_measures = np.array([f.length * self.ht for f in self.facets])
        self.p = p
        self.layout = DofLayout(p, self.dim, len(self.facets))
        self.quad_degree = 2 * p + 2 if quad_degree is None else quad_degree
        self.scalings = ElementScalings(self.ht, self.hx**2)

        d = self.dim
        self.prism_basis = ScaledMonomialBasis(
            "prism", np.append(self.xc, self.tc), np.append(np.full(d, self.hx), self.ht), p
        )
        self.bulk_basis = ScaledMonomialBasis("prism", self.prism_basis.center, self.prism_basis.scale, p - 1)
        self.bottom_basis = ScaledMonomialBasis("cell", self.xc, np.full(d, self.hx), p)
        self.time_basis = ScaledMonomialBasis("interval", [self.tc], [self.ht], p - 1)
        self.facet_bases = []
        for f in self.facets:
            if d == 1:
                self.facet_bases.append(ScaledMonomialBasis("facet", [self.tc], [self.ht], p))
            else:
                self.facet_bases.append(ScaledMonomialBasis("facet", [0.0, self.tc], [f.length, self.ht], p))

        q = self.quad_degree
        self.prism_rule = make_quadrature(Prism(cell, self.t0, self.t1), q, time_rule=time_rule)
        self.bottom_rule = make_quadrature(cell, q)
        self.time_rule = make_quadrature(Interval(self.t0, self.t1), q)
        self.facet_rules = [make_quadrature(TimeLikeFacet(f.vertices, self.t0, self.t1), q) for f in self.facets]

    @classmethod
    def from_mesh(cls, mesh: SpaceTimeMesh, c: int, n: int, p: int, quad_degree=None, time_rule=None):
        sm = mesh.spatial
        t0, t1 = mesh.time.slab(n)
        facets = []
        for local, (f, _) in enumerate(sm.cell_facets[c]):
            pts = sm.facet_points(f)
            if sm.dim == 1:
                facets.append(FacetGeometry(pts.reshape(1, 1), sm.outward_normal(c, local), pts[0], None, 1.0))
            else:
                tau = pts[1] - pts[0]
                length = float(np.linalg.norm(tau))
                facets.append(FacetGeometry(pts, sm.outward_normal(c, local), pts.mean(0), tau / length, length))
        return cls(
            sm.cell_polytope(c), sm.cell_centroids[c], sm.cell_diameters[c], sm.cell_measures[c],
            facets, t0, t1, p, quad_degree=quad_degree, time_rule=time_rule,
        )

    def facet_coords(self, k: int, points) -> np.ndarray:
        """Map space-time points on facet ``k`` to that facet's basis variables."""
        points = np.asarray(points, dtype=float)
        if self.dim == 1:
            return points[:, -1:]
        f = self.facets[k]
        s = (points[:, :2] - f.midpoint) @ f.tangent
        return np.stack([s, points[:, 2]], axis=1)

    def bottom_points(self, rule: QuadratureRule | None = None) -> np.ndarray:
        rule = rule or self.bottom_rule
        return np.hstack([rule.points, np.full((len(rule.weights), 1), self.t0)])

    @property
    def spatial_vars(self):
        return list(range(self.dim))

    @property
    def time_var(self) -> int:
        return self.dim


def _gram(rule: QuadratureRule, left, right=None) -> np.ndarray:
    right = left if right is None else right
    return left.T @ (rule.weights[:, None] * right)


def mass_matrices(el: Element):
    """Gram matrices of the bulk, bottom and facet bases and the prism gradient Gram."""
    Vb = el.bulk_basis.eval(el.prism_rule.points)
    M_bulk = _gram(el.prism_rule, Vb)
    M_bottom = _gram(el.bottom_rule, el.bottom_basis.eval(el.bottom_rule.points))
    M_facets = []
    for k, rule in enumerate(el.facet_rules):
        Vf = el.facet_bases[k].eval(el.facet_coords(k, rule.points))
        M_facets.append(_gram(rule, Vf))
    dV = el.prism_basis.grad(el.prism_rule.points, el.spatial_vars)
    K_grad = sum(_gram(el.prism_rule, g) for g in dV)
    return M_bulk, M_bottom, M_facets, K_grad


def compute_dof_matrix(el: Element) -> np.ndarray:
    """DoF functionals applied to each prism monomial, shape ``(#DoFs, dim P_p(K))``."""
    lay = el.layout
    D = np.zeros((lay.size, el.prism_basis.size))
    rule = el.prism_rule
    VP = el.prism_basis.eval(rule.points)
    D[lay.bulk] = _gram(rule, el.bulk_basis.eval(rule.points), VP) / el.measure
    for k, frule in enumerate(el.facet_rules):
        Vf = el.facet_bases[k].eval(el.facet_coords(k, frule.points))
        D[lay.facet(k)] = _gram(frule, Vf, el.prism_basis.eval(frule.points)) / el.facet_measures[k]
    bpts = el.bottom_points()
    D[lay.bottom] = _gram(el.bottom_rule, el.bottom_basis.eval(el.bottom_rule.points), el.prism_basis.eval(bpts)) / el.cell_measure
    return D


def _time_only_bulk_indices(el: Element):
    return [i for i, e in enumerate(el.bulk_basis.exponents) if not e[: el.dim].any()]


def pin_system(el: Element, masses=None):
    """Square condition system ``G c = B dofs`` defining the gradient-matching projector.

    Rows: gradient orthogonality against monomials with nonzero spatial degree
    (right-hand side through integration by parts), orthogonality against
    time-only monomials of degree ``p - 1``, and the mean of the bottom trace.
    Rows are normalized by the measure of their domain.
    """
    lay = el.layout
    P = el.prism_basis
    M_bulk, _, M_facets, K_grad = masses or mass_matrices(el)
    spatial_rows = [j for j, e in enumerate(P.exponents) if e[: el.dim].any()]
    time_rows = _time_only_bulk_indices(el)
    nP = P.size
    G = np.zeros((nP, nP))
    B = np.zeros((nP, lay.size))

    lap = sum(P.derivative_coeffs(v, order=2, target_degree=el.p - 1) for v in el.spatial_vars)
    facet_flux = []
    for k, rule in enumerate(el.facet_rules):
        n = el.facets[k].outward_normal
        grads = P.grad(rule.points, el.spatial_vars)
        normal_deriv = np.tensordot(n, grads, axes=(0, 0))
        Vf = el.facet_bases[k].eval(el.facet_coords(k, rule.points))
        facet_flux.append(np.linalg.solve(M_facets[k], _gram(rule, Vf, normal_deriv)))

    r = 0
    for j in spatial_rows:
        G[r] = K_grad[j] / el.measure
        B[r, lay.bulk] = -lap[:, j]
        for k in range(lay.n_facets):
            B[r, lay.facet(k)] = facet_flux[k][:, j] * el.facet_measures[k] / el.measure
        r += 1
    VP = P.eval(el.prism_rule.points)
    Vb = el.bulk_basis.eval(el.prism_rule.points)
    for a in time_rows:
        G[r] = _gram(el.prism_rule, Vb[:, [a]], VP)[0] / el.measure
        B[r, lay.bulk.start + a] = 1.0
        r += 1
    G[r] = el.bottom_rule.weights @ P.eval(el.bottom_points()) / el.cell_measure
    B[r, lay.bottom.start] = 1.0
    return G, B


def compute_pin(el: Element, masses=None) -> np.ndarray:
    G, B = pin_system(el, masses)
    return sla.lu_solve(sla.lu_factor(G), B)


def pistar_system(el: Element):
    """Rows: bulk moments of degree ``p - 1`` and the full bottom trace in ``P_p(K_x)``."""
    lay = el.layout
    P = el.prism_basis
    VP = P.eval(el.prism_rule.points)
    Vb = el.bulk_basis.eval(el.prism_rule.points)
    top = _gram(el.prism_rule, Vb, VP) / el.measure
    Vbot = el.bottom_basis.eval(el.bottom_rule.points)
    bottom = _gram(el.bottom_rule, Vbot, P.eval(el.bottom_points())) / el.cell_measure
    G = np.vstack([top, bottom])
    B = np.vstack([lay.selector(lay.bulk), lay.selector(lay.bottom)])
    return G, B


def compute_pistar(el: Element) -> np.ndarray:
    G, B = pistar_system(el)
    return sla.lu_solve(sla.lu_factor(G), B)


@dataclass(frozen=True)
class L2Projectors:
    bulk: np.ndarray  # P_{p-1}(K) coefficients of Pi^{0,K}_{p-1}
    facets: tuple  # P_p(F) coefficients per facet
    time: np.ndarray  # P_{p-1}(I_n) coefficients of the projected spatial mean
    bottom_mean: np.ndarray  # Pi^{0,K_x}_0 of the bottom trace, shape (1, #DoFs)
    bottom_trace: np.ndarray  # P_p(K_x) coefficients of v(., t0)


def compute_l2_projectors(el: Element, masses=None) -> L2Projectors:
    lay = el.layout
    M_bulk, M_bottom, M_facets, _ = masses or mass_matrices(el)
    bulk = np.linalg.solve(M_bulk, el.measure * lay.selector(lay.bulk))
    facets = tuple(
        np.linalg.solve(M_facets[k], el.facet_measures[k] * lay.selector(lay.facet(k))) for k in range(lay.n_facets)
    )
    Vt = el.time_basis.eval(el.time_rule.points)
    M_time = _gram(el.time_rule, Vt)
    sel = lay.selector(lay.bulk)[_time_only_bulk_indices(el)]
    time = np.linalg.solve(M_time, el.ht * sel)
    bottom_mean = lay.selector(lay.bottom)[:1]
    bottom_trace = np.linalg.solve(M_bottom, el.cell_measure * lay.selector(lay.bottom))
    return L2Projectors(bulk, facets, time, bottom_mean, bottom_trace)


def compute_stabilization(el: Element, proj: L2Projectors, masses=None) -> np.ndarray:
    M_bulk, M_bottom, M_facets, _ = masses or mass_matrices(el)
    hx = el.hx
    S = hx**-2 * proj.bulk.T @ M_bulk @ proj.bulk
    for k, Pf in enumerate(proj.facets):
        S += hx**-1 * Pf.T @ M_facets[k] @ Pf
    S += hx**-2 * el.ht * proj.bottom_trace.T @ M_bottom @ proj.bottom_trace
    return 0.5 * (S + S.T)


def compute_local_ah(el: Element, coeffs: PhysicalCoefficients, D, PiN, S, K_grad) -> np.ndarray:
    A_poly = coeffs.nu * K_grad
    R = np.eye(el.layout.size) - D @ PiN
    Ah = PiN.T @ A_poly @ PiN + coeffs.nu * R.T @ S @ R
    return 0.5 * (Ah + Ah.T)


@dataclass
class LocalOperatorSet:
    element: Element
    D: np.ndarray
    PiN: np.ndarray
    PiStar: np.ndarray
    l2: L2Projectors
    S: np.ndarray
    Ah: np.ndarray
    M_bulk: np.ndarray
    M_bottom: np.ndarray
    M_facets: list
    K_grad: np.ndarray
    dt: np.ndarray  # time derivative: P_p(K) coeffs -> P_{p-1}(K) coeffs
    trace_bottom_map: np.ndarray  # P_p(K) coeffs -> P_p(K_x) coeffs at t0
    trace_top_map: np.ndarray  # same at t1
    trace_top: np.ndarray  # DoFs -> P_p(K_x) coeffs of (Pi* v)(., t1)
    bh_time: np.ndarray  # c_H (d_t Pi* u, v)_K
    bh_bottom: np.ndarray  # c_H (Pi* u(., t0), v(., t0))_{K_x}
    Bh_in: np.ndarray
    load_op: np.ndarray  # maps P_{p-1}(K) moments of f to the local load
    coeffs: PhysicalCoefficients = field(default_factory=PhysicalCoefficients)

    @property
    def layout(self) -> DofLayout:
        return self.element.layout

    def bottom_pairing(self) -> np.ndarray:
        """``(w, v(., t0))_{K_x}`` for ``w`` given by ``P_p(K_x)`` coefficients: shape (#DoFs, n_bottom)."""
        lay = self.layout
        return self.element.cell_measure * lay.selector(lay.bottom).T

    def bh_prev(self, prev: "LocalOperatorSet") -> np.ndarray:
        """Coupling of the previous-slab element DoFs into this element's test functions."""
        return -self.coeffs.c_H * self.bottom_pairing() @ prev.trace_top

    def bulk_pairing(self) -> np.ndarray:
        """``(w, v)_K`` for ``w`` in ``P_{p-1}(K)`` given by coefficients: shape (#DoFs, n_bulk)."""
        lay = self.layout
        return self.element.measure * lay.selector(lay.bulk).T


def compute_local_bh(el: Element, coeffs: PhysicalCoefficients, PiStar, Ah):
    """In-slab block of the upwind form and the trace maps it needs."""
    lay = el.layout
    P = el.prism_basis
    dt = P.derivative_coeffs(el.time_var, order=1, target_degree=el.p - 1)
    t_bot = restriction_coeffs(P, el.time_var, el.t0, el.bottom_basis)
    t_top = restriction_coeffs(P, el.time_var, el.t1, el.bottom_basis)
    bulk_sel = lay.selector(lay.bulk)
    bottom_sel = lay.selector(lay.bottom)
    bh_time = coeffs.c_H * el.measure * bulk_sel.T @ dt @ PiStar
    bh_bottom = coeffs.c_H * el.cell_measure * bottom_sel.T @ t_bot @ PiStar
    return dt, t_bot, t_top, bh_time, bh_bottom, bh_time + Ah + bh_bottom


def local_operators(el: Element, coeffs: PhysicalCoefficients | None = None) -> LocalOperatorSet:
    coeffs = coeffs or PhysicalCoefficients()
    masses = mass_matrices(el)
    M_bulk, M_bottom, M_facets, K_grad = masses
    D = compute_dof_matrix(el)
    PiN = compute_pin(el, masses)
    PiStar = compute_pistar(el)
    l2 = compute_l2_projectors(el, masses)
    S = compute_stabilization(el, l2, masses)
    Ah = compute_local_ah(el, coeffs, D, PiN, S, K_grad)
    dt, t_bot, t_top, bh_time, bh_bottom, Bh_in = compute_local_bh(el, coeffs, PiStar, Ah)
    lay = el.layout
    load_op = el.measure * lay.selector(lay.bulk).T @ np.linalg.inv(M_bulk)
    return LocalOperatorSet(
        element=el, D=D, PiN=PiN, PiStar=PiStar, l2=l2, S=S, Ah=Ah,
        M_bulk=M_bulk, M_bottom=M_bottom, M_facets=list(M_facets), K_grad=K_grad,
        dt=dt, trace_bottom_map=t_bot, trace_top_map=t_top, trace_top=t_top @ PiStar,
        bh_time=bh_time, bh_bottom=bh_bottom, Bh_in=Bh_in, load_op=load_op, coeffs=coeffs,
    )


def bulk_moments(el: Element, f, rule: QuadratureRule | None = None) -> np.ndarray:
    """``int_K f m_a`` for the ``P_{p-1}(K)`` basis, by quadrature."""
    rule = rule or el.prism_rule
    vals = np.asarray(f(rule.points), dtype=float)
    if not np.all(np.isfinite(vals)):
        raise FloatingPointError("source term is not finite at quadrature points")
    return el.bulk_basis.eval(rule.points).T @ (rule.weights * vals)


def compute_load(el: Element, f, ops: LocalOperatorSet, rule: QuadratureRule | None = None) -> np.ndarray:
    """Local load ``(f, Pi^{0,K}_{p-1} phi_i)_K``; only bulk DoFs receive a contribution."""
    return ops.load_op @ bulk_moments(el, f, rule)


def interpolate_polynomial(ops: LocalOperatorSet, coeffs) -> np.ndarray:
    """DoF vector of a polynomial given by prism coefficients."""
    return ops.D @ np.asarray(coeffs)

"""Scaled monomial bases and exact quadrature rules.

Every basis is a set of monomials ``prod_v ((y_v - c_v) / s_v) ** a_v`` with
total degree at most ``degree``. Multi-indices are enumerated by increasing
total degree and, within one degree, in descending lexicographic order, so a
basis of degree ``p - 1`` is always a prefix of the basis of degree ``p`` over
the same variables.

Quadrature rules are Gauss-Legendre in every direction. Polygons are split
into triangles from their centroid and each triangle uses a collapsed
(Duffy) Gauss rule, which keeps exactness for polynomial integrands.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from math import comb

import numpy as np

from . import _core


def dim_poly_space(degree: int, num_vars: int) -> int:
    """Dimension of the space of polynomials of total degree <= ``degree``."""
    if num_vars < 1:
        raise ValueError("num_vars must be >= 1")
    if degree < 0:
        return 0
    return comb(degree + num_vars, num_vars)


def _compositions(total, nvars):
    if nvars == 1:
        yield (total,)
        return
    for first in range(total, -1, -1):
        for rest in _compositions(total - first, nvars - 1):
            yield (first,) + rest


@lru_cache(maxsize=None)
def _multi_indices(degree, num_vars):
    rows = [c for k in range(degree + 1) for c in _compositions(k, num_vars)]
    arr = np.array(rows, dtype=np.int_).reshape(-1, num_vars)
    arr.setflags(write=False)
    return arr


def multi_indices(degree: int, num_vars: int) -> np.ndarray:
    """All exponent tuples of total degree <= ``degree`` in graded order."""
    if degree < 0:
        return np.zeros((0, num_vars), dtype=np.int_)
    return _multi_indices(degree, num_vars)


@dataclass(frozen=True)
class ScaledMonomialBasis:
    """Centered and scaled monomials of total degree <= ``degree``.

    ``kind`` is informational (``"prism"``, ``"cell"``, ``"facet"``,
    ``"interval"``); evaluation only uses ``center`` and ``scale``.
    """

    kind: str
    center: np.ndarray
    scale: np.ndarray
    degree: int
    exponents: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        center = np.atleast_1d(np.asarray(self.center, dtype=float)).copy()
        scale = np.atleast_1d(np.asarray(self.scale, dtype=float)).copy()
        if center.shape != scale.shape:
            raise ValueError("center and scale must have the same length")
        if np.any(scale <= 0):
            raise ValueError("scales must be positive")
        center.setflags(write=False)
        scale.setflags(write=False)
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "scale", scale)
        object.__setattr__(self, "exponents", multi_indices(self.degree, center.size))

    @property
    def num_vars(self) -> int:
        return self.center.size

    @property
    def size(self) -> int:
        return self.exponents.shape[0]

    def index(self, exponent) -> int:
        return _index_map(self.degree, self.num_vars)[tuple(int(e) for e in exponent)]

    def _scaled(self, points):
        points = np.asarray(points, dtype=float)
        if points.ndim == 1:
            points = points[:, None] if self.num_vars == 1 else points[None, :]
        if points.shape[-1] != self.num_vars:
            raise ValueError(
                f"points have {points.shape[-1]} coordinates, basis expects {self.num_vars}"
            )
        return (points - self.center) / self.scale

    def eval(self, points) -> np.ndarray:
        """Matrix of basis values, shape ``(num_points, size)``."""
        return _core.vandermonde(self._scaled(points), self.exponents)

    def deriv(self, points, var: int) -> np.ndarray:
        return _core.vandermonde_deriv(self._scaled(points), self.exponents, var) / self.scale[var]

    def grad(self, points, variables=None) -> np.ndarray:
        """Derivatives along ``variables``, shape ``(len(variables), num_points, size)``."""
        if variables is None:
            variables = range(self.num_vars)
        return np.stack([self.deriv(points, v) for v in variables])

    def laplacian(self, points, variables) -> np.ndarray:
        lap = sum(self.derivative_coeffs(v, order=2, target_degree=self.degree) for v in variables)
        return self.eval(points) @ lap

    def derivative_coeffs(self, var: int, order: int = 1, target_degree: int | None = None):
        """Matrix mapping coefficients to coefficients of the ``order``-th derivative.

        The result is expressed in the basis of degree ``target_degree``
        (default: ``degree - order``) with the same center and scale.
        """
        if target_degree is None:
            target_degree = max(self.degree - order, 0)
        target = _index_map(target_degree, self.num_vars)
        out = np.zeros((dim_poly_space(target_degree, self.num_vars), self.size))
        for j, exp in enumerate(self.exponents):
            a = int(exp[var])
            if a < order:
                continue
            factor = 1.0
            for k in range(order):
                factor *= a - k
            lowered = list(int(e) for e in exp)
            lowered[var] -= order
            out[target[tuple(lowered)], j] = factor / self.scale[var] ** order
        return out


@lru_cache(maxsize=None)
def _index_map(degree, num_vars):
    return {tuple(int(e) for e in row): i for i, row in enumerate(multi_indices(degree, num_vars))}


def restriction_coeffs(basis: ScaledMonomialBasis, var: int, value: float, target: ScaledMonomialBasis):
    """Coefficients (in ``target``) of each basis function with variable ``var`` frozen at ``value``.

    ``target`` must use the remaining variables with the same centers and scales.
    """
    keep = [v for v in range(basis.num_vars) if v != var]
    if not (
        np.allclose(target.center, basis.center[keep]) and np.allclose(target.scale, basis.scale[keep])
    ):
        raise ValueError("target basis must share center and scale with the remaining variables")
    s = (value - basis.center[var]) / basis.scale[var]
    out = np.zeros((target.size, basis.size))
    tmap = _index_map(target.degree, target.num_vars)
    for j, exp in enumerate(basis.exponents):
        key = tuple(int(exp[v]) for v in keep)
        if key in tmap:
            out[tmap[key], j] += s ** int(exp[var])
    return out


@dataclass(frozen=True)
class QuadratureRule:
    points: np.ndarray
    weights: np.ndarray
    degree: int

    def __post_init__(self):
        pts = np.array(self.points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        w = np.array(self.weights, dtype=float)
        pts.setflags(write=False)
        w.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", w)

    @property
    def measure(self) -> float:
        return float(self.weights.sum())

    def integrate(self, values) -> np.ndarray:
        return np.tensordot(self.weights, np.asarray(values), axes=(0, 0))


# Domain descriptors accepted by make_quadrature.


@dataclass(frozen=True)
class Interval:
    a: float
    b: float


@dataclass(frozen=True)
class Polytope:
    """Convex (or centroid star-shaped) spatial cell: a segment in 1D, a polygon in 2D."""

    vertices: np.ndarray


@dataclass(frozen=True)
class Prism:
    cell: Polytope
    t0: float
    t1: float


@dataclass(frozen=True)
class TimeLikeFacet:
    """Spatial facet (a point in 1D, a segment in 2D) extruded over ``[t0, t1]``."""

    vertices: np.ndarray
    t0: float
    t1: float


def gauss_points(degree: int) -> int:
    return max(1, (degree + 2) // 2)


@lru_cache(maxsize=None)
def _gauss_ref(n):
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (x + 1.0), 0.5 * w


def gauss_interval(a: float, b: float, degree: int) -> QuadratureRule:
    if not b > a:
        raise ValueError(f"degenerate interval ({a}, {b})")
    x, w = _gauss_ref(gauss_points(degree))
    return QuadratureRule(a + (b - a) * x, (b - a) * w, degree)


def graded_interval(a: float, b: float, degree: int, levels: int = 8, ratio: float = 0.25) -> QuadratureRule:
    """Composite Gauss rule geometrically graded towards ``a``.

    Breakpoints are ``a + (b - a) * ratio**k`` for ``k = levels - 1, ..., 0``,
    giving ``levels`` subintervals.
    """
    if not b > a:
        raise ValueError(f"degenerate interval ({a}, {b})")
    cuts = [a] + [a + (b - a) * ratio**k for k in range(levels - 1, -1, -1)]
    pts, wts = [], []
    for lo, hi in zip(cuts[:-1], cuts[1:]):
        r = gauss_interval(lo, hi, degree)
        pts.append(r.points[:, 0])
        wts.append(r.weights)
    return QuadratureRule(np.concatenate(pts), np.concatenate(wts), degree)


def _triangle_rule(v0, v1, v2, degree):
    n = gauss_points(degree + 1)
    x, w = _gauss_ref(n)
    u, s = np.meshgrid(x, x, indexing="ij")
    wu, ws = np.meshgrid(w, w, indexing="ij")
    u, s, wu, ws = u.ravel(), s.ravel(), wu.ravel(), ws.ravel()
    e1, e2 = v1 - v0, v2 - v1
    pts = v0 + u[:, None] * e1 + (u * s)[:, None] * e2
    area2 = abs(e1[0] * e2[1] - e1[1] * e2[0])
    return pts, area2 * u * wu * ws


def polygon_centroid(vertices) -> tuple[np.ndarray, float]:
    v = np.asarray(vertices, dtype=float)
    x, y = v[:, 0], v[:, 1]
    xn, yn = np.roll(x, -1), np.roll(y, -1)
    cross = x * yn - xn * y
    area = 0.5 * cross.sum()
    if abs(area) < 1e-300:
        raise ValueError("degenerate polygon")
    cx = ((x + xn) * cross).sum() / (6 * area)
    cy = ((y + yn) * cross).sum() / (6 * area)
    return np.array([cx, cy]), area


def polygon_rule(vertices, degree: int) -> QuadratureRule:
    v = np.asarray(vertices, dtype=float)
    c, area = polygon_centroid(v)
    if area <= 0:
        raise ValueError("polygon must be counterclockwise with positive area")
    pts, wts = [], []
    for i in range(len(v)):
        p, w = _triangle_rule(c, v[i], v[(i + 1) % len(v)], degree)
        pts.append(p)
        wts.append(w)
    return QuadratureRule(np.vstack(pts), np.concatenate(wts), degree)


def segment_rule(a, b, degree: int) -> QuadratureRule:
    """Gauss rule on a straight segment embedded in the plane."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    length = float(np.linalg.norm(b - a))
    if length <= 0:
        raise ValueError("degenerate segment")
    x, w = _gauss_ref(gauss_points(degree))
    return QuadratureRule(a + x[:, None] * (b - a), length * w, degree)


def tensor_rule(space: QuadratureRule, time: QuadratureRule) -> QuadratureRule:
    ns, nt = len(space.weights), len(time.weights)
    pts = np.hstack([np.repeat(space.points, nt, axis=0), np.tile(time.points, (ns, 1))])
    wts = np.repeat(space.weights, nt) * np.tile(time.weights, ns)
    return QuadratureRule(pts, wts, min(space.degree, time.degree))


def cell_rule(cell: Polytope, degree: int) -> QuadratureRule:
    v = np.asarray(cell.vertices, dtype=float)
    if v.ndim == 1 or v.shape[1] == 1:
        v = v.reshape(-1)
        return gauss_interval(float(v.min()), float(v.max()), degree)
    return polygon_rule(v, degree)


def make_quadrature(domain, target_degree: int, time_rule: QuadratureRule | None = None) -> QuadratureRule:
    """Quadrature rule exact for polynomials of total degree <= ``target_degree``.

    ``time_rule`` replaces the Gauss rule in time for prisms and time-like
    facets (used for graded rules near singularities).
    """
    if isinstance(domain, Interval):
        return gauss_interval(domain.a, domain.b, target_degree)
    if isinstance(domain, Polytope):
        return cell_rule(domain, target_degree)
    if isinstance(domain, Prism):
        t = time_rule or gauss_interval(domain.t0, domain.t1, target_degree)
        return tensor_rule(cell_rule(domain.cell, target_degree), t)
    if isinstance(domain, TimeLikeFacet):
        t = time_rule or gauss_interval(domain.t0, domain.t1, target_degree)
        v = np.asarray(domain.vertices, dtype=float)
        if v.size == 1 or (v.ndim == 2 and v.shape[0] == 1 and v.shape[1] == 1):
            space = QuadratureRule(v.reshape(1, 1), np.ones(1), 10**9)
        else:
            space = segment_rule(v[0], v[1], target_degree)
        return tensor_rule(space, t)
    raise TypeError(f"unsupported domain {type(domain).__name__}")

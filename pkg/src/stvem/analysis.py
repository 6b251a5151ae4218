"""Computable error quantities, the discrete Newton potential and EOC tables.

Four errors are reported per run:

* ``EY``: ``||u - Pi^N u_h||_Y``, the (nu-weighted) spatial-gradient L2 norm;
* ``EN``: the Y norm of ``Pi^N`` applied to the discrete Newton potential of
  ``Pi*(u - u_h)``;
* ``EU``: the upwind trace seminorm of ``Pi*(u - u_h)`` (initial, interface
  jumps, final);
* ``EL``: ``||u - Pi* u_h||`` in L2 over the space-time cylinder.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .polybasis import Prism, make_quadrature
from .system import Discretization, ProblemData, Solution, SolverError


@dataclass
class ExactSolution:
    """Exact solution and matching data, all vectorized over point arrays.

    ``u``, ``f`` and ``g`` take space-time points ``(npts, d + 1)`` with time
    last; ``grad`` returns the spatial gradient ``(npts, d)``; ``u0`` takes
    spatial points. ``tag`` is ``"smooth"``, ``"singular"`` or ``"series"``;
    anything other than smooth gets graded time quadrature on the first slab.
    """

    name: str
    dim: int
    u: callable
    grad: callable
    f: callable
    u0: callable
    g: callable
    dt: callable | None = None
    tag: str = "smooth"
    T: float = 1.0

    @property
    def graded(self) -> bool:
        return self.tag != "smooth"

    def data(self) -> ProblemData:
        return ProblemData(f=self.f, g=self.g, u0=self.u0, graded=self.graded)


@dataclass
class ErrorReport:
    level: int
    h: float
    hx: float
    ht: float
    ndofs: int
    EY: float
    EN: float
    EU: float
    EL: float
    eoc: dict = field(default_factory=dict)  # filled by eoc_table

    @property
    def errors(self) -> dict:
        return {"EY": self.EY, "EN": self.EN, "EU": self.EU, "EL": self.EL}

    def __str__(self):
        errs = " ".join(f"{k}={v:.3e}" for k, v in self.errors.items())
        rates = " ".join(f"eoc{k[1]}={v:.3f}" for k, v in self.eoc.items() if v is not None)
        return f"level {self.level}: h={self.h:.4g} ndofs={self.ndofs} {errs} {rates}".rstrip()


ERROR_NAMES = ("EY", "EN", "EU", "EL")


def _values(fn, pts, what):
    vals = np.asarray(fn(pts), dtype=float)
    if not np.all(np.isfinite(vals)):
        raise FloatingPointError(f"{what} is not finite at quadrature points")
    return vals


def _bottom_rule(ref, degree):
    rule = make_quadrature(ref.cell, degree)
    pts = np.hstack([rule.points, np.full((len(rule.weights), 1), ref.t0)])
    return pts, rule.weights


def pistar_of_exact(ops, u, degree=None, rule=None, shift=None) -> np.ndarray:
    """Pi* coefficients of ``u`` on the element of ``ops`` (optionally translated by ``shift``).

    The bulk moments use ``rule`` (default: a Gauss rule of ``degree``); the
    bottom moments use a spatial rule of ``degree`` at the slab's initial time.
    """
    el = ops.element
    degree = degree or 2 * el.p + 4
    shift = np.zeros(el.dim + 1) if shift is None else np.asarray(shift, dtype=float)
    single = shift.ndim == 1
    shift = np.atleast_2d(shift)
    rule = rule or make_quadrature(Prism(el.cell, el.t0, el.t1), degree)
    Vb = el.bulk_basis.eval(rule.points)
    bpts, bw = _bottom_rule(el, degree)
    Vbot = el.bottom_basis.eval(bpts[:, :-1])
    pts = (rule.points[None] + shift[:, None]).reshape(-1, el.dim + 1)
    ub = _values(u, pts, "u").reshape(len(shift), -1)
    pts = (bpts[None] + shift[:, None]).reshape(-1, el.dim + 1)
    u0 = _values(u, pts, "u").reshape(len(shift), -1)
    lay = el.layout
    pseudo = np.zeros((len(shift), lay.size))
    pseudo[:, lay.bulk] = (ub * rule.weights) @ Vb / el.measure
    pseudo[:, lay.bottom] = (u0 * bw) @ Vbot / el.cell_measure
    out = pseudo @ ops.PiStar.T
    return out[0] if single else out


def newton_solve(disc: Discretization, phi: np.ndarray, mode: str = "weak") -> np.ndarray:
    """Discrete Newton potential of the piecewise polynomial ``phi`` (shape ``(slabs, cells, dim P_p)``).

    Solves, slab by slab, the symmetric a_h system on the discrete test space:
    zero boundary facet moments, and in ``strong`` mode also zero initial
    moments on the first slab (the initial pairing then drops out, as it does
    for the scheme's own test functions).
    """
    N, nc = disc.num_slabs, disc.mesh.spatial.num_cells
    if phi.shape[:2] != (N, nc):
        raise ValueError(f"phi has shape {phi.shape}, expected ({N}, {nc}, ...)")
    cH = disc.coeffs.c_H
    dm = disc.dofmap
    out = np.zeros((N, dm.n_total))
    for n in range(1, N + 1):
        rhs = np.zeros(dm.n_total)
        for grp in disc.groups(n):
            ph = phi[n - 1, grp.cells]
            first = grp.ops[0]
            same = all(o is first for o in grp.ops)
            for i, c in enumerate(grp.cells):
                ops = first if same else grp.ops[i]
                el = ops.element
                lay = ops.layout
                r = np.zeros(lay.size)
                r[lay.bulk] = el.measure * (ops.dt @ ph[i])
                jump = ops.trace_bottom_map @ ph[i]
                if n >= 2:
                    jump = jump - disc.ops(c, n - 1).trace_top_map @ phi[n - 2, c]
                r[lay.bottom] = el.cell_measure * jump
                rhs[grp.l2g[i]] += cH * r
        lu, A_ff, free, _ = disc.factor(n, mode, which="Ah")
        b = rhs[free]
        w = lu.solve(b)
        res = np.linalg.norm(A_ff @ w - b)
        if not np.isfinite(res) or res > 1e-10 * (1.0 + np.linalg.norm(b)):
            raise SolverError(n, f"Newton potential residual {res:.3e}")
        if np.linalg.norm(b) > 0 and w @ b <= 0:
            raise SolverError(n, "a_h slab matrix is not positive definite")
        out[n - 1, free] = w
    return out


def _ynorm_sq_of_pin(disc: Discretization, dofs: np.ndarray) -> float:
    nu = disc.coeffs.nu
    total = 0.0
    for n in range(1, disc.num_slabs + 1):
        for grp in disc.groups(n):
            w = dofs[n - 1][grp.l2g]
            PiN, K = grp.stack("PiN"), grp.stack("K_grad")
            c = np.einsum("eij,ej->ei", PiN, w)
            total += nu * float(np.einsum("ei,eij,ej->", c, K, c))
    return total


def compute_errors(disc: Discretization, sol: Solution, exact: ExactSolution, level: int = 1,
                   degree: int | None = None) -> ErrorReport:
    if sol.disc is not disc:
        raise ValueError("solution was computed on a different discretization")
    if exact.dim != disc.mesh.spatial.dim:
        raise ValueError(f"exact solution is {exact.dim}D but the mesh is {disc.mesh.spatial.dim}D")
    p = disc.p
    degree = degree or 2 * p + 4 + disc.quad_bump
    N, nc = disc.num_slabs, disc.mesh.spatial.num_cells
    nP = disc.unique_ops[0].PiStar.shape[0]
    nu = disc.coeffs.nu
    phi = np.zeros((N, nc, nP))
    bot = np.zeros((N, nc, disc.dofmap.n_bottom))
    top = np.zeros_like(bot)
    ey2 = el2 = 0.0
    for ops, rule, cells, slabs, shifts in disc.element_batches(degree, exact.graded):
        el = ops.element
        V = el.prism_basis.eval(rule.points)
        G = el.prism_basis.grad(rule.points, el.spatial_vars)  # (d, Q, nP)
        pts = (rule.points[None] + shifts[:, None]).reshape(-1, el.dim + 1)
        u = _values(exact.u, pts, "u").reshape(len(cells), -1)
        gu = _values(exact.grad, pts, "grad u").reshape(len(cells), -1, el.dim)
        l2g = np.stack([disc.dofmap.l2g[c] for c in cells])
        uh = sol.dofs[slabs[:, None] - 1, l2g]
        cN = uh @ ops.PiN.T
        cS = uh @ ops.PiStar.T
        diff = gu - np.einsum("dqi,ei->eqd", G, cN)
        ey2 += nu * float(np.einsum("eqd,q->", diff**2, rule.weights))
        el2 += float(np.sum(((u - cS @ V.T) ** 2) @ rule.weights))
        ph = pistar_of_exact(ops, exact.u, degree, rule, shifts) - cS
        phi[slabs - 1, cells] = ph
        bot[slabs - 1, cells] = ph @ ops.trace_bottom_map.T
        top[slabs - 1, cells] = ph @ ops.trace_top_map.T

    Mb = np.stack([disc.ops(c, 1).M_bottom for c in range(nc)])

    def msq(x):
        return float(np.einsum("ci,cij,cj->", x, Mb, x))

    eu2 = msq(bot[0]) + msq(top[-1]) + sum(msq(bot[n] - top[n - 1]) for n in range(1, N))
    eu2 *= 0.5 * disc.coeffs.c_H
    en2 = _ynorm_sq_of_pin(disc, newton_solve(disc, phi, sol.mode))
    mesh = disc.mesh
    return ErrorReport(
        level=level, h=mesh.h, hx=mesh.hx, ht=mesh.ht, ndofs=N * disc.dofmap.n_free,
        EY=math.sqrt(ey2), EN=math.sqrt(en2), EU=math.sqrt(eu2), EL=math.sqrt(el2),
    )


def eoc(e_coarse: float, e_fine: float, h_coarse: float, h_fine: float) -> float:
    if e_coarse == e_fine:
        return 0.0
    if e_coarse <= 0 or e_fine <= 0:
        return float("nan")
    return math.log(e_coarse / e_fine) / math.log(h_coarse / h_fine)


def eoc_table(reports: list[ErrorReport]) -> list[ErrorReport]:
    """Fill pairwise EOCs in place; the last level carries the headline (finest-pair) rate."""
    if len(reports) < 2:
        raise ValueError("EOCs need at least two levels")
    hs = [r.h for r in reports]
    if any(not b < a for a, b in zip(hs, hs[1:])):
        raise ValueError(f"mesh sizes must decrease strictly, got {hs}")
    reports[0].eoc = {k: None for k in ERROR_NAMES}
    for prev, cur in zip(reports, reports[1:]):
        cur.eoc = {k: eoc(getattr(prev, k), getattr(cur, k), prev.h, cur.h) for k in ERROR_NAMES}
    return reports


def headline_rates(reports: list[ErrorReport]) -> dict:
    return dict(reports[-1].eoc)

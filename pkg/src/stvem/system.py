"""Slab-wise global assembly and time marching.

Within a slab the global DoFs are numbered as: interior facet blocks, bulk
blocks, bottom blocks, then boundary facet blocks. Interior facet blocks are
shared by the two neighboring cells, which enforces the moment continuity of
the nonconforming space exactly. Boundary facet DoFs are always constrained
(Dirichlet lifting); in ``strong`` initial-condition mode the bottom DoFs of
the first slab are constrained as well.

Element operators are translation invariant (the monomials are centered and
scaled per element), so they are computed once per distinct cell shape and
slab length and shared by all matching elements.
"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .element import Element, LocalOperatorSet, PhysicalCoefficients, local_operators
from .mesh import SpaceTimeMesh
from .polybasis import (
    Polytope,
    Prism,
    QuadratureRule,
    ScaledMonomialBasis,
    TimeLikeFacet,
    dim_poly_space,
    graded_interval,
    make_quadrature,
)

log = logging.getLogger(__name__)

IC_MODES = ("strong", "weak")


class SolverError(RuntimeError):
    """A slab system could not be factorized or solved accurately."""

    def __init__(self, slab, message):
        super().__init__(f"slab {slab}: {message}")
        self.slab = slab


@dataclass(frozen=True)
class GlobalDofMap:
    slab: int
    p: int
    n_facet: int  # DoFs per facet
    n_bulk: int
    n_bottom: int
    facet_offset: np.ndarray  # per spatial facet: first global DoF of its block
    bulk_offset: np.ndarray  # per cell
    bottom_offset: np.ndarray  # per cell
    l2g: tuple  # per cell: global indices of the local DoFs
    n_free: int
    n_total: int

    @property
    def boundary_dofs(self) -> np.ndarray:
        return np.arange(self.n_free, self.n_total)

    def bottom_dofs(self) -> np.ndarray:
        return (self.bottom_offset[:, None] + np.arange(self.n_bottom)).ravel()


def build_dof_map(mesh: SpaceTimeMesh, p: int, slab: int = 1) -> GlobalDofMap:
    sm = mesh.spatial
    d = sm.dim
    nf, nb, nbot = dim_poly_space(p, d), dim_poly_space(p - 1, d + 1), dim_poly_space(p, d)
    nc = sm.num_cells
    interior, boundary = sm.interior_facets, sm.boundary_facets
    facet_offset = np.empty(sm.num_facets, dtype=int)
    facet_offset[interior] = np.arange(interior.size) * nf
    n_int = interior.size * nf
    bulk_offset = n_int + np.arange(nc) * nb
    bottom_offset = n_int + nc * nb + np.arange(nc) * nbot
    n_free = n_int + nc * (nb + nbot)
    facet_offset[boundary] = n_free + np.arange(boundary.size) * nf
    n_total = n_free + boundary.size * nf
    l2g = []
    for c in range(nc):
        idx = [bulk_offset[c] + np.arange(nb)]
        idx += [facet_offset[f] + np.arange(nf) for f, _ in sm.cell_facets[c]]
        idx.append(bottom_offset[c] + np.arange(nbot))
        l2g.append(np.concatenate(idx))
    return GlobalDofMap(
        slab=slab, p=p, n_facet=nf, n_bulk=nb, n_bottom=nbot, facet_offset=facet_offset,
        bulk_offset=bulk_offset, bottom_offset=bottom_offset, l2g=tuple(l2g), n_free=n_free, n_total=n_total,
    )


def _signature(mesh: SpaceTimeMesh, c: int, ht: float):
    sm = mesh.spatial
    h = sm.cell_diameters[c]
    rel = np.round((sm.vertices[list(sm.cells[c])] - sm.cell_centroids[c]) / h, 10)
    facet_info = []
    for local, (f, sign) in enumerate(sm.cell_facets[c]):
        pts = sm.facet_points(f)
        facet_info.append((sign, *np.round((pts[0] - sm.cell_centroids[c]) / h, 10)))
    return (round(ht / h, 10), round(h, 12), rel.tobytes(), tuple(facet_info))


@dataclass
class CellGroup:
    """Cells of one slab sharing the same local DoF count, with stacked operators."""

    cells: np.ndarray
    l2g: np.ndarray  # (E, n_local)
    ops: list  # LocalOperatorSet per cell (shared objects)

    def stack(self, name) -> np.ndarray:
        first = self.ops[0]
        if all(o is first for o in self.ops):
            return np.broadcast_to(getattr(first, name), (len(self.ops),) + getattr(first, name).shape)
        return np.stack([getattr(o, name) for o in self.ops])


class Discretization:
    """Mesh, degree and coefficients, with cached element operators and DoF maps."""

    def __init__(self, mesh: SpaceTimeMesh, p: int, coeffs: PhysicalCoefficients | None = None,
                 quad_bump: int = 0, threads: int = 1):
        if p < 1:
            raise ValueError("p must be >= 1")
        self.mesh = mesh
        self.p = p
        self.coeffs = coeffs or PhysicalCoefficients()
        self.quad_bump = quad_bump
        self.quad_degree = 2 * p + 2 + quad_bump
        self.dofmap = build_dof_map(mesh, p)
        sm = mesh.spatial
        N = mesh.time.num_slabs
        by_signature: dict = {}
        representatives = []
        self.op_index = np.empty((N, sm.num_cells), dtype=int)
        for n in range(1, N + 1):
            ht = mesh.time.lengths[n - 1]
            for c in range(sm.num_cells):
                sig = _signature(mesh, c, ht)
                k = by_signature.get(sig)
                if k is None:
                    k = by_signature[sig] = len(representatives)
                    representatives.append((c, n))
                self.op_index[n - 1, c] = k

        def build(cn):
            el = Element.from_mesh(mesh, cn[0], cn[1], p, quad_degree=self.quad_degree)
            return local_operators(el, self.coeffs)

        if threads > 1 and len(representatives) > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                self.unique_ops = list(pool.map(build, representatives))
        else:
            self.unique_ops = [build(cn) for cn in representatives]
        self._groups: dict = {}
        self._matrices: dict = {}
        self._factors: dict = {}
        self.centers = np.array(
            [[np.append(sm.cell_centroids[c], 0.5 * sum(mesh.time.slab(n))) for c in range(sm.num_cells)]
             for n in range(1, N + 1)]
        )

    @property
    def num_slabs(self) -> int:
        return self.mesh.time.num_slabs

    def ops(self, c: int, n: int) -> LocalOperatorSet:
        return self.unique_ops[self.op_index[n - 1, c]]

    def shift(self, c: int, n: int) -> np.ndarray:
        """Translation from the reference element of (c, n) to the element itself."""
        ref = self.ops(c, n).element
        return self.centers[n - 1, c] - np.append(ref.xc, ref.tc)

    def groups(self, n: int) -> list[CellGroup]:
        key = self.op_index[n - 1].tobytes()
        if key not in self._groups:
            idx = self.op_index[n - 1]
            sizes = np.array([self.unique_ops[k].layout.size for k in idx])
            out = []
            for size in np.unique(sizes):
                cells = np.flatnonzero(sizes == size)
                out.append(CellGroup(
                    cells=cells,
                    l2g=np.stack([self.dofmap.l2g[c] for c in cells]),
                    ops=[self.unique_ops[idx[c]] for c in cells],
                ))
            self._groups[key] = out
        return self._groups[key]

    def slab_matrix(self, n: int, which: str = "Bh_in") -> sp.csr_matrix:
        """Full (free + constrained) slab matrix assembled from local blocks ``which``."""
        key = (which, self.op_index[n - 1].tobytes())
        if key not in self._matrices:
            rows, cols, vals = [], [], []
            for g in self.groups(n):
                blocks = g.stack(which)
                nl = g.l2g.shape[1]
                rows.append(np.repeat(g.l2g, nl, axis=1).ravel())
                cols.append(np.tile(g.l2g, (1, nl)).ravel())
                vals.append(np.asarray(blocks).reshape(len(g.cells), -1).ravel())
            ndof = self.dofmap.n_total
            A = sp.coo_matrix(
                (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(ndof, ndof)
            ).tocsr()
            A.sum_duplicates()
            self._matrices[key] = A
        return self._matrices[key]

    def constrained_mask(self, n: int, mode: str) -> np.ndarray:
        mask = np.zeros(self.dofmap.n_total, dtype=bool)
        mask[self.dofmap.n_free:] = True
        if n == 1 and mode == "strong":
            mask[self.dofmap.bottom_dofs()] = True
        return mask

    def factor(self, n: int, mode: str, which: str = "Bh_in"):
        """Sparse LU of the free block, reused across slabs with identical matrices."""
        mask = self.constrained_mask(n, mode)
        key = (which, self.op_index[n - 1].tobytes(), mask.tobytes())
        if key not in self._factors:
            A = self.slab_matrix(n, which)
            free = np.flatnonzero(~mask)
            A_ff = A[free][:, free].tocsc()
            try:
                lu = spla.splu(A_ff, permc_spec="COLAMD")
            except RuntimeError as exc:
                raise SolverError(n, f"factorization failed ({exc})") from exc
            diag = np.abs(lu.U.diagonal())
            if diag.size and (not np.all(np.isfinite(diag)) or diag.min() <= 1e-14 * diag.max()):
                raise SolverError(n, f"numerically singular matrix (min |pivot| = {diag.min():.3e})")
            self._factors[key] = (lu, A_ff, free, mask)
        return self._factors[key]

    # quadrature helpers -------------------------------------------------

    def element_batches(self, degree: int, graded: bool = False):
        """Yield ``(ops, rule, cells, slabs, shifts)`` for every group of identical elements.

        ``rule`` lives on the reference element; element ``(cells[i], slabs[i])``
        uses ``rule.points + shifts[i]``. With ``graded`` the first slab gets a
        time rule graded towards its bottom.
        """
        slab_no = np.repeat(np.arange(1, self.num_slabs + 1), self.op_index.shape[1])
        cell_no = np.tile(np.arange(self.op_index.shape[1]), self.num_slabs)
        flat = self.op_index.ravel()
        for k, ops in enumerate(self.unique_ops):
            ref = ops.element
            ref_center = np.append(ref.xc, ref.tc)
            sel = flat == k
            parts = [(sel & (slab_no == 1), True), (sel & (slab_no > 1), False)] if graded else [(sel, False)]
            for mask, use_graded in parts:
                if not mask.any():
                    continue
                cells, slabs = cell_no[mask], slab_no[mask]
                time_rule = graded_interval(ref.t0, ref.t1, degree) if use_graded else None
                rule = make_quadrature(Prism(ref.cell, ref.t0, ref.t1), degree, time_rule=time_rule)
                shifts = self.centers[slabs - 1, cells] - ref_center
                yield ops, rule, cells, slabs, shifts

    def facet_basis(self, f: int, n: int) -> tuple[ScaledMonomialBasis, callable]:
        sm = self.mesh.spatial
        t0, t1 = self.mesh.time.slab(n)
        tc, ht = 0.5 * (t0 + t1), t1 - t0
        if sm.dim == 1:
            return ScaledMonomialBasis("facet", [tc], [ht], self.p), lambda pts: pts[:, -1:]
        pts = sm.facet_points(f)
        tau = pts[1] - pts[0]
        length = float(np.linalg.norm(tau))
        mid = pts.mean(0)
        tau = tau / length

        def coords(x):
            return np.stack([(x[:, :2] - mid) @ tau, x[:, 2]], axis=1)

        return ScaledMonomialBasis("facet", [0.0, tc], [length, ht], self.p), coords

    def facet_moments(self, f: int, n: int, g, degree: int, graded: bool = False) -> np.ndarray:
        """Scaled moments ``(1/|F|) int_F g m_b`` of boundary data on facet ``f`` in slab ``n``."""
        sm = self.mesh.spatial
        t0, t1 = self.mesh.time.slab(n)
        time_rule = graded_interval(t0, t1, degree) if (graded and n == 1) else None
        verts = sm.facet_points(f)
        rule = make_quadrature(TimeLikeFacet(verts, t0, t1), degree, time_rule=time_rule)
        basis, coords = self.facet_basis(f, n)
        vals = np.asarray(g(rule.points), dtype=float)
        if not np.all(np.isfinite(vals)):
            raise FloatingPointError(f"boundary data not finite on facet {f}, slab {n}")
        measure = sm.facet_measures[f] * (t1 - t0)
        return basis.eval(coords(rule.points)).T @ (rule.weights * vals) / measure

    def initial_moments(self, u0, degree: int) -> np.ndarray:
        """Unscaled moments ``int_{K_x} u0 m_g`` per cell, shape ``(cells, n_bottom)``."""
        sm = self.mesh.spatial
        out = np.empty((sm.num_cells, self.dofmap.n_bottom))
        for c in range(sm.num_cells):
            el = self.ops(c, 1).element
            rule = make_quadrature(sm.cell_polytope(c), degree)
            vals = np.asarray(u0(rule.points), dtype=float)
            if not np.all(np.isfinite(vals)):
                raise FloatingPointError(f"initial datum not finite on cell {c}")
            basis = ScaledMonomialBasis("cell", sm.cell_centroids[c], np.full(sm.dim, el.hx), self.p)
            out[c] = basis.eval(rule.points).T @ (rule.weights * vals)
        return out

    def element_loads(self, f, graded: bool = False) -> np.ndarray:
        """Local load vectors for every element, shape ``(slabs, cells, n_local)`` (uniform layouts)."""
        nl = max(o.layout.size for o in self.unique_ops)
        out = np.zeros((self.num_slabs, self.mesh.spatial.num_cells, nl))
        for ops, rule, cells, slabs, shifts in self.element_batches(self.quad_degree, graded):
            el = ops.element
            Vb = el.bulk_basis.eval(rule.points)
            pts = rule.points[None, :, :] + shifts[:, None, :]
            vals = np.asarray(f(pts.reshape(-1, pts.shape[-1])), dtype=float).reshape(len(cells), -1)
            if not np.all(np.isfinite(vals)):
                raise FloatingPointError("source term is not finite at quadrature points")
            moments = (vals * rule.weights) @ Vb
            out[slabs - 1, cells, : ops.layout.size] = moments @ ops.load_op.T
        return out


@dataclass
class SlabSystem:
    slab: int
    matrix: sp.csr_matrix  # free block
    rhs: np.ndarray
    lifting: np.ndarray  # values of all constrained DoFs (full-length, zeros on free DoFs)
    constrained: np.ndarray  # boolean mask over all slab DoFs

    @property
    def free(self) -> np.ndarray:
        return np.flatnonzero(~self.constrained)


@dataclass
class Solution:
    disc: Discretization
    dofs: np.ndarray  # (slabs, n_total)
    top_traces: np.ndarray  # (slabs, cells, n_bottom): (Pi* u_h)(., t_n) coefficients
    mode: str = "weak"
    residuals: list = field(default_factory=list)

    def local(self, c: int, n: int) -> np.ndarray:
        return self.dofs[n - 1, self.disc.dofmap.l2g[c]]


@dataclass
class ProblemData:
    """Right-hand side, Dirichlet data and initial datum as vectorized callables.

    ``f`` and ``g`` take arrays of space-time points (last column is time);
    ``u0`` takes spatial points. ``graded`` requests graded time quadrature on
    the first slab.
    """

    f: callable
    g: callable
    u0: callable
    graded: bool = False


def _zero(points):
    return np.zeros(len(points))


def top_traces(disc: Discretization, n: int, u: np.ndarray) -> np.ndarray:
    out = np.zeros((disc.mesh.spatial.num_cells, disc.dofmap.n_bottom))
    for g in disc.groups(n):
        T = g.stack("trace_top")
        out[g.cells] = np.einsum("eij,ej->ei", T, u[g.l2g])
    return out


def assemble_slab(disc: Discretization, n: int, data: ProblemData, prev_traces=None, mode: str = "weak",
                  loads=None) -> SlabSystem:
    if mode not in IC_MODES:
        raise ValueError(f"unknown initial-condition mode {mode!r}")
    if n >= 2 and prev_traces is None:
        raise ValueError(f"slab {n} needs the previous slab's top traces")
    if n == 1 and prev_traces is not None:
        raise ValueError("slab 1 takes no previous traces")
    dm = disc.dofmap
    sm = disc.mesh.spatial
    cH = disc.coeffs.c_H
    rhs = np.zeros(dm.n_total)
    if loads is None:
        loads = disc.element_loads(data.f, data.graded)[n - 1]
    for g in disc.groups(n):
        np.add.at(rhs, g.l2g, loads[g.cells, : g.l2g.shape[1]])

    bottom_idx = dm.bottom_offset[:, None] + np.arange(dm.n_bottom)
    if n >= 2:
        rhs[bottom_idx] += cH * sm.cell_measures[:, None] * prev_traces
    lifting = np.zeros(dm.n_total)
    deg = disc.quad_degree + 2
    for f in sm.boundary_facets:
        lifting[dm.facet_offset[f] + np.arange(dm.n_facet)] = disc.facet_moments(f, n, data.g, deg, data.graded)
    if n == 1:
        m0 = disc.initial_moments(data.u0, deg)
        if mode == "weak":
            # (Pi_p u0, v(., 0)) with Pi_p u0 reconstructed from its moments
            recon = np.stack([np.linalg.solve(disc.ops(c, 1).M_bottom, m0[c]) for c in range(sm.num_cells)])
            rhs[bottom_idx] += cH * sm.cell_measures[:, None] * recon
        else:
            lifting[bottom_idx] = m0 / sm.cell_measures[:, None]
    mask = disc.constrained_mask(n, mode)
    A = disc.slab_matrix(n)
    free = np.flatnonzero(~mask)
    rhs_free = rhs[free] - A[free][:, np.flatnonzero(mask)] @ lifting[mask]
    return SlabSystem(n, A[free][:, free], rhs_free, lifting, mask)


def solve_linear(system: SlabSystem, lu=None, tol: float = 1e-10) -> np.ndarray:
    """Direct sparse solve; raises :class:`SolverError` if the residual contract fails."""
    A = system.matrix.tocsc()
    if lu is None:
        try:
            lu = spla.splu(A, permc_spec="COLAMD")
        except RuntimeError as exc:
            raise SolverError(system.slab, f"factorization failed ({exc})") from exc
    x = lu.solve(system.rhs)
    res = np.linalg.norm(A @ x - system.rhs)
    if not np.isfinite(res) or res > tol * (1.0 + np.linalg.norm(system.rhs)):
        raise SolverError(system.slab, f"residual {res:.3e} exceeds tolerance")
    return x


def march(disc: Discretization, data: ProblemData, mode: str = "weak") -> Solution:
    """Solve slab by slab, transferring the top traces of the projected solution upwind."""
    N = disc.num_slabs
    dm = disc.dofmap
    loads = disc.element_loads(data.f, data.graded)
    dofs = np.zeros((N, dm.n_total))
    traces = np.zeros((N, disc.mesh.spatial.num_cells, dm.n_bottom))
    residuals = []
    prev = None
    for n in range(1, N + 1):
        system = assemble_slab(disc, n, data, prev, mode, loads=loads[n - 1])
        lu, _, free, mask = disc.factor(n, mode)
        x = solve_linear(system, lu)
        u = system.lifting.copy()
        u[free] = x
        dofs[n - 1] = u
        traces[n - 1] = prev = top_traces(disc, n, u)
        residuals.append(float(np.linalg.norm(system.matrix @ x - system.rhs)))
    log.debug("marched %d slabs, max residual %.3e", N, max(residuals))
    return Solution(disc, dofs, traces, mode, residuals)


def assemble_global(disc: Discretization, which: str = "Bh") -> sp.csr_matrix:
    """All-slab matrix over ``slabs * n_total`` DoFs (slab-major).

    ``which="Bh"`` gives the upwind form: in-slab blocks on the diagonal and
    the trace coupling to the previous slab below it. ``which="Ah"`` gives the
    block-diagonal symmetric part.
    """
    if which not in ("Bh", "Ah"):
        raise ValueError(f"unknown global form {which!r}")
    ndof = disc.dofmap.n_total
    N = disc.num_slabs
    blocks = [[None] * N for _ in range(N)]
    for n in range(1, N + 1):
        blocks[n - 1][n - 1] = disc.slab_matrix(n, "Bh_in" if which == "Bh" else "Ah")
    if which == "Bh":
        l2g = disc.dofmap.l2g
        for n in range(2, N + 1):
            rows, cols, vals = [], [], []
            for c in range(disc.mesh.spatial.num_cells):
                C = disc.ops(c, n).bh_prev(disc.ops(c, n - 1))
                rows.append(np.repeat(l2g[c], C.shape[1]))
                cols.append(np.tile(l2g[c], C.shape[0]))
                vals.append(C.ravel())
            blocks[n - 1][n - 2] = sp.coo_matrix(
                (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(ndof, ndof)
            )
    return sp.bmat(blocks, format="csr", dtype=float) if N > 1 else sp.csr_matrix(blocks[0][0])


def interpolate_global(disc: Discretization, coeff_fn) -> np.ndarray:
    """Global DoFs of a piecewise polynomial; ``coeff_fn(c, n, ops)`` returns prism coefficients."""
    dm = disc.dofmap
    out = np.zeros((disc.num_slabs, dm.n_total))
    for n in range(1, disc.num_slabs + 1):
        for c in range(disc.mesh.spatial.num_cells):
            ops = disc.ops(c, n)
            out[n - 1, dm.l2g[c]] = ops.D @ coeff_fn(c, n, ops)
    return out


# Columnar text dump: one line per (slab, cell) with the local DoFs and the
# Pi^N / Pi* coefficients of the solution on that element.
SOLUTION_HEADER = "# stvem-solution 1"


def dump_solution(sol: Solution, path) -> None:
    disc = sol.disc
    lines = [SOLUTION_HEADER, f"# p {disc.p} slabs {disc.num_slabs} cells {disc.mesh.spatial.num_cells}",
             "# columns: slab cell kind values..."]
    for n in range(1, disc.num_slabs + 1):
        for c in range(disc.mesh.spatial.num_cells):
            ops = disc.ops(c, n)
            u = sol.local(c, n)
            for kind, vals in (("dofs", u), ("pin", ops.PiN @ u), ("pistar", ops.PiStar @ u)):
                lines.append(f"{n} {c} {kind} " + " ".join(repr(float(v)) for v in vals))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_solution_table(path) -> dict:
    """Read a solution dump into ``{(slab, cell, kind): array}``."""
    out = {}
    with open(path) as fh:
        first = fh.readline().strip()
        if first != SOLUTION_HEADER:
            raise ValueError(f"{path}: not a solution dump")
        for line in fh:
            if line.startswith("#") or not line.strip():
                continue
            parts = line.split()
            out[(int(parts[0]), int(parts[1]), parts[2])] = np.array([float(v) for v in parts[3:]])
    return out

"""Tensor-product-in-time space-time meshes.

A :class:`SpaceTimeMesh` is a spatial polytopal mesh (segments in 1D,
counterclockwise polygons in 2D) times a partition of ``[0, T]``. Every
space-time element is a prism ``cell x (t_{n-1}, t_n)``.

Each spatial facet carries one fixed unit normal. For a cell, ``cell_facets``
lists ``(facet, sign)`` pairs where ``sign * normal`` is the outward normal.
In 1D a facet is a point with measure 1, so facet integrals are point
evaluations in space.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .polybasis import Polytope, polygon_centroid


class MeshError(ValueError):
    """Raised for invalid or degenerate geometry."""


def _frozen(a, dtype=float):
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class SpatialMesh:
    dim: int
    vertices: np.ndarray
    cells: tuple
    facet_vertices: tuple
    facet_normals: np.ndarray
    facet_measures: np.ndarray
    facet_barycenters: np.ndarray
    facet_cells: np.ndarray  # (nf, 2), second entry -1 on the boundary
    cell_facets: tuple  # per cell: tuple of (facet index, sign)
    cell_measures: np.ndarray
    cell_centroids: np.ndarray
    cell_diameters: np.ndarray
    facet_sizes: np.ndarray = field(repr=False)

    @property
    def num_cells(self) -> int:
        return len(self.cells)

    @property
    def num_facets(self) -> int:
        return len(self.facet_vertices)

    @property
    def boundary_facets(self) -> np.ndarray:
        return np.flatnonzero(self.facet_cells[:, 1] < 0)

    @property
    def interior_facets(self) -> np.ndarray:
        return np.flatnonzero(self.facet_cells[:, 1] >= 0)

    @property
    def h(self) -> float:
        return float(self.cell_diameters.max())

    def cell_polytope(self, c: int) -> Polytope:
        return Polytope(self.vertices[list(self.cells[c])])

    def facet_points(self, f: int) -> np.ndarray:
        return self.vertices[list(self.facet_vertices[f])]

    def outward_normal(self, c: int, local: int) -> np.ndarray:
        f, sign = self.cell_facets[c][local]
        return sign * self.facet_normals[f]

    def neighbors(self, c: int):
        out = []
        for f, _ in self.cell_facets[c]:
            a, b = self.facet_cells[f]
            if b >= 0:
                out.append(b if a == c else a)
        return out


def spatial_mesh_from_cells(vertices, cells) -> SpatialMesh:
    """Build facet connectivity, normals and sizes from vertex/cell tables."""
    vertices = np.asarray(vertices, dtype=float)
    if vertices.ndim == 1:
        vertices = vertices[:, None]
    dim = vertices.shape[1]
    if dim not in (1, 2):
        raise MeshError(f"unsupported spatial dimension {dim}")
    cells = tuple(tuple(int(i) for i in c) for c in cells)

    facet_index = {}
    facet_vertices, facet_cells, normals, measures, bary = [], [], [], [], []
    cell_facets = []
    cell_meas, cell_cent, cell_diam = [], [], []

    for c, cell in enumerate(cells):
        pts = vertices[list(cell)]
        entries = []
        if dim == 1:
            if len(cell) != 2:
                raise MeshError(f"cell {c}: 1D cells need exactly two vertices")
            a, b = cell if pts[0, 0] < pts[1, 0] else cell[::-1]
            length = vertices[b, 0] - vertices[a, 0]
            if length <= 0:
                raise MeshError(f"cell {c} has zero length")
            cell_meas.append(length)
            cell_cent.append([0.5 * (vertices[a, 0] + vertices[b, 0])])
            cell_diam.append(length)
            local = [((a,), -1.0), ((b,), 1.0)]
        else:
            if len(cell) < 3:
                raise MeshError(f"cell {c}: polygons need at least three vertices")
            try:
                centroid, area = polygon_centroid(pts)
            except ValueError:
                centroid, area = None, 0.0
            if area <= 0:
                raise MeshError(f"cell {c} is inverted or degenerate (signed area {area:.3e})")
            cell_meas.append(area)
            cell_cent.append(centroid)
            diff = pts[:, None, :] - pts[None, :, :]
            cell_diam.append(float(np.sqrt((diff**2).sum(-1)).max()))
            local = [((cell[i], cell[(i + 1) % len(cell)]), None) for i in range(len(cell))]

        for verts, sign in local:
            key = tuple(sorted(verts))
            if key in facet_index:
                f = facet_index[key]
                if facet_cells[f][1] >= 0:
                    raise MeshError(f"facet {key} shared by more than two cells")
                facet_cells[f][1] = c
                if dim == 1:
                    s = sign * normals[f][0]
                else:
                    s = 1.0 if tuple(verts) == facet_vertices[f] else -1.0
                entries.append((f, s))
                continue
            f = len(facet_vertices)
            facet_index[key] = f
            facet_cells.append([c, -1])
            if dim == 1:
                facet_vertices.append(verts)
                normals.append([1.0])
                measures.append(1.0)
                bary.append([vertices[verts[0], 0]])
                entries.append((f, sign))
            else:
                a, b = vertices[verts[0]], vertices[verts[1]]
                length = float(np.linalg.norm(b - a))
                if length <= 0:
                    raise MeshError(f"cell {c} has a zero-length edge")
                tau = (b - a) / length
                facet_vertices.append(tuple(verts))
                normals.append([tau[1], -tau[0]])
                measures.append(length)
                bary.append(0.5 * (a + b))
                entries.append((f, 1.0))
        cell_facets.append(tuple(entries))

    facet_cells = np.array(facet_cells, dtype=int)
    cell_diam = np.array(cell_diam)
    sizes = np.where(
        facet_cells[:, 1] >= 0,
        np.minimum(cell_diam[facet_cells[:, 0]], cell_diam[np.maximum(facet_cells[:, 1], 0)]),
        cell_diam[facet_cells[:, 0]],
    )
    return SpatialMesh(
        dim=dim,
        vertices=_frozen(vertices),
        cells=cells,
        facet_vertices=tuple(facet_vertices),
        facet_normals=_frozen(normals),
        facet_measures=_frozen(measures),
        facet_barycenters=_frozen(bary),
        facet_cells=_frozen(facet_cells, int),
        cell_facets=tuple(cell_facets),
        cell_measures=_frozen(cell_meas),
        cell_centroids=_frozen(cell_cent),
        cell_diameters=_frozen(cell_diam),
        facet_sizes=_frozen(sizes),
    )


def build_cartesian_1d(num_cells: int, interval=(0.0, 1.0)) -> SpatialMesh:
    a, b = interval
    if num_cells < 1 or not b > a:
        raise MeshError("need num_cells >= 1 and a < b")
    x = np.linspace(a, b, num_cells + 1)
    return spatial_mesh_from_cells(x, [(i, i + 1) for i in range(num_cells)])


def build_quad_2d(nx: int, ny: int, rect=((0.0, 1.0), (0.0, 1.0)), perturb: float = 0.0, seed: int = 0) -> SpatialMesh:
    """Structured ``nx x ny`` quadrilaterals with interior vertices randomly displaced.

    Each interior vertex moves by ``perturb * min(dx, dy)`` times a uniform
    sample of ``[-1, 1]^2`` drawn from a generator seeded with ``seed``.
    """
    if nx < 1 or ny < 1:
        raise MeshError("need nx, ny >= 1")
    if not 0.0 <= perturb < 0.3:
        raise MeshError("perturb must lie in [0, 0.3)")
    (ax, bx), (ay, by) = rect
    xs, ys = np.linspace(ax, bx, nx + 1), np.linspace(ay, by, ny + 1)
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    verts = np.stack([X.ravel(), Y.ravel()], axis=1)
    if perturb > 0:
        rng = np.random.default_rng(seed)
        step = min((bx - ax) / nx, (by - ay) / ny)
        shift = perturb * step * rng.uniform(-1.0, 1.0, size=verts.shape)
        ix, iy = np.meshgrid(np.arange(nx + 1), np.arange(ny + 1), indexing="ij")
        interior = ((ix > 0) & (ix < nx) & (iy > 0) & (iy < ny)).ravel()
        verts[interior] += shift[interior]

    def vid(i, j):
        return i * (ny + 1) + j

    cells = [(vid(i, j), vid(i + 1, j), vid(i + 1, j + 1), vid(i, j + 1)) for i in range(nx) for j in range(ny)]
    mesh = spatial_mesh_from_cells(verts, cells)
    report = validate_geometry(mesh)
    if not report.passed:
        raise MeshError(f"perturbed mesh is invalid: cells {report.failed_cells} are not star-shaped")
    return mesh


@dataclass(frozen=True)
class GeometryReport:
    gamma: float
    max_facets: int
    max_neighbor_ratio: float
    min_radius_ratio: float
    failed_cells: tuple
    passed: bool


def validate_geometry(mesh: SpatialMesh) -> GeometryReport:
    """Check star-shapedness with respect to the centroid and mesh grading.

    The radius of the largest centroid-centered ball inside the cell kernel is
    the smallest signed distance from the centroid to a facet hyperplane;
    ``gamma`` reports the largest ``h_Kx / radius`` and the largest ratio of
    neighboring diameters.
    """
    failed = []
    gamma = 0.0
    min_ratio = np.inf
    for c in range(mesh.num_cells):
        xc = mesh.cell_centroids[c]
        h = mesh.cell_diameters[c]
        radius = np.inf
        for local, (f, _) in enumerate(mesh.cell_facets[c]):
            n = mesh.outward_normal(c, local)
            x0 = mesh.vertices[mesh.facet_vertices[f][0]]
            radius = min(radius, float(np.dot(x0 - xc, n)))
        if not radius > 1e-12 * h:
            failed.append(c)
            continue
        gamma = max(gamma, h / radius)
        min_ratio = min(min_ratio, radius / h)
    ratio = 1.0
    for f in mesh.interior_facets:
        a, b = mesh.facet_cells[f]
        ha, hb = mesh.cell_diameters[a], mesh.cell_diameters[b]
        ratio = max(ratio, ha / hb, hb / ha)
    gamma = max(gamma, ratio)
    max_facets = max(len(cf) for cf in mesh.cell_facets)
    return GeometryReport(
        gamma=float(gamma),
        max_facets=max_facets,
        max_neighbor_ratio=float(ratio),
        min_radius_ratio=float(min_ratio) if failed == [] else 0.0,
        failed_cells=tuple(failed),
        passed=not failed,
    )


@dataclass(frozen=True)
class TimePartition:
    knots: np.ndarray

    def __post_init__(self):
        k = np.array(self.knots, dtype=float)
        if k.ndim != 1 or k.size < 2 or np.any(np.diff(k) <= 0):
            raise MeshError("time knots must be strictly increasing with at least two entries")
        k.setflags(write=False)
        object.__setattr__(self, "knots", k)

    @property
    def num_slabs(self) -> int:
        return self.knots.size - 1

    @property
    def T(self) -> float:
        return float(self.knots[-1])

    @property
    def lengths(self) -> np.ndarray:
        return np.diff(self.knots)

    def slab(self, n: int) -> tuple[float, float]:
        """Endpoints of slab ``n`` (1-based)."""
        return float(self.knots[n - 1]), float(self.knots[n])


def build_time_partition(num_slabs: int, T: float = 1.0) -> TimePartition:
    if num_slabs < 1 or not T > 0:
        raise MeshError("need num_slabs >= 1 and T > 0")
    return TimePartition(np.arange(num_slabs + 1) * (T / num_slabs))


@dataclass(frozen=True)
class SpaceTimeMesh:
    spatial: SpatialMesh
    time: TimePartition

    @property
    def dim(self) -> int:
        return self.spatial.dim

    @property
    def num_elements(self) -> int:
        return self.spatial.num_cells * self.time.num_slabs

    def element_diameter(self, c: int, n: int) -> float:
        return float(np.hypot(self.spatial.cell_diameters[c], self.time.lengths[n - 1]))

    @property
    def h(self) -> float:
        return float(np.hypot(self.spatial.cell_diameters.max(), self.time.lengths.max()))

    @property
    def hx(self) -> float:
        return self.spatial.h

    @property
    def ht(self) -> float:
        return float(self.time.lengths.max())


# Line-oriented text format:
#   stvem-mesh 1
#   dim <d>
#   vertices <n>      then n lines of d coordinates
#   cells <n>         then n lines "k i_1 ... i_k"
#   facets <n>        then n lines "k v_1 .. v_k  n_1 .. n_d  c0 c1"
# The facet table is informational on load: it is recomputed and checked.

MESH_HEADER = "stvem-mesh 1"


def dump_mesh(mesh: SpatialMesh, path) -> None:
    lines = [MESH_HEADER, f"dim {mesh.dim}", f"vertices {len(mesh.vertices)}"]
    lines += [" ".join(repr(float(x)) for x in v) for v in mesh.vertices]
    lines.append(f"cells {mesh.num_cells}")
    lines += [" ".join(str(i) for i in (len(c), *c)) for c in mesh.cells]
    lines.append(f"facets {mesh.num_facets}")
    for f in range(mesh.num_facets):
        fv = mesh.facet_vertices[f]
        parts = [str(len(fv)), *map(str, fv), *(repr(float(x)) for x in mesh.facet_normals[f])]
        parts += [str(int(c)) for c in mesh.facet_cells[f]]
        lines.append(" ".join(parts))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_mesh(path) -> SpatialMesh:
    with open(path) as fh:
        rows = [ln.split() for ln in fh if ln.strip() and not ln.startswith("#")]
    if not rows or " ".join(rows[0]) != MESH_HEADER:
        raise MeshError(f"{path}: missing '{MESH_HEADER}' header")
    pos = 1

    def section(name):
        nonlocal pos
        if rows[pos][0] != name:
            raise MeshError(f"{path}: expected section '{name}', got '{rows[pos][0]}'")
        count = int(rows[pos][1])
        body = rows[pos + 1 : pos + 1 + count]
        pos += 1 + count
        return body

    if rows[pos][0] != "dim":
        raise MeshError(f"{path}: expected 'dim'")
    dim = int(rows[pos][1])
    pos += 1
    verts = np.array([[float(x) for x in r] for r in section("vertices")]).reshape(-1, dim)
    cells = [[int(x) for x in r[1 : 1 + int(r[0])]] for r in section("cells")]
    mesh = spatial_mesh_from_cells(verts, cells)
    if pos < len(rows):
        facets = section("facets")
        if len(facets) != mesh.num_facets:
            raise MeshError(f"{path}: facet table has {len(facets)} rows, mesh has {mesh.num_facets}")
    return mesh

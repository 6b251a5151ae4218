import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from stvem.mesh import (
    MeshError,
    SpaceTimeMesh,
    TimePartition,
    build_cartesian_1d,
    build_quad_2d,
    build_time_partition,
    dump_mesh,
    load_mesh,
    spatial_mesh_from_cells,
    validate_geometry,
)


def test_cartesian_counts():
    m = build_cartesian_1d(4, (0, 1))
    assert (m.num_cells, m.num_facets, len(m.interior_facets)) == (4, 5, 3)
    one = build_cartesian_1d(1, (0, 1))
    assert one.num_cells == 1 and len(one.boundary_facets) == 2


def test_uniform_facet_sizes():
    m = build_cartesian_1d(4, (0, 1))
    assert np.allclose(m.facet_sizes[m.interior_facets], 0.25)


def test_quad_counts_and_diameters():
    m = build_quad_2d(2, 2)
    assert (m.num_cells, m.num_facets, len(m.interior_facets)) == (4, 12, 4)
    assert np.allclose(m.cell_diameters, math.sqrt(0.5))


def test_perturbed_quads_validate():
    report = validate_geometry(build_quad_2d(8, 8, perturb=0.15))
    assert report.passed and report.failed_cells == ()
    assert report.max_facets == 4 and report.gamma > 1


def test_uniform_meshes_validate():
    r1 = validate_geometry(build_cartesian_1d(7))
    assert r1.passed and r1.max_neighbor_ratio == pytest.approx(1.0)
    assert validate_geometry(build_quad_2d(3, 5)).passed


def test_collapsed_cell_is_named():
    m = build_quad_2d(3, 3)
    verts = np.array(m.vertices)
    cells = list(m.cells)
    # push one vertex of cell 4 onto the opposite corner: a zero-area (inverted) cell
    a, b, c, d = cells[4]
    verts[c] = verts[a]
    with pytest.raises(MeshError, match="cell 4"):
        spatial_mesh_from_cells(verts, cells)


def test_nonstar_cell_fails_validation():
    # a dart: reflex vertex pulled past the centroid
    verts = np.array([[0.0, 0.0], [1.0, 0.5], [2.0, 0.0], [1.0, 2.0], [0.2, 1.0], [1.0, 0.05]])
    cells = [(0, 5, 2, 3)]
    m = spatial_mesh_from_cells(verts, cells)
    # still star-shaped: passes
    assert validate_geometry(m).passed
    bad = np.array([[0.0, 0.0], [2.0, 0.0], [0.3, 0.3], [0.0, 2.0]])
    report = validate_geometry(spatial_mesh_from_cells(bad, [(0, 1, 2, 3)]))
    assert not report.passed and report.failed_cells == (0,)


def test_perturbation_bounds():
    with pytest.raises(MeshError):
        build_quad_2d(2, 2, perturb=0.3)
    with pytest.raises(MeshError):
        build_cartesian_1d(0)


@given(st.integers(1, 6), st.integers(1, 6), st.floats(0.0, 0.29), st.integers(0, 1000))
def test_measure_and_closure(nx, ny, perturb, seed):
    m = build_quad_2d(nx, ny, ((0.0, 2.0), (-1.0, 0.5)), perturb=perturb, seed=seed)
    assert m.cell_measures.sum() == pytest.approx(3.0, rel=1e-12)
    for c in range(m.num_cells):
        total = np.zeros(2)
        for local, (f, _) in enumerate(m.cell_facets[c]):
            n = m.outward_normal(c, local)
            assert np.linalg.norm(n) == pytest.approx(1.0)
            total += n * m.facet_measures[f]
        assert np.allclose(total, 0.0, atol=1e-13)


@given(st.integers(1, 5), st.integers(1, 5), st.integers(0, 100))
def test_interior_normals_are_opposite(nx, ny, seed):
    m = build_quad_2d(nx, ny, perturb=0.2, seed=seed)
    for f in m.interior_facets:
        a, b = m.facet_cells[f]
        na = [m.outward_normal(a, k) for k, (g, _) in enumerate(m.cell_facets[a]) if g == f][0]
        nb = [m.outward_normal(b, k) for k, (g, _) in enumerate(m.cell_facets[b]) if g == f][0]
        assert np.allclose(na, -nb)
        assert m.facet_sizes[f] == pytest.approx(min(m.cell_diameters[a], m.cell_diameters[b]))
    assert all(b == -1 or a in m.neighbors(b) for a, b in m.facet_cells)


def test_1d_normals_point_outward():
    m = build_cartesian_1d(3)
    for c in range(3):
        normals = [m.outward_normal(c, k)[0] for k in range(2)]
        assert sorted(normals) == [-1.0, 1.0]


def test_refinement_halves_sizes():
    for n in (3, 10):
        a, b = build_cartesian_1d(n), build_cartesian_1d(2 * n)
        assert b.h == pytest.approx(a.h / 2)
        qa, qb = build_quad_2d(n, n), build_quad_2d(2 * n, 2 * n)
        assert qb.h == pytest.approx(qa.h / 2)
        ta, tb = build_time_partition(n), build_time_partition(2 * n)
        assert tb.lengths.max() == pytest.approx(ta.lengths.max() / 2)


def test_time_partition():
    tp = build_time_partition(4, 1.0)
    assert np.allclose(tp.knots, [0, 0.25, 0.5, 0.75, 1.0])
    assert build_time_partition(1, 2.0).lengths.tolist() == [2.0]
    assert np.allclose(build_time_partition(7, 3.0).lengths, 3.0 / 7)
    assert tp.slab(2) == (0.25, 0.5)
    with pytest.raises(MeshError):
        TimePartition([0.0, 0.5, 0.5])
    with pytest.raises(MeshError):
        build_time_partition(0)


def test_space_time_sizes():
    stm = SpaceTimeMesh(build_cartesian_1d(4), build_time_partition(2))
    assert stm.num_elements == 8
    assert stm.element_diameter(0, 1) == pytest.approx(math.hypot(0.25, 0.5))
    assert stm.h == pytest.approx(math.hypot(0.25, 0.5))
    assert (stm.hx, stm.ht) == (pytest.approx(0.25), pytest.approx(0.5))


@pytest.mark.parametrize("mesh", [build_cartesian_1d(5, (-1, 2)), build_quad_2d(3, 2, perturb=0.2, seed=4)])
def test_dump_load_roundtrip(tmp_path, mesh):
    path = tmp_path / "mesh.txt"
    dump_mesh(mesh, path)
    assert path.read_text().startswith("stvem-mesh 1")
    back = load_mesh(path)
    assert np.array_equal(back.vertices, mesh.vertices)
    assert back.cells == mesh.cells
    assert np.allclose(back.facet_normals, mesh.facet_normals)
    assert np.array_equal(back.facet_cells, mesh.facet_cells)


def test_load_rejects_bad_header(tmp_path):
    path = tmp_path / "bad.txt"
    path.write_text("not-a-mesh\n")
    with pytest.raises(MeshError):
        load_mesh(path)

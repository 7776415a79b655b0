from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from atrialssm.mesh import (
    Label,
    MeshError,
    MeshFormatError,
    RigidTransform,
    SurfaceMesh,
    enclosed_volume,
    from_shape_vector,
    halfspace_volume,
    icosphere,
    is_closed_manifold,
    load_mesh,
    pv_groups,
    rotation_about_axis,
    save_mesh,
    stack_shape_vectors,
    surface_area,
    to_shape_vector,
    vertex_normals,
)

from conftest import random_sphere_mesh


def test_single_vertex_flattening():
    m = SurfaceMesh([[1.0, 2.0, 3.0]], np.zeros((0, 3), dtype=int))
    assert to_shape_vector(m).tolist() == [1.0, 2.0, 3.0]


def test_two_vertex_ordering():
    m = SurfaceMesh([[0, 0, 0], [1, 0, 0]], np.zeros((0, 3), dtype=int))
    assert to_shape_vector(m).tolist() == [0, 0, 0, 1, 0, 0]


def test_one_triangle_from_vector():
    m = from_shape_vector([0, 0, 0, 1, 0, 0, 0, 1, 0], [[0, 1, 2]])
    assert m.n_vertices == 3 and m.n_triangles == 1


def test_length_not_multiple_of_three():
    with pytest.raises(MeshError):
        from_shape_vector(np.zeros(8), [[0, 1, 2]])


def test_vector_too_short_for_topology():
    with pytest.raises(MeshError):
        from_shape_vector(np.zeros(6), [[0, 1, 2]])


def test_round_trip_random_mesh_bit_exact():
    m = random_sphere_mesh(100, seed=3)
    back = from_shape_vector(to_shape_vector(m), m.triangles)
    assert np.array_equal(back.vertices, m.vertices)
    assert np.array_equal(back.triangles, m.triangles)


@settings(max_examples=30, deadline=None)
@given(st.integers(min_value=4, max_value=300), st.integers(min_value=0, max_value=10_000))
def test_shape_vector_round_trip_property(n, seed):
    m = random_sphere_mesh(n, seed)
    v = to_shape_vector(m)
    assert v.shape == (3 * n,)
    assert np.array_equal(from_shape_vector(v, m.triangles).vertices, m.vertices)


def test_out_of_range_triangle_rejected():
    with pytest.raises(MeshError):
        SurfaceMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 3]])


def test_degenerate_triangle_rejected():
    with pytest.raises(MeshError):
        SurfaceMesh([[0, 0, 0], [1, 0, 0], [2, 0, 0]], [[0, 1, 2]])


def test_flat_square_normals():
    m = SurfaceMesh([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]], [[0, 1, 2], [0, 2, 3]])
    assert np.allclose(vertex_normals(m), [0, 0, 1], atol=1e-15)


def test_icosphere_normals_radial():
    m = icosphere(3, radius=10.0)
    n = vertex_normals(m)
    radial = m.vertices / np.linalg.norm(m.vertices, axis=1, keepdims=True)
    angles = np.degrees(np.arccos(np.clip(np.einsum("ij,ij->i", n, radial), -1, 1)))
    assert angles.max() < 2.0
    assert np.allclose(np.linalg.norm(n, axis=1), 1.0, atol=1e-9)


def test_isolated_vertex_normal_error():
    m = SurfaceMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0], [5, 5, 5]], [[0, 1, 2]])
    with pytest.raises(MeshError):
        vertex_normals(m)


@settings(max_examples=20, deadline=None)
@given(st.integers(min_value=20, max_value=400), st.integers(min_value=0, max_value=1000))
def test_convex_mesh_normals_point_outward(n, seed):
    m = random_sphere_mesh(n, seed, jitter=0.0)
    n_ = vertex_normals(m)
    assert np.all(np.einsum("ij,ij->i", n_, m.vertices - m.centroid()) > 0)


def test_save_load_round_trip(tmp_path):
    m = random_sphere_mesh(200, seed=1)
    labels = np.random.default_rng(0).integers(0, 6, m.n_vertices)
    m = SurfaceMesh(m.vertices, m.triangles, labels)
    p = tmp_path / "m.off"
    save_mesh(m, p)
    back = load_mesh(p)
    assert np.array_equal(back.vertices, m.vertices)
    assert np.array_equal(back.triangles, m.triangles)
    assert np.array_equal(back.labels, m.labels)


def test_load_reports_offending_face(tmp_path):
    p = tmp_path / "bad.off"
    p.write_text("OFF\n3 1 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1 7\n")
    with pytest.raises(MeshFormatError) as err:
        load_mesh(p)
    assert "face 0" in str(err.value)
    assert err.value.line == 6


def test_load_empty_file(tmp_path):
    p = tmp_path / "empty.off"
    p.write_text("")
    with pytest.raises(MeshFormatError):
        load_mesh(p)


def test_load_truncated(tmp_path):
    p = tmp_path / "t.off"
    p.write_text("OFF\n3 1 0\n0 0 0\n1 0 0\n")
    with pytest.raises(MeshFormatError):
        load_mesh(p)


def test_icosphere_volume_and_area():
    m = icosphere(4, radius=10.0)
    assert is_closed_manifold(m)
    assert enclosed_volume(m) == pytest.approx(4 / 3 * np.pi * 1000, rel=0.01)
    assert surface_area(m) == pytest.approx(4 * np.pi * 100, rel=0.01)


def test_halfspace_volume_of_sphere_is_half():
    m = icosphere(4, radius=10.0)
    assert halfspace_volume(m, (0, 0, 0), (1, 0, 0)) == pytest.approx(enclosed_volume(m) / 2, rel=1e-3)


def test_rigid_transform_invariants():
    R = rotation_about_axis((1, 2, 3), 0.7)
    t = RigidTransform(R, (1, 2, 3))
    assert np.allclose(R.T @ R, np.eye(3), atol=1e-12)
    assert np.linalg.det(R) == pytest.approx(1.0, abs=1e-12)
    p = np.random.default_rng(0).normal(size=(10, 3))
    assert np.allclose(t.inverse().apply(t.apply(p)), p, atol=1e-12)
    assert t.angle_deg() == pytest.approx(np.degrees(0.7))


def test_rigid_transform_rejects_reflection():
    with pytest.raises(ValueError):
        RigidTransform(np.diag([1.0, 1.0, -1.0]), (0, 0, 0))


def test_phantom_pv_groups(phantom):
    groups = pv_groups(phantom)
    assert len(groups) == 4
    assert phantom.label_mask(Label.LAA).any() and phantom.label_mask(Label.RAA).any()


def test_stack_shape_vectors_rejects_mismatch():
    a = random_sphere_mesh(20, 0)
    b = random_sphere_mesh(30, 0)
    with pytest.raises(MeshError):
        stack_shape_vectors([a, b])

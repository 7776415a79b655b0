from __future__ import annotations

import numpy as np
import pytest

from atrialssm.mesh import SurfaceMesh, icosphere, surface_area, vertex_normals
from atrialssm.volume import (
    FiberRule,
    FiberRules,
    Region,
    RegionRules,
    SelfIntersectionError,
    VolumeError,
    WallConfig,
    assign_fibers,
    assign_regions,
    boundary_faces,
    box_tetmesh,
    extrude_wall,
    load_fiber_rules,
    load_region_rules,
    load_tetmesh,
    offset_directions,
    parse_fiber_rules,
    parse_region_rules,
    save_tetmesh,
    self_intersections,
)

DATA = __import__("atrialssm").__path__[0] + "/data"


@pytest.fixture(scope="module")
def sphere():
    return icosphere(4, 20.0)


def test_unit_shell_volume(sphere):
    tm = extrude_wall(sphere, WallConfig(thickness=1.0))
    analytic = 4 * np.pi * (21.0**3 - 20.0**3) / 3
    assert abs(tm.volumes().sum() / analytic - 1) < 0.05


def test_volume_close_to_area_times_thickness(phantom):
    tm = extrude_wall(phantom, WallConfig(normal_smoothing=20))
    approx = surface_area(phantom) * 3.0
    assert abs(tm.volumes().sum() / approx - 1) < 0.15


def test_default_thickness_honored(sphere):
    cfg = WallConfig()
    assert cfg.thickness == 3.0
    tm = extrude_wall(sphere, cfg)
    m = sphere.n_vertices
    d = np.linalg.norm(tm.vertices[tm.layers * m:] - tm.vertices[:m], axis=1)
    assert np.abs(d - 3.0).max() < 1e-9


def test_smoothing_keeps_thickness(phantom):
    tm = extrude_wall(phantom, WallConfig(normal_smoothing=20))
    m = phantom.n_vertices
    d = np.linalg.norm(tm.vertices[tm.layers * m:] - tm.vertices[:m], axis=1)
    assert np.abs(d - 3.0).max() < 1e-9


def test_offset_directions_unit_and_outward(phantom):
    for k in (0, 5, 20):
        n = offset_directions(phantom, k)
        assert np.allclose(np.linalg.norm(n, axis=1), 1.0)
        assert np.all(np.einsum("ij,ij->i", n, vertex_normals(phantom)) > 0)
    assert np.array_equal(offset_directions(phantom, 0), vertex_normals(phantom))


def test_no_inverted_tets_and_layers(sphere):
    tm = extrude_wall(sphere)
    assert tm.layers == 3
    assert tm.volumes().min() > 1e-9
    assert tm.n_tets == 3 * 3 * sphere.n_triangles


def test_watertight(sphere):
    tm = extrude_wall(sphere)
    assert len(boundary_faces(tm.tets)) == 2 * sphere.n_triangles


def test_open_sheet_rejected():
    v = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0]], dtype=float)
    sheet = SurfaceMesh(v, np.array([[0, 1, 2], [1, 3, 2]]))
    with pytest.raises(VolumeError, match="closed"):
        extrude_wall(sheet)


def test_self_intersection_reported():
    # a sphere with a deep inward dent; the 3 mm offset folds over itself
    s = icosphere(3, 10.0)
    v = s.vertices.copy()
    top = v[:, 2] > 9.0
    v[top, 2] -= 17.0
    dented = s.with_vertices(v)
    with pytest.raises(SelfIntersectionError) as err:
        extrude_wall(dented, WallConfig(thickness=3.0))
    assert len(err.value.pairs) > 0
    assert "triangle pairs" in str(err.value)


def test_self_intersection_clean_sphere(sphere):
    assert len(self_intersections(sphere.vertices, sphere.triangles)) == 0


def test_halfspace_two_sides(sphere):
    tm = extrude_wall(sphere)
    rules = parse_region_rules("default = RA\nrule = LA halfspace point=0,0,0 normal=1,0,0\n")
    out = assign_regions(tm, rules)
    c = tm.centroids()
    assert np.array_equal(out.region == Region.LA, c[:, 0] > 0)
    assert np.array_equal(out.region == Region.RA, c[:, 0] <= 0)


def test_default_rules_single_tag(sphere):
    out = assign_regions(extrude_wall(sphere), RegionRules())
    assert np.all(out.region == Region.RA)


def test_untagged_rejected(sphere):
    rules = parse_region_rules("default = none\nrule = LA halfspace point=0,0,0 normal=1,0,0\n")
    with pytest.raises(VolumeError, match="no rule"):
        assign_regions(extrude_wall(sphere), rules)


def test_ring_band_matches_brute_force(sphere):
    tm = extrude_wall(sphere)
    rules = parse_region_rules(
        "default = RA\nrule = ValveRing ring center=0,0,10 normal=0,0,1 radius=17 width=4\n"
    )
    out = assign_regions(tm, rules)
    center, normal = np.array([0.0, 0.0, 10.0]), np.array([0.0, 0.0, 1.0])
    expected = 0
    for c in tm.centroids():
        r = c - center
        h = float(r @ normal)
        rho = float(np.linalg.norm(r - h * normal))
        if np.sqrt((rho - 17.0) ** 2 + h * h) <= 2.0:
            expected += 1
    assert expected > 0
    assert int((out.region == Region.ValveRing).sum()) == expected


def test_region_partition_with_phantom_rules(phantom):
    tm = assign_regions(extrude_wall(phantom, WallConfig(normal_smoothing=20)), load_region_rules(f"{DATA}/regions_phantom.txt"))
    counts = np.bincount(tm.region, minlength=7)
    assert counts.sum() == tm.n_tets
    assert np.all(counts > 0)


def test_rule_parse_errors():
    with pytest.raises(ValueError, match="<rules>:1"):
        parse_region_rules("rule = Nowhere sphere center=0,0,0 radius=1")
    with pytest.raises(ValueError, match="missing"):
        parse_region_rules("rule = LA sphere center=0,0,0")
    with pytest.raises(ValueError, match="unknown rule kind"):
        parse_region_rules("rule = LA cone center=0,0,0")


def test_uniform_fibers(sphere):
    tm = assign_regions(extrude_wall(sphere), RegionRules())
    out = assign_fibers(tm, FiberRules(FiberRule("uniform", direction=(1.0, 0.0, 0.0))))
    assert np.array_equal(out.fiber, np.tile([1.0, 0.0, 0.0], (tm.n_tets, 1)))


def test_circumferential_fibers_on_cylinder():
    tm = box_tetmesh((20, 20, 40), (8, 8, 16), origin=(-10, -10, -20))
    out = assign_fibers(tm, parse_fiber_rules("default = circumferential axis=0,0,1 center=0,0,0"))
    c = tm.centroids()
    radial = c[:, :2] / np.linalg.norm(c[:, :2], axis=1)[:, None]
    assert np.abs(np.einsum("ij,ij->i", out.fiber[:, :2], radial)).max() < 1e-6
    assert np.abs(out.fiber[:, 2]).max() < 1e-12


def test_circumferential_default_axis_is_principal():
    # cylinder-like shell elongated along z: default axis is the long axis
    s = icosphere(3, 10.0)
    s = s.with_vertices(s.vertices * [1.0, 1.0, 3.0])
    tm = assign_regions(extrude_wall(s, WallConfig(thickness=1.0)), RegionRules())
    out = assign_fibers(tm, FiberRules())
    c = tm.centroids() - tm.centroids().mean(axis=0)
    assert np.abs(out.fiber[:, 2]).max() < 0.05
    rho = c[:, :2] / np.linalg.norm(c[:, :2], axis=1)[:, None]
    assert np.abs(np.einsum("ij,ij->i", out.fiber[:, :2], rho)).max() < 0.05


def test_fiber_unit_norm_on_phantom(phantom):
    tm = extrude_wall(phantom, WallConfig(normal_smoothing=20))
    tm = assign_regions(tm, load_region_rules(f"{DATA}/regions_phantom.txt"))
    out = assign_fibers(tm, load_fiber_rules(f"{DATA}/fibers_phantom.txt"))
    assert np.abs(np.linalg.norm(out.fiber, axis=1) - 1.0).max() < 1e-9
    out.validate()


def test_fiber_on_axis_fallback():
    tm = box_tetmesh((2, 2, 2), (1, 1, 1), origin=(-1, -1, -1))
    c = tm.centroids()
    rules = parse_fiber_rules(f"default = circumferential axis=0,0,1 center={float(c[0, 0])!r},{float(c[0, 1])!r},0")
    out = assign_fibers(tm, rules)
    assert np.allclose(np.linalg.norm(out.fiber, axis=1), 1.0)


def test_tet_io_round_trip(tmp_path, sphere):
    tm = assign_fibers(assign_regions(extrude_wall(icosphere(1, 10.0)), RegionRules()), FiberRules())
    lat = np.arange(tm.n_vertices, dtype=float) * 0.1
    p = tmp_path / "a.tet"
    save_tetmesh(tm, p, lat)
    back, lat2 = load_tetmesh(p)
    assert np.array_equal(back.vertices, tm.vertices)
    assert np.array_equal(back.tets, tm.tets)
    assert np.array_equal(back.region, tm.region)
    assert np.array_equal(back.fiber, tm.fiber)
    assert np.array_equal(lat2, lat)
    text = p.read_text()
    assert "#REGION" in text and "#FIBER" in text and "\n4 " in text


def test_tet_io_truncated(tmp_path):
    tm = box_tetmesh((1, 1, 1), (1, 1, 1))
    p = tmp_path / "b.tet"
    save_tetmesh(tm, p)
    p.write_text("\n".join(p.read_text().splitlines()[:-3]))
    with pytest.raises(VolumeError, match="truncated"):
        load_tetmesh(p)


def test_wall_config_validation():
    with pytest.raises(ValueError):
        WallConfig(thickness=0.0)
    with pytest.raises(ValueError):
        WallConfig(normal_smoothing=-1)

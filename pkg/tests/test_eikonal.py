from __future__ import annotations

import numpy as np
import pytest

from atrialssm.eikonal import (
    DEFAULT_CONDUCTION,
    ActivationMap,
    Conduction,
    ConductionTable,
    EikonalError,
    dijkstra_oracle,
    fast_march,
    read_lat_csv,
    sinus_seed,
    velocity_tensor,
)
from atrialssm.mesh import rotation_about_axis
from atrialssm.phantom import atrial_phantom
from atrialssm.volume import (
    Region,
    TetMesh,
    WallConfig,
    assign_fibers,
    assign_regions,
    box_tetmesh,
    extrude_wall,
    load_fiber_rules,
    load_region_rules,
    load_tetmesh,
    save_tetmesh,
)

DATA = __import__("atrialssm").__path__[0] + "/data"


def phantom_tetmesh(n_vertices: int) -> TetMesh:
    tm = extrude_wall(atrial_phantom(n_vertices), WallConfig(normal_smoothing=20))
    tm = assign_regions(tm, load_region_rules(f"{DATA}/regions_phantom.txt"))
    return assign_fibers(tm, load_fiber_rules(f"{DATA}/fibers_phantom.txt"))


@pytest.fixture(scope="module")
def ptm():
    return phantom_tetmesh(800)


def test_default_conduction_values():
    assert DEFAULT_CONDUCTION[Region.RA] == Conduction(739.0, 2.11)
    assert DEFAULT_CONDUCTION[Region.InferiorIsthmus] == Conduction(722.0, 1.0)
    expected = {
        Region.LA: (946.0, 2.11), Region.InterAtrial: (1093.0, 3.36), Region.ValveRing: (445.0, 2.11),
        Region.PectinateMuscle: (578.0, 3.78), Region.CristaTerminalis: (607.0, 3.0),
    }
    for r, (cv, ar) in expected.items():
        assert (DEFAULT_CONDUCTION[r].cv_t, DEFAULT_CONDUCTION[r].ar) == (cv, ar)


def test_ra_longitudinal_speed():
    f = np.array([0.0, 0.6, 0.8])
    m = velocity_tensor(Region.RA, f)
    assert np.sqrt(f @ m @ f) == pytest.approx(1559.29, abs=1e-9)
    w = np.linalg.eigvalsh(m)
    assert np.allclose(w, [739.0**2, 739.0**2, 1559.29**2])


def test_isthmus_isotropic():
    m = velocity_tensor(Region.InferiorIsthmus, [1.0, 0.0, 0.0])
    assert np.allclose(m, 722.0**2 * np.eye(3))


def test_axis_aligned_tensor():
    t = ConductionTable({Region.RA: Conduction(1.0, 2.0)})
    assert np.array_equal(velocity_tensor(Region.RA, [1.0, 0.0, 0.0], t), np.diag([4.0, 1.0, 1.0]))


def test_conduction_validation():
    with pytest.raises(EikonalError):
        Conduction(0.0, 2.0)
    with pytest.raises(EikonalError):
        Conduction(500.0, 0.5)


def _face(mesh: TetMesh, axis: int, value: float) -> np.ndarray:
    return np.flatnonzero(np.isclose(mesh.vertices[:, axis], value))


def test_isotropic_slab():
    slab = box_tetmesh((100, 20, 3), (100, 20, 3))
    act = fast_march(slab, ConductionTable.uniform(1000.0), _face(slab, 0, 0.0))
    far = act.lat[_face(slab, 0, 100.0)]
    assert np.all(np.abs(far / 100.0 - 1) < 0.03)


def test_anisotropic_slab_ratio():
    slab = box_tetmesh((40, 40, 3), (40, 40, 3))
    table = ConductionTable.uniform(500.0, 2.0)
    tx = fast_march(slab, table, _face(slab, 0, 0.0)).lat[_face(slab, 0, 40.0)].mean()
    ty = fast_march(slab, table, _face(slab, 1, 0.0)).lat[_face(slab, 1, 40.0)].mean()
    assert abs(ty / tx / 2.0 - 1) < 0.05
    assert tx == pytest.approx(40.0, rel=0.03)


def test_oracle_bound(ptm):
    seeds = sinus_seed(ptm, ptm.vertices[10], 2.0)
    act = fast_march(ptm, ConductionTable(), seeds)
    oracle = dijkstra_oracle(ptm, ConductionTable(), seeds)
    assert np.all(act.lat <= oracle * 1.02 + 1e-12)


def test_seed_values_and_finiteness(ptm):
    seeds = np.array([0, 5, 17])
    act = fast_march(ptm, ConductionTable(), seeds)
    assert np.all(act.lat[seeds] == 0.0)
    assert np.all(np.isfinite(act.lat)) and act.lat.min() >= 0


def test_causality(ptm):
    rng = np.random.default_rng(0)
    seeds = rng.choice(ptm.n_vertices, 4, replace=False)
    full = fast_march(ptm, ConductionTable(), seeds).lat
    fewer = fast_march(ptm, ConductionTable(), seeds[:2]).lat
    assert np.all(fewer >= full - 1e-12)


def test_velocity_scaling(ptm):
    seeds = [3]
    a = fast_march(ptm, ConductionTable(), seeds).lat
    b = fast_march(ptm, ConductionTable().scaled(2.5), seeds, init_radius=10.0).lat
    assert np.allclose(b * 2.5, a, rtol=1e-9, atol=0)


def test_rigid_invariance(ptm):
    rot = rotation_about_axis([1.0, 2.0, 0.5], 0.7)
    moved = TetMesh(ptm.vertices @ rot.T + [5.0, -3.0, 12.0], ptm.tets, ptm.region, ptm.fiber @ rot.T)
    a = fast_march(ptm, ConductionTable(), [42]).lat
    b = fast_march(moved, ConductionTable(), [42]).lat
    assert np.allclose(a, b, rtol=1e-9, atol=1e-12)


def test_without_source_ball_still_bounded_by_slab_analytic():
    slab = box_tetmesh((30, 6, 3), (30, 6, 3))
    act = fast_march(slab, ConductionTable.uniform(1000.0), _face(slab, 0, 0.0), init_radius=0.0)
    assert np.all(np.abs(act.lat[_face(slab, 0, 30.0)] / 30.0 - 1) < 0.03)


def test_disconnected_vertices_are_inf(caplog):
    a = box_tetmesh((2, 2, 2), (2, 2, 2))
    b = box_tetmesh((2, 2, 2), (2, 2, 2), origin=(10, 0, 0))
    both = TetMesh(np.vstack([a.vertices, b.vertices]), np.vstack([a.tets, b.tets + a.n_vertices]),
                   np.zeros(a.n_tets * 2, dtype=np.int8), np.vstack([a.fiber, b.fiber]))
    act = fast_march(both, ConductionTable(), [0])
    assert np.all(np.isinf(act.lat[a.n_vertices:]))
    assert np.all(np.isfinite(act.lat[:a.n_vertices]))
    assert "not connected" in caplog.text


def test_fast_march_errors(ptm):
    with pytest.raises(EikonalError):
        fast_march(ptm, ConductionTable(), [])
    with pytest.raises(EikonalError):
        fast_march(ptm, ConductionTable(), [ptm.n_vertices])


def test_sinus_seed_single_vertex(ptm):
    assert sinus_seed(ptm, ptm.vertices[77], 0.5).tolist() == [77]


def test_sinus_seed_outside(ptm):
    with pytest.raises(EikonalError):
        sinus_seed(ptm, ptm.vertices.max(axis=0) + 50.0, 1.0)


def test_sinus_seed_brute_force(ptm):
    p = ptm.vertices[123] + [0.3, -0.2, 0.1]
    got = sinus_seed(ptm, p, 4.0)
    brute = [i for i, v in enumerate(ptm.vertices) if np.sqrt(((v - p) ** 2).sum()) <= 4.0]
    assert got.tolist() == brute


def test_csv_and_tet_embedding(tmp_path, ptm):
    act = fast_march(ptm, ConductionTable(), [0])
    p = tmp_path / "lat.csv"
    act.write_csv(p)
    assert np.array_equal(read_lat_csv(p), act.lat)
    assert p.read_text().splitlines()[0] == "vertex,lat_ms"
    tp = tmp_path / "m.tet"
    save_tetmesh(ptm, tp, act.lat)
    _, lat = load_tetmesh(tp)
    assert np.array_equal(lat, act.lat)
    assert isinstance(act, ActivationMap)

from __future__ import annotations

import numpy as np
import pytest
from scipy.linalg import subspace_angles

from atrialssm.pdm import (
    PdmError,
    PdmModel,
    build_pdm,
    cumulative_variance,
    empirical_bounds,
    load_pdm,
    modes_for_variance,
    project,
    reconstruct,
    sample,
    save_pdm,
)
from planted import planted_corpus


def test_two_shapes_one_mode():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(2, 30))
    m = build_pdm([a, b])
    assert m.n_modes == 1
    assert np.allclose(m.mean, (a + b) / 2)
    # each shape sits at a displacement of +-|a-b|/2 along v; with divisor N-1 = 1
    # that is r = +-1/sqrt(2), which equals +-1 under divisor N
    assert m.eigenvalues[0] == pytest.approx(np.sum((a - b) ** 2) / 2)
    r = sorted(project(m, s)[0] for s in (a, b))
    assert r == pytest.approx([-1 / np.sqrt(2), 1 / np.sqrt(2)], abs=1e-12)
    assert np.allclose(np.array(r) * np.sqrt(m.eigenvalues[0]), [-np.linalg.norm(a - b) / 2, np.linalg.norm(a - b) / 2])


@pytest.fixture(scope="module")
def planted():
    x, modes, _ = planted_corpus()
    return x, modes, build_pdm(x)


def test_planted_eigenvalues(planted):
    _, _, m = planted
    per_vertex = m.eigenvalues[:3] / m.n_vertices
    assert np.all(np.abs(per_vertex / np.array([9.0, 4.0, 1.0]) - 1) < 0.10)


def test_planted_subspace_angle(planted):
    _, modes, m = planted
    angles = np.degrees(subspace_angles(m.eigenvectors[:3].T, modes.T))
    assert angles.max() < 5.0


def test_model_invariants(planted):
    x, _, m = planted
    assert m.n_modes <= x.shape[0] - 1
    assert np.abs(m.eigenvectors @ m.eigenvectors.T - np.eye(m.n_modes)).max() < 1e-8
    assert np.all(m.eigenvalues >= 0)
    assert np.all(np.diff(m.eigenvalues) <= 0)
    big = np.abs(m.eigenvectors).argmax(axis=1)
    assert np.all(m.eigenvectors[np.arange(m.n_modes), big] > 0)


def test_training_shapes_reconstructed(planted):
    x, _, m = planted
    for s in x:
        err = np.linalg.norm((reconstruct(m, project(m, s)) - s).reshape(-1, 3), axis=1)
        assert err.max() < 1e-6


def test_rank_bound_on_duplicated_corpus():
    rng = np.random.default_rng(3)
    base = rng.normal(size=(4, 60))
    x = np.vstack([base, base[:2]])  # 6 shapes spanning at most 3 centred directions
    m = build_pdm(x)
    assert m.n_modes == 3
    xc = x - x.mean(axis=0)
    lam = np.linalg.eigvalsh(xc @ xc.T / 5)[::-1]
    assert np.all(np.abs(lam[3:]) < 1e-9 * lam[0])


def test_mean_projects_to_zero(planted):
    _, _, m = planted
    assert np.abs(project(m, m.mean)).max() < 1e-12


def test_round_trip_coefficients(planted):
    _, _, m = planted
    r = np.random.default_rng(1).normal(size=m.n_modes)
    assert np.abs(project(m, reconstruct(m, r)) - r).max() < 1e-8


def test_truncated_round_trip(planted):
    _, _, m = planted
    r = np.random.default_rng(2).normal(size=m.n_modes)
    k = 5
    back = project(m, reconstruct(m, r, k))
    assert np.abs(back[:k] - r[:k]).max() < 1e-8
    assert np.abs(back[k:]).max() < 1e-8


def test_reconstruct_zero_is_mean(planted):
    _, _, m = planted
    assert np.array_equal(reconstruct(m, np.zeros(m.n_modes)), m.mean)


def test_single_mode_arithmetic():
    v = np.zeros(6)
    v[2] = 1.0
    m = PdmModel(np.zeros(6), np.array([4.0]), v[None, :], np.zeros((0, 3), dtype=int))
    assert np.allclose(reconstruct(m, [2.0]), 4.0 * v)


def test_reconstruct_errors(planted):
    _, _, m = planted
    with pytest.raises(PdmError):
        reconstruct(m, np.zeros(3), k_modes=5)
    with pytest.raises(PdmError):
        reconstruct(m, np.zeros(m.n_modes), k_modes=m.n_modes + 1)
    with pytest.raises(PdmError):
        reconstruct(m, np.full(m.n_modes, np.nan))


def test_build_errors():
    with pytest.raises(PdmError):
        build_pdm([np.zeros(6)])
    with pytest.raises(PdmError):
        build_pdm([np.zeros(6), np.zeros(9)])
    m = build_pdm([np.zeros(6), np.ones(6)])
    with pytest.raises(PdmError):
        project(m, np.zeros(9))


def test_vertex_mask_cuts_before_pca():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(5, 4 * 3))
    tris = np.array([[0, 1, 2], [1, 2, 3]])
    mask = np.array([True, True, True, False])
    m = build_pdm(x, tris, labels=np.array([1, 2, 3, 4]), vertex_mask=mask)
    assert m.n_vertices == 3
    assert m.triangles.tolist() == [[0, 1, 2]]
    assert m.labels.tolist() == [1, 2, 3]
    assert np.allclose(m.mean, x.reshape(5, 4, 3)[:, :3].reshape(5, -1).mean(axis=0))


def test_sample_zero_bounds_gives_mean(planted):
    _, _, m = planted
    r, s = sample(m, 7, bounds=(0.0, 0.0))
    assert np.all(r == 0)
    assert np.array_equal(s, m.mean)


def test_sample_statistics(planted):
    _, _, m = planted
    r = np.stack([sample(m, np.random.SeedSequence([11, i]))[0] for i in range(1000)])
    assert np.all(np.abs(r) <= 3.0)
    assert np.abs(r.mean(axis=0)).max() < 0.15


def test_sample_reproducible(planted):
    _, _, m = planted
    a = sample(m, 123)
    b = sample(m, 123)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


def test_empirical_bounds(planted):
    x, _, m = planted
    b = empirical_bounds(m, x)
    r = np.stack([project(m, s) for s in x])
    assert np.allclose(b[:, 0], r.min(axis=0)) and np.allclose(b[:, 1], r.max(axis=0))
    for i in range(50):
        coeff, _ = sample(m, i, bounds=b)
        assert np.all(coeff >= b[:, 0]) and np.all(coeff <= b[:, 1])


def test_sample_rejects_bad_bounds(planted):
    _, _, m = planted
    with pytest.raises(PdmError):
        sample(m, 0, bounds=(1.0, -1.0))
    with pytest.raises(PdmError):
        sample(m, 0, bounds=(-np.inf, 1.0))


def _toy(eigs):
    k = len(eigs)
    return PdmModel(np.zeros(3 * k), np.asarray(eigs, float), np.eye(3 * k)[:k], np.zeros((0, 3), dtype=int))


def test_modes_for_variance():
    m = _toy([3.0, 1.0])
    assert modes_for_variance(m, 0.75) == 1
    assert modes_for_variance(m, 0.76) == 2
    assert modes_for_variance(m, 1.0) == 2
    with pytest.raises(PdmError):
        modes_for_variance(m, 0.0)


def test_cumulative_variance_monotone(planted):
    c = cumulative_variance(planted[2])
    assert np.all(np.diff(c) >= 0) and c[-1] == pytest.approx(1.0)


def test_save_load_round_trip(tmp_path, planted):
    _, _, m = planted
    p = tmp_path / "m.ssmc"
    save_pdm(m, p)
    back = load_pdm(p)
    for f in ("mean", "eigenvalues", "eigenvectors", "triangles"):
        assert np.array_equal(getattr(back, f), getattr(m, f))
    assert back.divisor == 39.0 and back.n_samples == 40

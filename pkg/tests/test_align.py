from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from atrialssm.align import (
    DegenerateConfigurationError,
    IcpConfig,
    icp_align,
    nearest_correspondences,
    procrustes_rigid,
)
from atrialssm.mesh import RigidTransform, rotation_about_axis
from atrialssm.phantom import random_rigid


def rotation_error_deg(ra, rb) -> float:
    c = (np.trace(ra.T @ rb) - 1.0) / 2.0
    return float(np.degrees(np.arccos(np.clip(c, -1.0, 1.0))))


def test_procrustes_identity():
    p = np.random.default_rng(0).normal(size=(50, 3))
    t = procrustes_rigid(p, p)
    assert np.allclose(t.rotation, np.eye(3), atol=1e-12)
    assert np.allclose(t.translation, 0.0, atol=1e-12)


def test_procrustes_known_transform():
    p = np.random.default_rng(1).normal(size=(40, 3)) * 10
    truth = RigidTransform(rotation_about_axis((0, 0, 1), np.radians(30)), (5, 0, 0))
    t = procrustes_rigid(p, truth.apply(p))
    assert np.allclose(t.rotation, truth.rotation, atol=1e-8)
    assert np.allclose(t.translation, truth.translation, atol=1e-8)


def test_procrustes_rejects_reflection():
    p = np.random.default_rng(2).normal(size=(30, 3))
    q = p * np.array([-1.0, 1.0, 1.0])
    t = procrustes_rigid(p, q)
    assert np.linalg.det(t.rotation) == pytest.approx(1.0, abs=1e-9)
    assert np.abs(t.apply(p) - q).max() > 1e-3


def test_procrustes_degenerate():
    with pytest.raises(DegenerateConfigurationError):
        procrustes_rigid(np.zeros((5, 3)), np.zeros((5, 3)))


@settings(max_examples=40, deadline=None)
@given(st.integers(min_value=3, max_value=80), st.integers(min_value=0, max_value=10**6))
def test_procrustes_rotation_is_proper(n, seed):
    rng = np.random.default_rng(seed)
    t = procrustes_rigid(rng.normal(size=(n, 3)), rng.normal(size=(n, 3)))
    r = t.rotation
    assert np.abs(r.T @ r - np.eye(3)).max() < 1e-9
    assert abs(np.linalg.det(r) - 1.0) < 1e-9


def test_nearest_identity_pairing():
    p = np.random.default_rng(3).normal(size=(100, 3))
    assert np.array_equal(nearest_correspondences(p, p), np.arange(100))


def test_nearest_tie_lowest_index():
    ref = np.array([[1.0, 0, 0], [-1.0, 0, 0], [0, 5, 0]])
    assert nearest_correspondences(np.zeros((1, 3)), ref)[0] == 0
    ref2 = ref[[2, 1, 0]]
    assert nearest_correspondences(np.zeros((1, 3)), ref2)[0] == 1


def test_nearest_matches_brute_force():
    rng = np.random.default_rng(4)
    ref = rng.normal(size=(500, 3))
    q = rng.normal(size=(500, 3))
    d = ((q[:, None, :] - ref[None, :, :]) ** 2).sum(axis=2)
    assert np.array_equal(nearest_correspondences(q, ref), d.argmin(axis=1))


def test_icp_already_aligned(phantom):
    out, rep = icp_align(phantom, phantom)
    assert rep.iterations_run == 1
    assert rep.final_transform.angle_deg() < 1e-9
    assert np.abs(out.vertices - phantom.vertices).max() < 1e-9


@pytest.mark.parametrize("seed", [0, 1, 2, 3, 4])
def test_icp_recovers_known_transform(phantom, seed):
    truth = random_rigid(np.random.default_rng(seed), 30.0, 20.0)
    moving = phantom.transformed(truth)
    out, rep = icp_align(moving, phantom)
    recovered = rep.final_transform.compose(truth)  # identity when exact
    assert rotation_error_deg(recovered.rotation, np.eye(3)) < 0.5
    assert np.linalg.norm(recovered.translation) < 0.1
    assert rep.iterations_run <= 150


def test_icp_runs_exactly_max_iterations_with_zero_tol(small_phantom):
    truth = random_rigid(np.random.default_rng(7), 10.0, 5.0)
    _, rep = icp_align(small_phantom.transformed(truth), small_phantom, IcpConfig(150, 0.0))
    assert rep.iterations_run == 150
    assert len(rep.residual_history) == 150


def test_icp_residual_non_increasing(small_phantom):
    truth = random_rigid(np.random.default_rng(8), 30.0, 20.0)
    noisy = small_phantom.with_vertices(
        small_phantom.vertices + np.random.default_rng(9).normal(scale=0.5, size=small_phantom.vertices.shape)
    )
    _, rep = icp_align(noisy.transformed(truth), small_phantom, IcpConfig(100, 0.0))
    h = np.array([rep.initial_residual] + rep.residual_history)
    assert np.all(np.diff(h) <= 1e-9)


def test_icp_invariant_to_global_pre_transform(small_phantom):
    rng = np.random.default_rng(10)
    moving = small_phantom.transformed(random_rigid(rng, 25.0, 10.0))
    g = random_rigid(rng, 90.0, 50.0)
    _, a = icp_align(moving, small_phantom, IcpConfig(60, 0.0))
    _, b = icp_align(moving.transformed(g), small_phantom.transformed(g), IcpConfig(60, 0.0))
    assert np.allclose(a.residual_history, b.residual_history, atol=1e-6)


def test_icp_config_validation():
    with pytest.raises(ValueError):
        IcpConfig(max_iterations=0)
    with pytest.raises(ValueError):
        IcpConfig(trim_fraction=1.0)

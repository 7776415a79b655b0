from __future__ import annotations

import numpy as np
import pytest

from atrialssm.mesh import SurfaceMesh, fibonacci_directions, sphere_triangulation
from atrialssm.phantom import atrial_phantom


def random_sphere_mesh(n: int, seed: int, jitter: float = 0.05, radius: float = 10.0) -> SurfaceMesh:
    """Closed mesh on perturbed sphere directions (coordinates are not round numbers)."""
    rng = np.random.default_rng(seed)
    u = fibonacci_directions(n)
    tris = sphere_triangulation(u)
    r = radius * (1.0 + jitter * rng.standard_normal(n))
    return SurfaceMesh(u * r[:, None], tris)


@pytest.fixture(scope="session")
def phantom() -> SurfaceMesh:
    return atrial_phantom(2000)


@pytest.fixture(scope="session")
def small_phantom() -> SurfaceMesh:
    return atrial_phantom(600)

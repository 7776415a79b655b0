"""Rigid ICP alignment with an orthogonal-Procrustes inner step."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Union

import numpy as np
from numba import njit
from numpy.typing import ArrayLike, NDArray
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation

from .mesh import RigidTransform, SurfaceMesh, as_points

_LOGGER = logging.getLogger(__name__)


class DegenerateConfigurationError(ValueError):
    """Point configuration does not determine a unique rigid transform."""


@dataclass(frozen=True)
class IcpConfig:
    max_iterations: int = 150
    convergence_tol: float = 1e-4  # mm, absolute change of the residual
    trim_fraction: float = 0.0
    match_centroids: bool = True
    # "surface": pair each vertex with the closest point on the reference
    # triangles. "vertex": closest reference vertex, which locks into a false
    # minimum once the residual rotation moves points by less than the
    # vertex spacing.
    match: str = "surface"
    # Extrapolate along the pose trajectory when consecutive updates point
    # the same way; a longer step is kept only if it lowers the residual.
    accelerate: bool = True

    def __post_init__(self) -> None:
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.convergence_tol < 0:
            raise ValueError("convergence_tol must be >= 0")
        if not 0.0 <= self.trim_fraction < 1.0:
            raise ValueError("trim_fraction must be in [0, 1)")
        if self.match not in ("surface", "vertex"):
            raise ValueError("match must be 'surface' or 'vertex'")


@dataclass
class IcpReport:
    iterations_run: int
    residual_history: list[float] = field(default_factory=list)
    final_transform: RigidTransform = field(default_factory=RigidTransform.identity)
    initial_residual: float = float("nan")


def procrustes_rigid(source_pts: ArrayLike, target_pts: ArrayLike) -> RigidTransform:
    """Least-squares rotation + translation mapping source onto target (Kabsch).

    Reflections are rejected: the returned rotation always has det = +1.
    """
    p = np.asarray(source_pts, dtype=np.float64).reshape(-1, 3)
    q = np.asarray(target_pts, dtype=np.float64).reshape(-1, 3)
    if p.shape != q.shape:
        raise ValueError(f"point counts differ: {p.shape[0]} vs {q.shape[0]}")
    if p.shape[0] < 3:
        raise DegenerateConfigurationError("need at least 3 point pairs")
    pc, qc = p.mean(axis=0), q.mean(axis=0)
    p0, q0 = p - pc, q - qc
    sv = np.linalg.svd(p0, compute_uv=False)
    if sv[0] == 0.0 or sv[1] <= 1e-10 * sv[0]:
        raise DegenerateConfigurationError("source points are coincident or collinear")
    h = p0.T @ q0
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    if d == 0:
        d = 1.0
    r = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    # re-orthonormalize against round-off so the type invariant holds at 1e-9
    uu, _, vv = np.linalg.svd(r)
    r = uu @ vv
    return RigidTransform(r, qc - r @ pc)


class NearestNeighbors:
    """Exact nearest-reference-vertex lookup; ties resolve to the lowest index."""

    def __init__(self, reference: Union[SurfaceMesh, ArrayLike]):
        self.points = np.ascontiguousarray(as_points(reference))
        if self.points.shape[0] == 0:
            raise ValueError("empty reference")
        self.tree = cKDTree(self.points)

    def query(self, query_pts: ArrayLike) -> tuple[NDArray, NDArray]:
        q = np.asarray(query_pts, dtype=np.float64).reshape(-1, 3)
        if q.shape[0] == 0:
            raise ValueError("empty query")
        k = min(2, self.points.shape[0])
        dist, idx = self.tree.query(q, k=k)
        if k == 1:
            return dist, idx
        d0, i0 = dist[:, 0].copy(), idx[:, 0].copy()
        # the tree's tie order is unspecified; rescan near-ties exactly
        near_tie = dist[:, 1] <= d0 * (1 + 1e-12) + 1e-12
        for row in np.flatnonzero(near_tie):
            cand = self.tree.query_ball_point(q[row], d0[row] * (1 + 1e-9) + 1e-9)
            cand = np.asarray(sorted(cand))
            dd = np.sqrt(((self.points[cand] - q[row]) ** 2).sum(axis=1))
            best = cand[np.flatnonzero(dd == dd.min())[0]]
            i0[row] = best
            d0[row] = dd.min()
        return d0, i0


def nearest_correspondences(moving: Union[SurfaceMesh, ArrayLike], reference: Union[SurfaceMesh, ArrayLike]) -> NDArray[np.int64]:
    """For each moving vertex, the index of the closest reference vertex."""
    _, idx = NearestNeighbors(reference).query(as_points(moving))
    return np.asarray(idx, dtype=np.int64)


@njit(cache=True)
def _closest_on_triangle(px, py, pz, ax, ay, az, bx, by, bz, cx, cy, cz):
    """Closest point to p on triangle abc (Voronoi-region method)."""
    abx, aby, abz = bx - ax, by - ay, bz - az
    acx, acy, acz = cx - ax, cy - ay, cz - az
    apx, apy, apz = px - ax, py - ay, pz - az
    d1 = abx * apx + aby * apy + abz * apz
    d2 = acx * apx + acy * apy + acz * apz
    if d1 <= 0.0 and d2 <= 0.0:
        return ax, ay, az
    bpx, bpy, bpz = px - bx, py - by, pz - bz
    d3 = abx * bpx + aby * bpy + abz * bpz
    d4 = acx * bpx + acy * bpy + acz * bpz
    if d3 >= 0.0 and d4 <= d3:
        return bx, by, bz
    vc = d1 * d4 - d3 * d2
    if vc <= 0.0 and d1 >= 0.0 and d3 <= 0.0:
        t = d1 / (d1 - d3)
        return ax + t * abx, ay + t * aby, az + t * abz
    cpx, cpy, cpz = px - cx, py - cy, pz - cz
    d5 = abx * cpx + aby * cpy + abz * cpz
    d6 = acx * cpx + acy * cpy + acz * cpz
    if d6 >= 0.0 and d5 <= d6:
        return cx, cy, cz
    vb = d5 * d2 - d1 * d6
    if vb <= 0.0 and d2 >= 0.0 and d6 <= 0.0:
        t = d2 / (d2 - d6)
        return ax + t * acx, ay + t * acy, az + t * acz
    va = d3 * d6 - d5 * d4
    if va <= 0.0 and (d4 - d3) >= 0.0 and (d5 - d6) >= 0.0:
        t = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        return bx + t * (cx - bx), by + t * (cy - by), bz + t * (cz - bz)
    denom = 1.0 / (va + vb + vc)
    v, w = vb * denom, vc * denom
    return ax + abx * v + acx * w, ay + aby * v + acy * w, az + abz * v + acz * w


@njit(cache=True)
def _project(q, nearest, incident, triangles, vertices):
    n = q.shape[0]
    dist = np.empty(n)
    out = np.empty((n, 3))
    for i in range(n):
        px, py, pz = q[i, 0], q[i, 1], q[i, 2]
        best = np.inf
        bx = by = bz = 0.0
        for j in range(nearest.shape[1]):
            for s in range(incident.shape[1]):
                t = incident[nearest[i, j], s]
                if t < 0:
                    break
                a, b, c = triangles[t, 0], triangles[t, 1], triangles[t, 2]
                x, y, z = _closest_on_triangle(
                    px, py, pz,
                    vertices[a, 0], vertices[a, 1], vertices[a, 2],
                    vertices[b, 0], vertices[b, 1], vertices[b, 2],
                    vertices[c, 0], vertices[c, 1], vertices[c, 2],
                )
                d = (x - px) ** 2 + (y - py) ** 2 + (z - pz) ** 2
                if d < best:
                    best, bx, by, bz = d, x, y, z
        dist[i] = np.sqrt(best)
        out[i, 0], out[i, 1], out[i, 2] = bx, by, bz
    return dist, out


def closest_points_on_triangles(p: ArrayLike, a: ArrayLike, b: ArrayLike, c: ArrayLike) -> NDArray:
    """Row-wise closest point to p[i] on triangle (a[i], b[i], c[i])."""
    p, a, b, c = (np.ascontiguousarray(x, dtype=np.float64).reshape(-1, 3) for x in (p, a, b, c))
    out = np.empty_like(p)
    for i in range(p.shape[0]):
        out[i] = _closest_on_triangle(p[i, 0], p[i, 1], p[i, 2], *a[i], *b[i], *c[i])
    return out


class SurfaceProjector:
    """Closest point on a triangle mesh, searched over the triangles incident
    to the `k` nearest vertices of each query."""

    def __init__(self, reference: SurfaceMesh, k: int = 3):
        if reference.n_triangles == 0:
            raise ValueError("reference has no triangles")
        self.vertices = np.ascontiguousarray(reference.vertices)
        self.triangles = np.ascontiguousarray(reference.triangles)
        self.tree = cKDTree(self.vertices)
        self.k = min(k, reference.n_vertices)
        # vertex -> incident triangles, padded with -1
        flat = self.triangles.reshape(-1)
        order = np.argsort(flat, kind="stable")
        counts = np.bincount(flat, minlength=reference.n_vertices)
        start = np.concatenate([[0], np.cumsum(counts)[:-1]])
        owner = flat[order]
        table = np.full((reference.n_vertices, int(counts.max())), -1, dtype=np.int64)
        table[owner, np.arange(order.size) - start[owner]] = order // 3
        self.incident = table

    def query(self, query_pts: ArrayLike) -> tuple[NDArray, NDArray]:
        q = np.ascontiguousarray(query_pts, dtype=np.float64).reshape(-1, 3)
        _, nearest = self.tree.query(q, k=self.k)
        nearest = np.ascontiguousarray(np.asarray(nearest, dtype=np.int64).reshape(q.shape[0], -1))
        return _project(q, nearest, self.incident, self.triangles, self.vertices)


def _same_axis(a: RigidTransform, b: RigidTransform, max_angle_deg: float = 10.0) -> bool:
    """Whether two rigid steps rotate about nearly the same axis, in the same sense."""
    ra = Rotation.from_matrix(a.rotation).as_rotvec()
    rb = Rotation.from_matrix(b.rotation).as_rotvec()
    na, nb = np.linalg.norm(ra), np.linalg.norm(rb)
    if na < 1e-12 or nb < 1e-12:
        return False
    return float(ra @ rb) / (na * nb) > np.cos(np.radians(max_angle_deg))


def _rms(d: NDArray) -> float:
    return float(np.sqrt(np.mean(d * d)))


def icp_align(
    moving: SurfaceMesh, reference: SurfaceMesh, cfg: IcpConfig = IcpConfig()
) -> tuple[SurfaceMesh, IcpReport]:
    """Rigidly align `moving` to `reference`.

    The residual is the root-mean-square nearest-neighbour distance, which
    point-to-point ICP never increases. Iteration i pairs, solves Procrustes,
    applies the update and records the residual of the updated pose; the loop
    stops once consecutive residuals differ by less than the tolerance.
    """
    if cfg.match == "surface":
        projector = SurfaceProjector(reference)
        match = projector.query
    else:
        nn = NearestNeighbors(reference)

        def match(x: NDArray) -> tuple[NDArray, NDArray]:
            d, i = nn.query(x)
            return d, nn.points[i]

    pts = moving.vertices.copy()
    total = RigidTransform.identity()
    if cfg.match_centroids:
        total = RigidTransform(np.eye(3), reference.vertices.mean(axis=0) - pts.mean(axis=0))
        pts = total.apply(moving.vertices)

    dist, targets = match(pts)
    previous = _rms(dist)
    report = IcpReport(iterations_run=0, initial_residual=previous)
    keep_n = max(3, int(np.ceil((1.0 - cfg.trim_fraction) * len(pts))))
    last_step = None
    for it in range(1, cfg.max_iterations + 1):
        if keep_n < len(pts):
            keep = np.argsort(dist, kind="stable")[:keep_n]
        else:
            keep = slice(None)
        step = procrustes_rigid(pts[keep], targets[keep])
        total = step.compose(total)
        pts = total.apply(moving.vertices)
        dist, targets = match(pts)
        current = _rms(dist)
        # Extrapolate by integer powers of the last step. Powers of a rigid
        # step commute with a global change of frame, so the result stays
        # invariant to rigidly moving both inputs together.
        if cfg.accelerate and last_step is not None and _same_axis(last_step, step):
            power, trial = step, total
            for n in (2, 6):  # cumulative powers 3 and 9 beyond the plain step
                for _ in range(n):
                    trial = power.compose(trial)
                trial_pts = trial.apply(moving.vertices)
                trial_dist, trial_targets = match(trial_pts)
                trial_rms = _rms(trial_dist)
                if not trial_rms < current:
                    break
                total, pts, dist, targets, current = trial, trial_pts, trial_dist, trial_targets, trial_rms
        last_step = step
        report.residual_history.append(current)
        report.iterations_run = it
        if abs(previous - current) < cfg.convergence_tol:
            break
        previous = current
    report.final_transform = total
    _LOGGER.debug("icp: %d iterations, residual %.4g mm", report.iterations_run, report.residual_history[-1])
    return moving.with_vertices(pts), report

"""Anisotropic Eikonal activation times on tetrahedral meshes.

The solver keeps a priority queue of tentative vertex times. A popped
vertex updates every other vertex of each tet it belongs to with the exact
minimum of the arrival time over the opposite face under the tet's metric:

    T(w) = min over x in face  [ t(x) + sqrt((w - x)^T D (w - x)) ],
    D = M^{-1} = f f^T / (ar cv_t)^2 + (I - f f^T) / cv_t^2

with t linear on the face. A vertex whose time drops after it was popped is
pushed again, so obtuse or strongly anisotropic tets that break the strict
fast-marching causality still converge to the fixed point of the local
solver. Units: mm, ms; conduction velocities are given in mm/s.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Union

import numba
import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.sparse import coo_matrix
from scipy.spatial import cKDTree
from scipy.sparse.csgraph import dijkstra

from .volume import Region, TetMesh

log = logging.getLogger(__name__)


class EikonalError(ValueError):
    pass


@dataclass(frozen=True)
class Conduction:
    cv_t: float  # mm/s, transverse
    ar: float  # longitudinal / transverse

    def __post_init__(self) -> None:
        if not self.cv_t > 0:
            raise EikonalError("cv_t must be > 0")
        if not self.ar >= 1:
            raise EikonalError("anisotropy ratio must be >= 1")

    @property
    def cv_l(self) -> float:
        return self.ar * self.cv_t


DEFAULT_CONDUCTION = {
    Region.RA: Conduction(739.0, 2.11),
    Region.LA: Conduction(946.0, 2.11),
    Region.InterAtrial: Conduction(1093.0, 3.36),
    Region.ValveRing: Conduction(445.0, 2.11),
    Region.PectinateMuscle: Conduction(578.0, 3.78),
    Region.CristaTerminalis: Conduction(607.0, 3.0),
    Region.InferiorIsthmus: Conduction(722.0, 1.0),
}


@dataclass(frozen=True)
class ConductionTable:
    entries: Mapping[Region, Conduction] = field(default_factory=lambda: dict(DEFAULT_CONDUCTION))

    def __getitem__(self, region) -> Conduction:
        try:
            return self.entries[Region(int(region))]
        except KeyError:
            raise EikonalError(f"no conduction entry for region {Region(int(region)).name}") from None

    def scaled(self, factor: float) -> "ConductionTable":
        return ConductionTable({r: Conduction(c.cv_t * factor, c.ar) for r, c in self.entries.items()})

    @classmethod
    def uniform(cls, cv_t: float, ar: float = 1.0) -> "ConductionTable":
        return cls({r: Conduction(cv_t, ar) for r in Region})


def velocity_tensor(region, fiber: ArrayLike, table: ConductionTable = ConductionTable()) -> NDArray:
    """M = (ar cv_t)^2 f f^T + cv_t^2 (I - f f^T), in mm^2/s^2."""
    c = table[region]
    f = np.asarray(fiber, dtype=np.float64)
    ff = np.outer(f, f)
    return c.cv_l**2 * ff + c.cv_t**2 * (np.eye(3) - ff)


def slowness_metrics(mesh: TetMesh, table: ConductionTable) -> NDArray:
    """Per-tet D = M^{-1} with velocities in mm/ms, shape (T, 3, 3)."""
    cv_t = np.array([table[r].cv_t for r in mesh.region]) / 1000.0
    cv_l = np.array([table[r].cv_l for r in mesh.region]) / 1000.0
    f = mesh.fiber
    ff = f[:, :, None] * f[:, None, :]
    return ff / (cv_l**2)[:, None, None] + (np.eye(3) - ff) / (cv_t**2)[:, None, None]


@dataclass
class ActivationMap:
    lat: NDArray  # (V,) ms, +inf where unreachable
    seeds: NDArray
    pops: int = 0
    reinsertions: int = 0

    @property
    def reachable(self) -> NDArray:
        return np.isfinite(self.lat)

    def write_csv(self, path: Union[str, Path]) -> None:
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        with open(tmp, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["vertex", "lat_ms"])
            for i, t in enumerate(self.lat):
                w.writerow([i, repr(float(t))])
        tmp.replace(path)


def read_lat_csv(path: Union[str, Path]) -> NDArray:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    lat = np.full(len(rows), np.inf)
    for r in rows:
        lat[int(r[0])] = float(r[1])
    return lat


# -- numba kernels ---------------------------------------------------------------


@numba.njit(cache=True)
def _qform(D, x, y):
    s = 0.0
    for i in range(3):
        for j in range(3):
            s += x[i] * D[i, j] * y[j]
    return s


@numba.njit(cache=True)
def _vertex_update(D, w, p, t):
    r = w - p
    return t + np.sqrt(max(_qform(D, r, r), 0.0))


@numba.njit(cache=True)
def _edge_update(D, w, pa, ta, pb, tb):
    e = pa - pb
    r = w - pb
    a = _qform(D, e, e)
    b = _qform(D, e, r)
    c0 = _qform(D, r, r)
    g = ta - tb
    denom = 1.0 - g * g / a
    if denom <= 0.0:
        return np.inf
    d2 = (c0 - b * b / a) / denom
    if d2 < 0.0:
        return np.inf
    d = np.sqrt(d2)
    mu = (b - g * d) / a
    if mu < 0.0 or mu > 1.0:
        return np.inf
    return tb + g * mu + d


@numba.njit(cache=True)
def _face_update(D, w, pa, ta, pb, tb, pc, tc):
    e1 = pa - pc
    e2 = pb - pc
    r = w - pc
    a11 = _qform(D, e1, e1)
    a12 = _qform(D, e1, e2)
    a22 = _qform(D, e2, e2)
    det = a11 * a22 - a12 * a12
    if det <= 1e-14 * a11 * a22:
        return np.inf
    b1 = _qform(D, e1, r)
    b2 = _qform(D, e2, r)
    c0 = _qform(D, r, r)
    g1 = ta - tc
    g2 = tb - tc
    q1 = (a22 * b1 - a12 * b2) / det
    q2 = (a11 * b2 - a12 * b1) / det
    h1 = (a22 * g1 - a12 * g2) / det
    h2 = (a11 * g2 - a12 * g1) / det
    denom = 1.0 - (g1 * h1 + g2 * h2)
    if denom <= 0.0:
        return np.inf
    d2 = (c0 - (b1 * q1 + b2 * q2)) / denom
    if d2 < 0.0:
        return np.inf
    d = np.sqrt(d2)
    l1 = q1 - h1 * d
    l2 = q2 - h2 * d
    if l1 < 0.0 or l2 < 0.0 or l1 + l2 > 1.0:
        return np.inf
    return tc + g1 * l1 + g2 * l2 + d


@numba.njit(cache=True)
def _local_solve(D, w, P, T):
    """Minimum arrival at w over the face with vertices P[0..2], times T."""
    best = np.inf
    for i in range(3):
        if np.isfinite(T[i]):
            v = _vertex_update(D, w, P[i], T[i])
            if v < best:
                best = v
    for i in range(3):
        for j in range(i + 1, 3):
            if np.isfinite(T[i]) and np.isfinite(T[j]):
                v = _edge_update(D, w, P[i], T[i], P[j], T[j])
                if v < best:
                    best = v
    if np.isfinite(T[0]) and np.isfinite(T[1]) and np.isfinite(T[2]):
        v = _face_update(D, w, P[0], T[0], P[1], T[1], P[2], T[2])
        if v < best:
            best = v
    return best


@numba.njit(cache=True)
def _heap_push(keys, vals, size, key, val):
    i = size
    keys[i] = key
    vals[i] = val
    while i > 0:
        parent = (i - 1) // 2
        if keys[parent] <= keys[i]:
            break
        keys[parent], keys[i] = keys[i], keys[parent]
        vals[parent], vals[i] = vals[i], vals[parent]
        i = parent
    return size + 1


@numba.njit(cache=True)
def _heap_pop(keys, vals, size):
    key = keys[0]
    val = vals[0]
    size -= 1
    keys[0] = keys[size]
    vals[0] = vals[size]
    i = 0
    while True:
        lft = 2 * i + 1
        small = i
        if lft < size and keys[lft] < keys[small]:
            small = lft
        if lft + 1 < size and keys[lft + 1] < keys[small]:
            small = lft + 1
        if small == i:
            break
        keys[small], keys[i] = keys[i], keys[small]
        vals[small], vals[i] = vals[i], vals[small]
        i = small
    return key, val, size


@numba.njit(cache=True)
def _march(verts, tets, metrics, v2t_ptr, v2t_idx, seeds, init_idx, init_t, rel_tol):
    nv = verts.shape[0]
    lat = np.full(nv, np.inf)
    popped = np.zeros(nv, dtype=np.bool_)
    cap = max(16, 4 * nv + seeds.shape[0] + init_idx.shape[0])
    keys = np.empty(cap)
    vals = np.empty(cap, dtype=np.int64)
    size = 0
    for s in seeds:
        lat[s] = 0.0
        size = _heap_push(keys, vals, size, 0.0, s)
    for i in range(init_idx.shape[0]):
        w = init_idx[i]
        if init_t[i] < lat[w]:
            lat[w] = init_t[i]
            size = _heap_push(keys, vals, size, init_t[i], w)
    P = np.empty((3, 3))
    T = np.empty(3)
    pops = 0
    reinsert = 0
    while size > 0:
        t, v, size = _heap_pop(keys, vals, size)
        if t > lat[v]:
            continue
        pops += 1
        popped[v] = True
        for k in range(v2t_ptr[v], v2t_ptr[v + 1]):
            tet = v2t_idx[k]
            for a in range(4):
                w = tets[tet, a]
                if w == v:
                    continue
                n = 0
                for b in range(4):
                    if b != a:
                        u = tets[tet, b]
                        P[n] = verts[u]
                        T[n] = lat[u]
                        n += 1
                new = _local_solve(metrics[tet], verts[w], P, T)
                if new < lat[w] * (1.0 - rel_tol):
                    if popped[w]:
                        reinsert += 1
                    lat[w] = new
                    if size == cap:
                        cap *= 2
                        nk = np.empty(cap)
                        nvl = np.empty(cap, dtype=np.int64)
                        nk[:size] = keys[:size]
                        nvl[:size] = vals[:size]
                        keys = nk
                        vals = nvl
                    size = _heap_push(keys, vals, size, new, w)
    return lat, pops, reinsert


def vertex_to_tets(tets: NDArray, n_vertices: int) -> tuple[NDArray, NDArray]:
    flat = tets.reshape(-1)
    order = np.argsort(flat, kind="stable")
    counts = np.bincount(flat, minlength=n_vertices)
    ptr = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
    return ptr, (order // 4).astype(np.int64)


def _source_ball(mesh, metrics, ptr, idx, seeds, radius):
    """Straight-line times from each seed to the vertices within `radius`
    whose incident tets all share the seed tet's region and that connect to
    the seed through such vertices (no jumps across gaps in the mesh)."""
    if radius <= 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0)
    tree = cKDTree(mesh.vertices)
    best: dict[int, float] = {}
    for s in seeds:
        tet = idx[ptr[s]]
        region = mesh.region[tet]
        near = np.asarray(tree.query_ball_point(mesh.vertices[s], radius), dtype=np.int64)
        ok = {int(w) for w in near if np.all(mesh.region[idx[ptr[w]:ptr[w + 1]]] == region)}
        if int(s) not in ok:
            continue
        same, stack = {int(s)}, [int(s)]
        while stack:
            u = stack.pop()
            for w in np.unique(mesh.tets[idx[ptr[u]:ptr[u + 1]]]).tolist():
                if w in ok and w not in same:
                    same.add(w)
                    stack.append(w)
        same = np.asarray(sorted(same), dtype=np.int64)
        d = mesh.vertices[same] - mesh.vertices[s]
        t = np.sqrt(np.einsum("ij,jk,ik->i", d, metrics[tet], d))
        for w, tw in zip(same.tolist(), t.tolist()):
            if tw < best.get(w, np.inf):
                best[w] = tw
    keys = np.array(sorted(best), dtype=np.int64)
    return keys, np.array([best[k] for k in keys.tolist()])


def fast_march(
    mesh: TetMesh,
    table: ConductionTable = ConductionTable(),
    seeds: Iterable[int] = (),
    rel_tol: float = 1e-12,
    init_radius: float = 10.0,
) -> ActivationMap:
    """Activation times from `seeds` (lat 0).

    Vertices within `init_radius` mm of a seed start from the straight-line
    travel time under the metric of a tet at that seed. Linear interpolation
    of the strongly curved front near a point source overestimates arrival
    times by 10-20 % a few edges away; the exact ball removes that error.
    Only vertices whose incident tets all share the seed region qualify. On
    a curved wall the chord is shorter than the path along the wall by a
    relative L^2 / (24 R^2), under 1 % for L = 10 mm and curvature radius
    R = 25 mm. Pass 0 to march from the seeds alone.
    """
    seeds = np.unique(np.asarray(list(seeds), dtype=np.int64))
    if seeds.size == 0:
        raise EikonalError("seed set is empty")
    if seeds.min() < 0 or seeds.max() >= mesh.n_vertices:
        raise EikonalError("seed vertex out of range")
    ptr, idx = vertex_to_tets(mesh.tets, mesh.n_vertices)
    metrics = slowness_metrics(mesh, table)
    init_idx, init_t = _source_ball(mesh, metrics, ptr, idx, seeds, init_radius)
    lat, pops, reinsert = _march(
        np.ascontiguousarray(mesh.vertices, dtype=np.float64),
        np.ascontiguousarray(mesh.tets, dtype=np.int64),
        np.ascontiguousarray(metrics),
        ptr, idx, seeds, init_idx, init_t, rel_tol,
    )
    unreachable = int((~np.isfinite(lat)).sum())
    if unreachable:
        log.warning("%d vertices are not connected to any seed; their lat is +inf", unreachable)
    return ActivationMap(lat, seeds, int(pops), int(reinsert))


def sinus_seed(mesh: TetMesh, point: ArrayLike, radius: float = 2.0) -> NDArray:
    """Vertices within `radius` mm of the exit-site point."""
    p = np.asarray(point, dtype=np.float64)
    d = np.linalg.norm(mesh.vertices - p, axis=1)
    sel = np.flatnonzero(d <= radius)
    if sel.size == 0:
        raise EikonalError(f"no vertex within {radius} mm of the sinus exit point {p.tolist()} (nearest {d.min():.3f} mm)")
    return sel


# -- graph oracle --------------------------------------------------------------------


def dijkstra_oracle(mesh: TetMesh, table: ConductionTable, seeds: Iterable[int]) -> NDArray:
    """Shortest paths on the 2-ring vertex graph with straight-segment
    anisotropic weights. Each edge uses the slowest metric among the tets
    touching either endpoint, so the oracle bounds the true time from above
    in piecewise-constant media."""
    nv = mesh.n_vertices
    rows = np.repeat(mesh.tets, 4, axis=1).reshape(-1)
    cols = np.tile(mesh.tets, (1, 4)).reshape(-1)
    adj = coo_matrix((np.ones(rows.size), (rows, cols)), shape=(nv, nv)).tocsr()
    adj.data[:] = 1.0
    ring2 = adj @ adj
    ring2 = ring2.tocoo()
    u, v = ring2.row, ring2.col
    keep = u < v
    u, v = u[keep], v[keep]
    metrics = slowness_metrics(mesh, table)
    ptr, idx = vertex_to_tets(mesh.tets, nv)
    e = mesh.vertices[v] - mesh.vertices[u]
    w = np.zeros(u.size)
    for endpoint in (u, v):
        counts = ptr[endpoint + 1] - ptr[endpoint]
        edge_of = np.repeat(np.arange(u.size), counts)
        starts = np.repeat(ptr[endpoint], counts)
        offs = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
        tet = idx[starts + offs]
        ee = e[edge_of]
        q = np.einsum("ij,ijk,ik->i", ee, metrics[tet], ee)
        np.maximum.at(w, edge_of, q)
    w = np.sqrt(w)
    graph = coo_matrix((w, (u, v)), shape=(nv, nv)).tocsr()
    dist = dijkstra(graph, directed=False, indices=np.asarray(list(seeds)), min_only=True)
    return dist

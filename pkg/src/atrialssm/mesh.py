"""Surface meshes, shape vectors, rigid transforms and the OFF reader/writer.

Vertex order is the correspondence contract: nothing in this module ever
reorders vertices.
"""
from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
from numpy.typing import ArrayLike, NDArray

_LOGGER = logging.getLogger(__name__)

DEGENERATE_AREA = 1e-9  # mm^2


class Label(enum.IntEnum):
    """Per-vertex region tag of an endocardial surface."""

    BODY = 0
    LAA = 1
    RAA = 2
    LPV = 3
    RPV = 4
    OTHER = 5


class MeshError(ValueError):
    """Raised for structurally invalid meshes."""


class MeshFormatError(MeshError):
    """Raised when a mesh file cannot be parsed."""

    def __init__(self, message: str, path: Union[str, Path, None] = None, line: Optional[int] = None):
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(where + message)
        self.path = path
        self.line = line


def _frozen(a: NDArray) -> NDArray:
    a.setflags(write=False)
    return a


def triangle_areas(vertices: NDArray, triangles: NDArray) -> NDArray:
    a, b, c = (vertices[triangles[:, i]] for i in range(3))
    return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)


@dataclass(frozen=True)
class SurfaceMesh:
    """Triangulated surface in mm with optional per-vertex labels.

    Arrays are copied on construction and made read-only.
    """

    vertices: NDArray[np.float64]
    triangles: NDArray[np.int64]
    labels: Optional[NDArray[np.int8]] = None

    def __post_init__(self) -> None:
        v = np.array(self.vertices, dtype=np.float64, copy=True).reshape(-1, 3)
        t = np.array(self.triangles, dtype=np.int64, copy=True).reshape(-1, 3)
        if v.shape[0] == 0:
            raise MeshError("mesh has no vertices")
        if not np.all(np.isfinite(v)):
            raise MeshError("non-finite vertex coordinates")
        if t.size:
            bad = np.flatnonzero((t < 0).any(axis=1) | (t >= v.shape[0]).any(axis=1))
            if bad.size:
                raise MeshError(
                    f"triangle {bad[0]} references vertex outside [0, {v.shape[0]})"
                )
            areas = triangle_areas(v, t)
            deg = np.flatnonzero(areas < DEGENERATE_AREA)
            if deg.size:
                raise MeshError(
                    f"{deg.size} degenerate triangle(s), first is {deg[0]} (area {areas[deg[0]]:.3g} mm^2)"
                )
        lab = None
        if self.labels is not None:
            lab = np.array(self.labels, dtype=np.int8, copy=True).reshape(-1)
            if lab.shape[0] != v.shape[0]:
                raise MeshError(f"{lab.shape[0]} labels for {v.shape[0]} vertices")
            valid = {int(x) for x in Label}
            if not set(np.unique(lab).tolist()) <= valid:
                raise MeshError("unknown label value")
            lab = _frozen(lab)
        object.__setattr__(self, "vertices", _frozen(v))
        object.__setattr__(self, "triangles", _frozen(t))
        object.__setattr__(self, "labels", lab)

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_triangles(self) -> int:
        return self.triangles.shape[0]

    def with_vertices(self, vertices: ArrayLike) -> "SurfaceMesh":
        """Same topology and labels, new coordinates."""
        return SurfaceMesh(np.asarray(vertices, dtype=np.float64), self.triangles, self.labels)

    def transformed(self, transform: "RigidTransform") -> "SurfaceMesh":
        return self.with_vertices(transform.apply(self.vertices))

    def centroid(self) -> NDArray:
        return self.vertices.mean(axis=0)

    def label_mask(self, *labels: Label) -> NDArray[np.bool_]:
        if self.labels is None:
            return np.zeros(self.n_vertices, dtype=bool)
        return np.isin(self.labels, [int(x) for x in labels])

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, SurfaceMesh):
            return NotImplemented
        same_labels = (self.labels is None and other.labels is None) or (
            self.labels is not None and other.labels is not None and np.array_equal(self.labels, other.labels)
        )
        return (
            np.array_equal(self.vertices, other.vertices)
            and np.array_equal(self.triangles, other.triangles)
            and same_labels
        )

    __hash__ = None  # type: ignore[assignment]


@dataclass(frozen=True)
class RigidTransform:
    """x -> rotation @ x + translation."""

    rotation: NDArray[np.float64] = field(default_factory=lambda: np.eye(3))
    translation: NDArray[np.float64] = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self) -> None:
        r = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if not np.allclose(r.T @ r, np.eye(3), atol=1e-9) or abs(np.linalg.det(r) - 1.0) > 1e-9:
            raise ValueError("rotation is not a proper orthonormal matrix")
        object.__setattr__(self, "rotation", _frozen(r))
        object.__setattr__(self, "translation", _frozen(t))

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls()

    def apply(self, points: ArrayLike) -> NDArray:
        p = np.asarray(points, dtype=np.float64)
        return p @ self.rotation.T + self.translation

    def compose(self, first: "RigidTransform") -> "RigidTransform":
        """Transform equivalent to applying `first`, then `self`."""
        return RigidTransform(self.rotation @ first.rotation, self.rotation @ first.translation + self.translation)

    def inverse(self) -> "RigidTransform":
        return RigidTransform(self.rotation.T, -self.rotation.T @ self.translation)

    def angle_deg(self) -> float:
        c = (np.trace(self.rotation) - 1.0) / 2.0
        return float(np.degrees(np.arccos(np.clip(c, -1.0, 1.0))))


def rotation_about_axis(axis: ArrayLike, angle: float) -> NDArray:
    """Rodrigues rotation matrix, angle in radians."""
    k = np.asarray(axis, dtype=np.float64)
    k = k / np.linalg.norm(k)
    kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + np.sin(angle) * kx + (1 - np.cos(angle)) * (kx @ kx)


# -- shape vectors -----------------------------------------------------------


def to_shape_vector(mesh: SurfaceMesh) -> NDArray[np.float64]:
    """Flatten to x1, y1, z1, ..., xM, yM, zM."""
    if mesh.n_vertices == 0:
        raise MeshError("empty mesh")
    return mesh.vertices.reshape(-1).copy()


def from_shape_vector(
    coords: ArrayLike, triangles: ArrayLike, labels: Optional[ArrayLike] = None
) -> SurfaceMesh:
    v = np.asarray(coords, dtype=np.float64).reshape(-1)
    if v.size == 0 or v.size % 3:
        raise MeshError(f"shape vector length {v.size} is not a positive multiple of 3")
    t = np.asarray(triangles, dtype=np.int64).reshape(-1, 3)
    if t.size and 3 * (int(t.max()) + 1) > v.size:
        raise MeshError(f"shape vector holds {v.size // 3} vertices, topology needs {int(t.max()) + 1}")
    return SurfaceMesh(v.reshape(-1, 3), t, labels)


# -- geometry ----------------------------------------------------------------


def face_normals(vertices: NDArray, triangles: NDArray, normalize: bool = True) -> NDArray:
    a, b, c = (vertices[triangles[:, i]] for i in range(3))
    n = np.cross(b - a, c - a)
    if normalize:
        n = n / np.linalg.norm(n, axis=1, keepdims=True)
    return n


def vertex_normals(mesh: SurfaceMesh) -> NDArray[np.float64]:
    """Unit normal per vertex: normalized mean of the incident triangle normals."""
    fn = face_normals(mesh.vertices, mesh.triangles)
    acc = np.zeros((mesh.n_vertices, 3))
    count = np.bincount(mesh.triangles.reshape(-1), minlength=mesh.n_vertices)
    isolated = np.flatnonzero(count == 0)
    if isolated.size:
        raise MeshError(f"vertex {isolated[0]} has no incident triangle")
    for i in range(3):
        np.add.at(acc, mesh.triangles[:, i], fn)
    norm = np.linalg.norm(acc, axis=1, keepdims=True)
    if np.any(norm < 1e-12):
        raise MeshError("incident triangle normals cancel at a vertex")
    return acc / norm


def edge_face_counts(triangles: NDArray) -> tuple[NDArray, NDArray]:
    """Unique undirected edges (sorted pairs) and how many triangles use each."""
    e = np.concatenate([triangles[:, [0, 1]], triangles[:, [1, 2]], triangles[:, [2, 0]]])
    e.sort(axis=1)
    return np.unique(e, axis=0, return_counts=True)


def is_closed_manifold(mesh: SurfaceMesh) -> bool:
    _, counts = edge_face_counts(mesh.triangles)
    return bool(counts.size) and bool(np.all(counts == 2))


def enclosed_volume(mesh: SurfaceMesh) -> float:
    """Signed volume by the divergence theorem (positive for outward orientation)."""
    a, b, c = (mesh.vertices[mesh.triangles[:, i]] for i in range(3))
    return float(np.einsum("ij,ij->i", a, np.cross(b, c)).sum() / 6.0)


def surface_area(mesh: SurfaceMesh) -> float:
    return float(triangle_areas(mesh.vertices, mesh.triangles).sum())


def vertex_adjacency(n_vertices: int, triangles: NDArray):
    """Sparse symmetric vertex adjacency matrix."""
    from scipy import sparse

    e = np.concatenate([triangles[:, [0, 1]], triangles[:, [1, 2]], triangles[:, [2, 0]]])
    data = np.ones(2 * len(e), dtype=np.int8)
    rows = np.concatenate([e[:, 0], e[:, 1]])
    cols = np.concatenate([e[:, 1], e[:, 0]])
    adj = sparse.coo_matrix((data, (rows, cols)), shape=(n_vertices, n_vertices)).tocsr()
    adj.data[:] = 1
    return adj


def halfspace_volume(mesh: SurfaceMesh, point: ArrayLike, normal: ArrayLike) -> float:
    """Volume of the enclosed solid on the positive side of a plane.

    Flux of F = max(n.(x - p), 0) n through the surface; triangles cut by
    the plane are clipped exactly.
    """
    p = np.asarray(point, dtype=float)
    n = np.asarray(normal, dtype=float)
    n = n / np.linalg.norm(n)
    total = 0.0
    tri = mesh.vertices[mesh.triangles]
    h = (tri - p) @ n
    fn = face_normals(mesh.vertices, mesh.triangles, normalize=False)  # 2*area*unit
    inside = (h >= 0).all(axis=1)
    # full triangles: integral of h over triangle = area * mean(h)
    total += float(np.sum(0.5 * (fn[inside] @ n) * h[inside].mean(axis=1)))
    for idx in np.flatnonzero(~inside & (h > 0).any(axis=1)):
        poly = _clip_polygon(tri[idx], h[idx])
        unit_flux = (fn[idx] @ n) / np.linalg.norm(fn[idx])
        for k in range(1, len(poly) - 1):
            q = np.array([poly[0], poly[k], poly[k + 1]])
            area = 0.5 * np.linalg.norm(np.cross(q[1] - q[0], q[2] - q[0]))
            total += unit_flux * area * float(((q - p) @ n).mean())
    return total


def _clip_polygon(pts: NDArray, h: NDArray) -> list[NDArray]:
    out = []
    for i in range(3):
        j = (i + 1) % 3
        if h[i] >= 0:
            out.append(pts[i])
        if (h[i] >= 0) != (h[j] >= 0):
            s = h[i] / (h[i] - h[j])
            out.append(pts[i] + s * (pts[j] - pts[i]))
    return out


def icosphere(subdivisions: int = 3, radius: float = 1.0) -> SurfaceMesh:
    """Geodesic sphere with outward-oriented triangles."""
    t = (1.0 + 5**0.5) / 2.0
    verts = [
        (-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0),
        (0, -1, t), (0, 1, t), (0, -1, -t), (0, 1, -t),
        (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1),
    ]
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    v = [np.array(p, dtype=float) / np.linalg.norm(p) for p in verts]
    f = list(faces)
    for _ in range(subdivisions):
        cache: dict[tuple[int, int], int] = {}

        def midpoint(i: int, j: int) -> int:
            key = (min(i, j), max(i, j))
            if key not in cache:
                m = v[i] + v[j]
                v.append(m / np.linalg.norm(m))
                cache[key] = len(v) - 1
            return cache[key]

        nf = []
        for a, b, c in f:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            nf += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        f = nf
    return SurfaceMesh(np.array(v) * radius, np.array(f))


def sphere_triangulation(directions: NDArray) -> NDArray[np.int64]:
    """Outward-oriented triangulation of unit directions via their convex hull."""
    from scipy.spatial import ConvexHull

    hull = ConvexHull(directions)
    tris = hull.simplices.astype(np.int64)
    n = face_normals(directions, tris, normalize=False)
    flip = np.einsum("ij,ij->i", n, directions[tris].mean(axis=1)) < 0
    tris[flip] = tris[flip][:, [0, 2, 1]]
    return tris


def fibonacci_directions(n: int) -> NDArray[np.float64]:
    i = np.arange(n) + 0.5
    z = 1.0 - 2.0 * i / n
    phi = np.pi * (1.0 + 5**0.5) * i
    r = np.sqrt(1.0 - z * z)
    return np.column_stack([r * np.cos(phi), r * np.sin(phi), z])


# -- OFF with label extension ------------------------------------------------


def save_mesh(mesh: SurfaceMesh, path: Union[str, Path]) -> None:
    """Write ASCII OFF; coordinates at 17 significant digits, labels in a #LABELS block."""
    lines = ["OFF", f"{mesh.n_vertices} {mesh.n_triangles} 0"]
    lines += [f"{x:.17g} {y:.17g} {z:.17g}" for x, y, z in mesh.vertices.tolist()]
    lines += [f"3 {a} {b} {c}" for a, b, c in mesh.triangles.tolist()]
    if mesh.labels is not None:
        lines.append("#LABELS")
        lines += [str(int(x)) for x in mesh.labels]
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text("\n".join(lines) + "\n")
    tmp.replace(path)


def load_mesh(path: Union[str, Path]) -> SurfaceMesh:
    path = Path(path)
    raw = path.read_text().splitlines()
    # (line number, stripped content) with blank and comment lines removed,
    # except the #LABELS marker which opens the extension block.
    rows: list[tuple[int, str]] = []
    for no, line in enumerate(raw, start=1):
        s = line.strip()
        if not s:
            continue
        if s.startswith("#") and s != "#LABELS":
            continue
        rows.append((no, s))
    if not rows:
        raise MeshFormatError("empty file", path)
    no, head = rows[0]
    if head != "OFF":
        raise MeshFormatError(f"expected 'OFF' header, got {head[:20]!r}", path, no)
    if len(rows) < 2:
        raise MeshFormatError("missing counts line", path, no)
    no, counts = rows[1]
    try:
        nv, nf = (int(x) for x in counts.split()[:2])
    except ValueError:
        raise MeshFormatError(f"bad counts line {counts!r}", path, no) from None
    if nv <= 0 or nf < 0:
        raise MeshFormatError(f"bad counts {nv} {nf}", path, no)
    body = rows[2:]
    if len(body) < nv + nf:
        raise MeshFormatError(f"expected {nv} vertices and {nf} faces, file is truncated", path, body[-1][0] if body else no)
    verts = np.empty((nv, 3))
    for i in range(nv):
        no, s = body[i]
        parts = s.split()
        try:
            if len(parts) != 3:
                raise ValueError
            verts[i] = [float(x) for x in parts]
        except ValueError:
            raise MeshFormatError(f"vertex {i}: expected three floats, got {s!r}", path, no) from None
    faces = np.empty((nf, 3), dtype=np.int64)
    for k in range(nf):
        no, s = body[nv + k]
        parts = s.split()
        try:
            ints = [int(x) for x in parts]
        except ValueError:
            raise MeshFormatError(f"face {k}: non-integer entry in {s!r}", path, no) from None
        if len(ints) != 4 or ints[0] != 3:
            raise MeshFormatError(f"face {k}: only triangles '3 i j k' are supported", path, no)
        if min(ints[1:]) < 0 or max(ints[1:]) >= nv:
            raise MeshFormatError(f"face {k}: vertex index out of range [0, {nv})", path, no)
        faces[k] = ints[1:]
    rest = body[nv + nf:]
    labels = None
    if rest:
        no, s = rest[0]
        if s != "#LABELS":
            raise MeshFormatError(f"unexpected content after faces: {s[:20]!r}", path, no)
        if len(rest) - 1 != nv:
            raise MeshFormatError(f"#LABELS block has {len(rest) - 1} entries for {nv} vertices", path, no)
        try:
            labels = np.array([int(s) for _, s in rest[1:]], dtype=np.int8)
        except ValueError:
            raise MeshFormatError("non-integer label", path, no) from None
    try:
        return SurfaceMesh(verts, faces, labels)
    except MeshFormatError:
        raise
    except MeshError as exc:
        raise MeshFormatError(str(exc), path) from None


def pv_groups(mesh: SurfaceMesh) -> list[NDArray[np.int64]]:
    """Vertex index sets of the individual veins: connected components of the
    LPV and RPV labels, ordered LPV before RPV, then superior before inferior."""
    from scipy.sparse.csgraph import connected_components

    if mesh.labels is None:
        raise ValueError("mesh has no labels")
    adj = vertex_adjacency(mesh.n_vertices, mesh.triangles)
    groups: list[NDArray] = []
    for lab in (Label.LPV, Label.RPV):
        idx = np.flatnonzero(mesh.labels == int(lab))
        if idx.size == 0:
            continue
        _, comp = connected_components(adj[idx][:, idx], directed=False)
        parts = [idx[comp == c] for c in range(comp.max() + 1)]
        parts.sort(key=lambda p: -mesh.vertices[p, 2].mean())
        groups.extend(parts)
    return groups


def as_points(x: Union[SurfaceMesh, ArrayLike]) -> NDArray:
    if isinstance(x, SurfaceMesh):
        return x.vertices
    return np.asarray(x, dtype=np.float64).reshape(-1, 3)


def stack_shape_vectors(meshes: Sequence[SurfaceMesh]) -> NDArray:
    """(N, 3M) matrix of shape vectors; all meshes must share the vertex count."""
    counts = {m.n_vertices for m in meshes}
    if len(counts) > 1:
        raise MeshError(f"meshes are not in correspondence: vertex counts {sorted(counts)}")
    return np.stack([to_shape_vector(m) for m in meshes])

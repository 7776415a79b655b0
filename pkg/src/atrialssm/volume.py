"""Wall extrusion to a labelled tetrahedral mesh with fiber directions.

The endocardial surface is offset along vertex normals by the wall
thickness, in `layers` equal steps. Each triangular prism between two
layers is split into three tetrahedra. The split picks, on every quad side
of the prism, the diagonal that runs from the lower global vertex index at
the bottom to the higher one at the top, so neighbouring prisms always agree
and the mesh is conforming.

Regions and fibers come from analytic rules read from plain-text files.

Tet file format (ASCII)::

    TET1
    <n_vertices> <n_tets>
    x y z                 (n_vertices lines)
    4 i j k l             (n_tets lines)
    #REGION
    tag                   (n_tets lines, region name)
    #FIBER
    fx fy fz              (n_tets lines)
    #LAT                  (optional)
    t                     (n_vertices lines, ms)
"""
from __future__ import annotations

import logging
import shlex
from dataclasses import dataclass, field, replace
from enum import IntEnum
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.spatial import cKDTree

from .mesh import MeshError, SurfaceMesh, is_closed_manifold, vertex_adjacency, vertex_normals

log = logging.getLogger(__name__)

MIN_TET_VOLUME = 1e-9


class Region(IntEnum):
    RA = 0
    LA = 1
    InterAtrial = 2
    ValveRing = 3
    PectinateMuscle = 4
    CristaTerminalis = 5
    InferiorIsthmus = 6


class VolumeError(MeshError):
    pass


class SelfIntersectionError(VolumeError):
    def __init__(self, pairs: NDArray):
        self.pairs = np.asarray(pairs)
        head = ", ".join(f"({a},{b})" for a, b in self.pairs[:10])
        more = "" if len(self.pairs) <= 10 else f" and {len(self.pairs) - 10} more"
        super().__init__(f"offset surface self-intersects: {len(self.pairs)} triangle pairs {head}{more}")


@dataclass(frozen=True)
class WallConfig:
    thickness: float = 3.0  # mm
    target_edge: float = 1.0  # mm, sets the number of layers through the wall
    check_intersections: bool = True
    # Umbrella-averaging passes over the offset directions. 0 keeps the plain
    # mean of adjacent triangle normals; a few passes stop noisy normals from
    # crossing inside concave creases. Offsets stay exactly `thickness` long.
    normal_smoothing: int = 0

    def __post_init__(self) -> None:
        if not self.thickness > 0:
            raise ValueError("thickness must be > 0")
        if not self.target_edge > 0:
            raise ValueError("target_edge must be > 0")
        if self.normal_smoothing < 0:
            raise ValueError("normal_smoothing must be >= 0")

    @property
    def layers(self) -> int:
        return max(1, int(round(self.thickness / self.target_edge)))


@dataclass
class TetMesh:
    vertices: NDArray  # (V, 3) mm
    tets: NDArray  # (T, 4), positive orientation
    region: NDArray  # (T,) int8 Region values, -1 means untagged
    fiber: NDArray  # (T, 3) unit vectors
    n_surface: int = 0  # vertices per layer, 0 when not built by extrusion
    layers: int = 0
    surface_triangles: Optional[NDArray] = None

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_tets(self) -> int:
        return self.tets.shape[0]

    def centroids(self) -> NDArray:
        return self.vertices[self.tets].mean(axis=1)

    def volumes(self) -> NDArray:
        return signed_volumes(self.vertices, self.tets)

    def with_vertices(self, vertices: ArrayLike) -> "TetMesh":
        return replace(self, vertices=np.asarray(vertices, dtype=np.float64))

    def validate(self) -> None:
        vol = self.volumes()
        if np.any(vol <= MIN_TET_VOLUME):
            raise VolumeError(f"{int((vol <= MIN_TET_VOLUME).sum())} tets with non-positive volume")
        if np.any(self.region < 0):
            raise VolumeError(f"{int((self.region < 0).sum())} untagged tets")
        if not np.allclose(np.linalg.norm(self.fiber, axis=1), 1.0, atol=1e-9):
            raise VolumeError("fiber vectors are not unit length")


def signed_volumes(vertices: NDArray, tets: NDArray) -> NDArray:
    p = vertices[tets]
    return np.einsum("ij,ij->i", p[:, 1] - p[:, 0], np.cross(p[:, 2] - p[:, 0], p[:, 3] - p[:, 0])) / 6.0


def boundary_faces(tets: NDArray) -> NDArray:
    """Faces used by exactly one tet (sorted vertex triples)."""
    faces = np.concatenate([tets[:, [1, 2, 3]], tets[:, [0, 2, 3]], tets[:, [0, 1, 3]], tets[:, [0, 1, 2]]])
    faces = np.sort(faces, axis=1)
    uniq, counts = np.unique(faces, axis=0, return_counts=True)
    if np.any(counts > 2):
        raise VolumeError("a face is shared by more than two tets")
    return uniq[counts == 1]


def _prism_tets(tris: NDArray, offset_lo: int, offset_hi: int) -> NDArray:
    s = np.sort(tris, axis=1)
    v0, v1, v2 = s[:, 0] + offset_lo, s[:, 1] + offset_lo, s[:, 2] + offset_lo
    w0, w1, w2 = s[:, 0] + offset_hi, s[:, 1] + offset_hi, s[:, 2] + offset_hi
    return np.concatenate(
        [np.column_stack([v0, v1, v2, w2]), np.column_stack([v0, v1, w1, w2]), np.column_stack([v0, w0, w1, w2])]
    )


def offset_directions(endo: SurfaceMesh, smoothing: int = 0) -> NDArray:
    """Unit vertex normals, optionally averaged over the 1-ring `smoothing` times."""
    n = vertex_normals(endo)
    if smoothing:
        adj = vertex_adjacency(endo.n_vertices, endo.triangles)
        for _ in range(smoothing):
            n = n + adj @ n
            n /= np.linalg.norm(n, axis=1)[:, None]
    return n


def extrude_wall(endo: SurfaceMesh, cfg: WallConfig = WallConfig()) -> TetMesh:
    """Prism extrusion of a closed surface along its outward vertex normals."""
    if not is_closed_manifold(endo):
        raise VolumeError("endocardial surface is not a closed manifold")
    normals = offset_directions(endo, cfg.normal_smoothing)
    m = endo.n_vertices
    n_layers = cfg.layers
    steps = np.linspace(0.0, cfg.thickness, n_layers + 1)
    verts = np.concatenate([endo.vertices + h * normals for h in steps])
    if cfg.check_intersections:
        pairs = self_intersections(verts[n_layers * m:], endo.triangles)
        if len(pairs):
            raise SelfIntersectionError(pairs)
    tets = np.concatenate([_prism_tets(endo.triangles, j * m, (j + 1) * m) for j in range(n_layers)])
    vol = signed_volumes(verts, tets)
    flip = vol < 0
    tets[flip] = tets[flip][:, [1, 0, 2, 3]]
    vol = np.abs(vol)
    if np.any(vol <= MIN_TET_VOLUME):
        raise VolumeError(f"{int((vol <= MIN_TET_VOLUME).sum())} degenerate tets after extrusion")
    nt = tets.shape[0]
    fiber = np.tile([1.0, 0.0, 0.0], (nt, 1))
    return TetMesh(verts, tets, np.full(nt, -1, dtype=np.int8), fiber, m, n_layers, endo.triangles.copy())


# -- self-intersection ---------------------------------------------------------


def _segments_hit_triangles(p0: NDArray, p1: NDArray, a: NDArray, b: NDArray, c: NDArray, eps: float = 1e-12) -> NDArray:
    """Moller-Trumbore for many (segment, triangle) pairs at once."""
    d = p1 - p0
    e1, e2 = b - a, c - a
    h = np.cross(d, e2)
    det = np.einsum("ij,ij->i", e1, h)
    ok = np.abs(det) > eps
    inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
    s = p0 - a
    u = inv * np.einsum("ij,ij->i", s, h)
    q = np.cross(s, e1)
    v = inv * np.einsum("ij,ij->i", d, q)
    t = inv * np.einsum("ij,ij->i", e2, q)
    return ok & (u >= 0) & (v >= 0) & (u + v <= 1) & (t >= 0) & (t <= 1)


def self_intersections(vertices: NDArray, triangles: NDArray) -> NDArray:
    """Pairs of non-adjacent triangles whose interiors cross (edge-triangle test)."""
    p = vertices[triangles]
    cent = p.mean(axis=1)
    rad = np.linalg.norm(p - cent[:, None], axis=2).max(axis=1)
    tree = cKDTree(cent)
    pairs = tree.query_pairs(2.0 * rad.max(), output_type="ndarray")
    if pairs.size == 0:
        return np.zeros((0, 2), dtype=np.int64)
    i, j = pairs[:, 0], pairs[:, 1]
    close = np.linalg.norm(cent[i] - cent[j], axis=1) <= rad[i] + rad[j]
    shared = (triangles[i][:, :, None] == triangles[j][:, None, :]).any(axis=(1, 2))
    i, j = i[close & ~shared], j[close & ~shared]
    hit = np.zeros(i.size, dtype=bool)
    for s, t in ((i, j), (j, i)):
        for e0, e1 in ((0, 1), (1, 2), (2, 0)):
            hit |= _segments_hit_triangles(p[s, e0], p[s, e1], p[t, 0], p[t, 1], p[t, 2])
    return np.column_stack([i[hit], j[hit]])


# -- regions ---------------------------------------------------------------------


def _vec(text: str) -> NDArray:
    v = np.array([float(x) for x in text.split(",")])
    if v.shape != (3,):
        raise ValueError(f"expected x,y,z but got {text!r}")
    return v


def _unit(v: ArrayLike) -> NDArray:
    v = np.asarray(v, dtype=float)
    n = np.linalg.norm(v)
    if n == 0:
        raise ValueError("zero-length direction")
    return v / n


@dataclass(frozen=True)
class RegionRule:
    """One predicate on tet centroids. Kinds and parameters:

    halfspace  point, normal        (c - point) . normal > 0
    sphere     center, radius       |c - center| <= radius
    ring       center, normal, radius, width
                                    distance to the circle <= width / 2
    slab       point, normal, width |(c - point) . normal| <= width / 2
    segment    a, b, radius         distance to segment ab <= radius
    """

    region: Region
    kind: str
    params: dict = field(default_factory=dict)

    def mask(self, c: NDArray) -> NDArray:
        p = self.params
        if self.kind == "halfspace":
            return (c - p["point"]) @ _unit(p["normal"]) > 0
        if self.kind == "sphere":
            return np.linalg.norm(c - p["center"], axis=1) <= p["radius"]
        if self.kind == "ring":
            n = _unit(p["normal"])
            r = c - p["center"]
            h = r @ n
            rho = np.linalg.norm(r - np.outer(h, n), axis=1)
            return np.hypot(rho - p["radius"], h) <= p["width"] / 2
        if self.kind == "slab":
            return np.abs((c - p["point"]) @ _unit(p["normal"])) <= p["width"] / 2
        if self.kind == "segment":
            a, b = p["a"], p["b"]
            ab = b - a
            t = np.clip((c - a) @ ab / (ab @ ab), 0.0, 1.0)
            return np.linalg.norm(c - a - np.outer(t, ab), axis=1) <= p["radius"]
        raise ValueError(f"unknown rule kind {self.kind!r}")


_RULE_PARAMS = {
    "halfspace": {"point": _vec, "normal": _vec},
    "sphere": {"center": _vec, "radius": float},
    "ring": {"center": _vec, "normal": _vec, "radius": float, "width": float},
    "slab": {"point": _vec, "normal": _vec, "width": float},
    "segment": {"a": _vec, "b": _vec, "radius": float},
}


@dataclass(frozen=True)
class RegionRules:
    """Rules applied in file order; later rules overwrite earlier ones."""

    rules: tuple[RegionRule, ...] = ()
    default: Optional[Region] = Region.RA


def _parse_region(name: str) -> Region:
    try:
        return Region[name]
    except KeyError:
        raise ValueError(f"unknown region {name!r}; expected one of {[r.name for r in Region]}") from None


def parse_region_rules(text: str, source: str = "<rules>") -> RegionRules:
    """Parse lines of the form::

        default = RA
        rule = LA halfspace point=0,0,0 normal=1,0,0
    """
    rules: list[RegionRule] = []
    default: Optional[Region] = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            key, _, value = (s.strip() for s in line.partition("="))
            if key == "default":
                default = None if value.lower() == "none" else _parse_region(value)
            elif key == "rule":
                tokens = shlex.split(value)
                region, kind = _parse_region(tokens[0]), tokens[1]
                if kind not in _RULE_PARAMS:
                    raise ValueError(f"unknown rule kind {kind!r}")
                params = {}
                for tok in tokens[2:]:
                    name, _, val = tok.partition("=")
                    if name not in _RULE_PARAMS[kind]:
                        raise ValueError(f"{kind} does not take {name!r}")
                    params[name] = _RULE_PARAMS[kind][name](val)
                missing = set(_RULE_PARAMS[kind]) - set(params)
                if missing:
                    raise ValueError(f"{kind} rule missing {sorted(missing)}")
                rules.append(RegionRule(region, kind, params))
            else:
                raise ValueError(f"unknown key {key!r}")
        except (ValueError, IndexError) as exc:
            raise ValueError(f"{source}:{lineno}: {exc}") from None
    return RegionRules(tuple(rules), default)


def load_region_rules(path: Union[str, Path]) -> RegionRules:
    return parse_region_rules(Path(path).read_text(), str(path))


def assign_regions(mesh: TetMesh, rules: RegionRules = RegionRules()) -> TetMesh:
    c = mesh.centroids()
    region = np.full(mesh.n_tets, -1 if rules.default is None else int(rules.default), dtype=np.int8)
    for rule in rules.rules:
        region[rule.mask(c)] = int(rule.region)
    if np.any(region < 0):
        raise VolumeError(f"{int((region < 0).sum())} tets matched no rule and no default region is set")
    return replace(mesh, region=region)


# -- fibers ------------------------------------------------------------------------


@dataclass(frozen=True)
class FiberRule:
    """uniform: constant `direction`. circumferential: tangent to circles
    around an axis through `center`; both default to the principal axis and
    centroid of the region's tets."""

    kind: str = "circumferential"
    direction: Optional[tuple[float, float, float]] = None
    axis: Optional[tuple[float, float, float]] = None
    center: Optional[tuple[float, float, float]] = None


@dataclass(frozen=True)
class FiberRules:
    default: FiberRule = FiberRule()
    per_region: dict = field(default_factory=dict)  # Region -> FiberRule

    def for_region(self, r: Region) -> FiberRule:
        return self.per_region.get(r, self.default)


def parse_fiber_rules(text: str, source: str = "<fibers>") -> FiberRules:
    """Lines ``<Region|default> = uniform direction=x,y,z`` or
    ``<Region|default> = circumferential [axis=x,y,z] [center=x,y,z]``."""
    default = FiberRule()
    per: dict = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            key, _, value = (s.strip() for s in line.partition("="))
            tokens = value.split()
            kind = tokens[0]
            kw = {}
            for tok in tokens[1:]:
                name, _, val = tok.partition("=")
                if name not in ("direction", "axis", "center"):
                    raise ValueError(f"unknown fiber parameter {name!r}")
                kw[name] = tuple(_vec(val))
            if kind not in ("uniform", "circumferential"):
                raise ValueError(f"unknown fiber rule {kind!r}")
            if kind == "uniform" and "direction" not in kw:
                raise ValueError("uniform rule needs direction=")
            rule = FiberRule(kind, **kw)
            if key == "default":
                default = rule
            else:
                per[_parse_region(key)] = rule
        except (ValueError, IndexError) as exc:
            raise ValueError(f"{source}:{lineno}: {exc}") from None
    return FiberRules(default, per)


def load_fiber_rules(path: Union[str, Path]) -> FiberRules:
    return parse_fiber_rules(Path(path).read_text(), str(path))


def _principal_axis(points: NDArray) -> NDArray:
    if len(points) < 2:
        return np.array([0.0, 0.0, 1.0])
    x = points - points.mean(axis=0)
    w, v = np.linalg.eigh(x.T @ x)
    a = v[:, -1]
    return a * np.sign(a[np.abs(a).argmax()])


def _perpendicular(axis: NDArray) -> NDArray:
    e = np.eye(3)[np.abs(axis).argmin()]
    return _unit(np.cross(axis, e))


def assign_fibers(mesh: TetMesh, rules: FiberRules = FiberRules(), zero_tol: float = 1e-9) -> TetMesh:
    c = mesh.centroids()
    fiber = np.empty((mesh.n_tets, 3))
    for r in np.unique(mesh.region):
        if r < 0:
            raise VolumeError("assign regions before fibers")
        sel = mesh.region == r
        rule = rules.for_region(Region(int(r)))
        if rule.kind == "uniform":
            fiber[sel] = _unit(rule.direction)
            continue
        axis = _unit(rule.axis) if rule.axis is not None else _principal_axis(c[sel])
        center = np.asarray(rule.center, dtype=float) if rule.center is not None else c[sel].mean(axis=0)
        f = np.cross(axis, c[sel] - center)
        norm = np.linalg.norm(f, axis=1)
        bad = norm <= zero_tol
        if bad.any():
            log.warning("region %s: %d tets on the fiber axis, using the fallback direction", Region(int(r)).name, int(bad.sum()))
            f[bad] = _perpendicular(axis)
            norm[bad] = 1.0
        fiber[sel] = f / norm[:, None]
    return replace(mesh, fiber=fiber)


# -- I/O ------------------------------------------------------------------------------


def save_tetmesh(mesh: TetMesh, path: Union[str, Path], lat: Optional[ArrayLike] = None) -> None:
    path = Path(path)
    lines = ["TET1", f"{mesh.n_vertices} {mesh.n_tets}"]
    lines += [f"{x:.17g} {y:.17g} {z:.17g}" for x, y, z in mesh.vertices]
    lines += [f"4 {a} {b} {c} {d}" for a, b, c, d in mesh.tets]
    lines.append("#REGION")
    lines += [Region(int(r)).name if r >= 0 else "NONE" for r in mesh.region]
    lines.append("#FIBER")
    lines += [f"{x:.17g} {y:.17g} {z:.17g}" for x, y, z in mesh.fiber]
    if lat is not None:
        lat = np.asarray(lat, dtype=float)
        if lat.shape != (mesh.n_vertices,):
            raise ValueError("lat must have one value per vertex")
        lines.append("#LAT")
        lines += [f"{t:.17g}" for t in lat]
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text("\n".join(lines) + "\n")
    tmp.replace(path)


def load_tetmesh(path: Union[str, Path]) -> tuple[TetMesh, Optional[NDArray]]:
    lines = Path(path).read_text().splitlines()

    def fail(msg: str, lineno: int):
        raise VolumeError(f"{path}:{lineno}: {msg}")

    if not lines or lines[0].strip() != "TET1":
        fail("missing TET1 header", 1)
    try:
        nv, nt = (int(x) for x in lines[1].split())
    except (ValueError, IndexError):
        fail("bad count line", 2)
    pos = 2
    need = pos + nv + nt + 2 + 2 * nt
    if len(lines) < need:
        fail(f"file truncated: {len(lines)} lines, expected at least {need}", len(lines))
    try:
        verts = np.array([[float(x) for x in lines[pos + i].split()] for i in range(nv)]).reshape(nv, 3)
        pos += nv
        rows = [lines[pos + i].split() for i in range(nt)]
        if any(r[0] != "4" or len(r) != 5 for r in rows):
            fail("tet lines must read '4 i j k l'", pos + 1)
        tets = np.array([[int(x) for x in r[1:]] for r in rows], dtype=np.int64).reshape(nt, 4)
        pos += nt
    except ValueError as exc:
        fail(str(exc), pos + 1)
    if tets.size and (tets.min() < 0 or tets.max() >= nv):
        fail("tet vertex index out of range", pos)
    if lines[pos].strip() != "#REGION":
        fail("expected #REGION", pos + 1)
    region = np.array([-1 if s.strip() == "NONE" else int(_parse_region(s.strip())) for s in lines[pos + 1: pos + 1 + nt]], dtype=np.int8)
    pos += 1 + nt
    if lines[pos].strip() != "#FIBER":
        fail("expected #FIBER", pos + 1)
    fiber = np.array([[float(x) for x in s.split()] for s in lines[pos + 1: pos + 1 + nt]]).reshape(nt, 3)
    pos += 1 + nt
    lat = None
    if pos < len(lines) and lines[pos].strip() == "#LAT":
        vals = lines[pos + 1: pos + 1 + nv]
        if len(vals) != nv:
            fail("#LAT block truncated", len(lines))
        lat = np.array([float(s) for s in vals])
    return TetMesh(verts, tets, region, fiber), lat


def box_tetmesh(size: Sequence[float], cells: Sequence[int], origin: Sequence[float] = (0.0, 0.0, 0.0)) -> TetMesh:
    """Structured box split into 6 tets per cell (Kuhn split, conforming).
    Region RA and fiber (1, 0, 0) everywhere."""
    nx, ny, nz = (int(c) for c in cells)
    axes = [np.linspace(o, o + s, n + 1) for o, s, n in zip(origin, size, (nx, ny, nz))]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    verts = np.column_stack([gx.ravel(), gy.ravel(), gz.ravel()])

    def vid(i, j, k):
        return (i * (ny + 1) + j) * (nz + 1) + k

    i, j, k = (a.ravel() for a in np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij"))
    corner = [vid(i + (b & 1), j + ((b >> 1) & 1), k + ((b >> 2) & 1)) for b in range(8)]
    # the six monotone lattice paths from corner 0 to corner 7
    paths = [(1, 3), (1, 5), (2, 3), (2, 6), (4, 5), (4, 6)]
    tets = np.concatenate([np.column_stack([corner[0], corner[a], corner[b], corner[7]]) for a, b in paths])
    vol = signed_volumes(verts, tets)
    tets[vol < 0] = tets[vol < 0][:, [1, 0, 2, 3]]
    nt = tets.shape[0]
    return TetMesh(verts, tets, np.zeros(nt, dtype=np.int8), np.tile([1.0, 0.0, 0.0], (nt, 1)))

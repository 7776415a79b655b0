"""Synthetic bi-atrial phantom and planted-mode corpora.

The phantom is a star-shaped surface around the origin: a smooth union of
two ellipsoidal lobes (RA at -x, LA at +x) with Gaussian bumps for the two
appendages and four pulmonary-vein stubs. Axes: +x patient left,
+y posterior, +z superior. Every quantity is a function of the unit
direction, so a shape can be resampled on any set of directions.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np
from numpy.typing import NDArray

from .mesh import (
    Label,
    RigidTransform,
    SurfaceMesh,
    fibonacci_directions,
    rotation_about_axis,
    save_mesh,
    sphere_triangulation,
)


def _unit(v) -> NDArray:
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v)


@dataclass(frozen=True)
class Lobe:
    center: tuple[float, float, float]
    radii: tuple[float, float, float]


@dataclass(frozen=True)
class Bump:
    direction: tuple[float, float, float]
    height: float  # mm
    width: float  # rad
    label: Label


@dataclass(frozen=True)
class PhantomGeometry:
    ra: Lobe = Lobe((-16.0, -4.0, 0.0), (26.0, 24.0, 27.0))
    la: Lobe = Lobe((16.0, 6.0, 0.0), (28.0, 24.0, 22.0))
    smoothing: float = 0.2  # 1/mm, sharpness of the soft union
    bumps: tuple[Bump, ...] = (
        Bump((-0.45, -0.65, 0.60), 12.0, 0.35, Label.RAA),
        Bump((0.55, -0.60, 0.55), 12.0, 0.35, Label.LAA),
        Bump((0.55, 0.70, 0.45), 10.0, 0.24, Label.LPV),
        Bump((0.60, 0.70, -0.25), 10.0, 0.24, Label.LPV),
        Bump((0.15, 0.90, 0.40), 10.0, 0.24, Label.RPV),
        Bump((0.15, 0.92, -0.25), 10.0, 0.24, Label.RPV),
    )
    label_threshold: float = 0.3
    scale: float = 1.0


def _ray_ellipsoid(u: NDArray, lobe: Lobe) -> NDArray:
    c = np.asarray(lobe.center)
    a = np.asarray(lobe.radii)
    A = ((u / a) ** 2).sum(axis=1)
    B = (u * c / a**2).sum(axis=1)
    C = ((c / a) ** 2).sum() - 1.0
    if C >= 0:
        raise ValueError("origin must lie inside every lobe")
    return (B + np.sqrt(B * B - A * C)) / A


def bump_weights(u: NDArray, geom: PhantomGeometry) -> NDArray:
    """(n_dirs, n_bumps) Gaussian weights in [0, 1]."""
    out = np.empty((u.shape[0], len(geom.bumps)))
    for k, b in enumerate(geom.bumps):
        cos = u @ _unit(b.direction)
        out[:, k] = np.exp(-(1.0 - cos) / (1.0 - np.cos(b.width)))
    return out


def radial_profile(u: NDArray, geom: PhantomGeometry) -> NDArray:
    r1 = _ray_ellipsoid(u, geom.ra)
    r2 = _ray_ellipsoid(u, geom.la)
    k = geom.smoothing
    m = np.maximum(r1, r2)
    r = m + np.log(np.exp(k * (r1 - m)) + np.exp(k * (r2 - m))) / k
    w = bump_weights(u, geom)
    r = r + w @ np.array([b.height for b in geom.bumps])
    return r * geom.scale


def direction_labels(u: NDArray, geom: PhantomGeometry) -> NDArray[np.int8]:
    w = bump_weights(u, geom)
    labels = np.full(u.shape[0], int(Label.BODY), dtype=np.int8)
    best = w.argmax(axis=1)
    hit = w[np.arange(len(u)), best] > geom.label_threshold
    labels[hit] = [int(geom.bumps[k].label) for k in best[hit]]
    return labels


def atrial_phantom(
    n_vertices: int = 2000,
    geom: PhantomGeometry = PhantomGeometry(),
    directions: Optional[NDArray] = None,
) -> SurfaceMesh:
    """Labelled closed phantom surface sampled on Fibonacci directions."""
    u = fibonacci_directions(n_vertices) if directions is None else np.asarray(directions, dtype=float)
    tris = sphere_triangulation(u)
    verts = u * radial_profile(u, geom)[:, None]
    return SurfaceMesh(verts, tris, direction_labels(u, geom))


def random_rotation(rng: np.random.Generator, max_angle_deg: float) -> NDArray:
    axis = _unit(rng.normal(size=3))
    angle = np.radians(rng.uniform(0.0, max_angle_deg))
    return rotation_about_axis(axis, angle)


def random_rigid(rng: np.random.Generator, max_angle_deg: float, max_translation: float) -> RigidTransform:
    """Rotation up to max_angle_deg about a random axis; translation of random
    direction with length up to max_translation (mm)."""
    rot = random_rotation(rng, max_angle_deg)
    t = _unit(rng.normal(size=3)) * rng.uniform(0.0, max_translation)
    return RigidTransform(rot, t)


# -- planted modes -----------------------------------------------------------


def raw_mode_fields(u: NDArray, geom: PhantomGeometry) -> NDArray:
    """Smooth, non-rigid displacement fields, shape (n_fields, n_dirs, 3)."""
    x = u * radial_profile(u, geom)[:, None]
    w = bump_weights(u, geom)
    app = w[:, [i for i, b in enumerate(geom.bumps) if b.label in (Label.LAA, Label.RAA)]].sum(axis=1)
    veins = w[:, [i for i, b in enumerate(geom.bumps) if b.label in (Label.LPV, Label.RPV)]].sum(axis=1)
    s = geom.scale
    zero = np.zeros(len(u))
    fields = [
        x,  # overall size
        x * np.tanh(x[:, :1] / (15.0 * s)),  # LA versus RA size
        u * app[:, None] * 10.0,  # appendage prominence
        np.column_stack([zero, zero, x[:, 2]]),  # superior-inferior stretch
        np.column_stack([zero, x[:, 2] * veins, zero]),  # vein tilt
        np.column_stack([x[:, 0] ** 2, zero, zero]) / (30.0 * s),
        np.column_stack([zero, x[:, 0] * x[:, 1], zero]) / (30.0 * s),
        np.column_stack([zero, zero, x[:, 1] ** 2]) / (30.0 * s),
    ]
    return np.stack(fields)


def planted_modes(u_base: NDArray, geom: PhantomGeometry, k: int) -> tuple[NDArray, NDArray]:
    """Orthogonal modes on the base sampling, each scaled to unit RMS
    per-vertex displacement, plus the mixing matrix that reproduces them from
    raw fields on any other sampling."""
    raw = raw_mode_fields(u_base, geom)
    if k > raw.shape[0]:
        raise ValueError(f"at most {raw.shape[0]} planted modes are available")
    m = u_base.shape[0]
    f = raw[:k].reshape(k, -1).T  # (3M, k)
    q, r = np.linalg.qr(f)
    mix = np.linalg.inv(r) * np.sqrt(m)
    return (q * np.sqrt(m)).T.reshape(k, m, 3), mix


def modes_on(u: NDArray, geom: PhantomGeometry, mix: NDArray) -> NDArray:
    k = mix.shape[0]
    raw = raw_mode_fields(u, geom)[:k]
    return np.einsum("kmd,kj->jmd", raw, mix)


@dataclass(frozen=True)
class SyntheticCorpusSpec:
    n_instances: int = 12
    n_vertices: int = 2000
    variances: tuple[float, ...] = (16.0, 9.0, 4.0)  # mm^2 mean squared per-vertex displacement
    noise_sigma: float = 0.3  # mm, per coordinate
    max_rotation_deg: float = 0.0
    max_translation: float = 0.0
    seed: int = 0
    resample: bool = False  # sample each instance on its own vertex set
    whiten: bool = True  # force the drawn coefficients to unit sample covariance
    scale: float = 1.0

    def __post_init__(self) -> None:
        if len(self.variances) >= self.n_instances:
            raise ValueError("need fewer planted modes than instances")
        if any(v <= 0 for v in self.variances) or list(self.variances) != sorted(self.variances, reverse=True):
            raise ValueError("variances must be positive and descending")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")


@dataclass
class SyntheticCorpus:
    reference: SurfaceMesh
    meshes: list[SurfaceMesh]
    clean: list[SurfaceMesh]  # noise-free, unperturbed, on the reference topology
    coefficients: NDArray  # (N, K), standardized
    modes: NDArray  # (K, M, 3) on the reference topology
    transforms: list[RigidTransform]
    spec: SyntheticCorpusSpec = field(default_factory=SyntheticCorpusSpec)

    def save(self, directory: Union[str, Path]) -> list[Path]:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        save_mesh(self.reference, d / "reference.off")
        paths = []
        for i, m in enumerate(self.meshes):
            p = d / f"shape_{i:03d}.off"
            save_mesh(m, p)
            paths.append(p)
        truth = {
            "spec": asdict(self.spec),
            "coefficients": self.coefficients.tolist(),
            "transforms": [
                {"rotation": t.rotation.tolist(), "translation": t.translation.tolist()} for t in self.transforms
            ],
        }
        (d / "ground_truth.json").write_text(json.dumps(truth, indent=1))
        np.save(d / "ground_truth_modes.npy", self.modes)
        return paths


def _whiten(r: NDArray) -> NDArray:
    r = r - r.mean(axis=0)
    cov = r.T @ r / (r.shape[0] - 1)
    evals, evecs = np.linalg.eigh(cov)
    return r @ evecs @ np.diag(evals**-0.5) @ evecs.T


def synth_corpus(spec: SyntheticCorpusSpec, geom: Optional[PhantomGeometry] = None) -> SyntheticCorpus:
    if geom is None:
        geom = PhantomGeometry(scale=spec.scale)
    rng = np.random.default_rng(spec.seed)
    u_base = fibonacci_directions(spec.n_vertices)
    reference = atrial_phantom(spec.n_vertices, geom, u_base)
    k = len(spec.variances)
    n = spec.n_instances
    if k:
        modes, mix = planted_modes(u_base, geom, k)
        coeffs = rng.normal(size=(n, k))
        if spec.whiten:
            coeffs = _whiten(coeffs)
    else:
        modes, mix = np.zeros((0, spec.n_vertices, 3)), np.zeros((0, 0))
        coeffs = np.zeros((n, 0))
    amp = np.sqrt(np.asarray(spec.variances, dtype=float))
    meshes, clean, transforms = [], [], []
    for i in range(n):
        disp = np.einsum("k,kmd->md", coeffs[i] * amp, modes) if k else 0.0
        clean.append(reference.with_vertices(reference.vertices + disp))
        if spec.resample:
            rot = random_rotation(rng, 180.0)
            u = fibonacci_directions(spec.n_vertices + int(rng.integers(-50, 51))) @ rot.T
            base = atrial_phantom(len(u), geom, u)
            d = np.einsum("k,kmd->md", coeffs[i] * amp, modes_on(u, geom, mix)) if k else 0.0
            shape = base.with_vertices(base.vertices + d)
        else:
            shape = clean[-1]
        pts = shape.vertices + rng.normal(scale=spec.noise_sigma, size=shape.vertices.shape)
        if spec.max_rotation_deg > 0 or spec.max_translation > 0:
            t = random_rigid(rng, spec.max_rotation_deg, spec.max_translation)
        else:
            t = RigidTransform.identity()
        transforms.append(t)
        meshes.append(shape.with_vertices(t.apply(pts)))
    return SyntheticCorpus(reference, meshes, clean, coeffs, modes, transforms, spec)

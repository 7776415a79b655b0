"""Gaussian-process morphable models for dense correspondence.

A model is a low-rank basis of deformation fields on a reference mesh.
Kernels are scalar Gaussians applied identically to x, y and z, so every
scalar Karhunen-Loeve term contributes three vector modes.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.optimize import minimize
from scipy.spatial.distance import cdist

from .align import NearestNeighbors
from .container import TYPE_GP, TYPE_PV, ContainerData, ContainerError, read_container, write_container
from .mesh import Label, SurfaceMesh, pv_groups, vertex_adjacency

_LOGGER = logging.getLogger(__name__)


class GpBuildError(ValueError):
    pass


class FitDivergenceError(RuntimeError):
    def __init__(self, message: str, trace: Sequence[float]):
        super().__init__(f"{message}; objective trace: {list(trace)[-10:]}")
        self.trace = list(trace)


def gaussian_kernel(x: ArrayLike, x2: ArrayLike, s: float, l: float) -> float:
    """s * exp(-|x - x2|^2 / l^2)."""
    d = np.asarray(x, dtype=float) - np.asarray(x2, dtype=float)
    return float(s * np.exp(-float(d @ d) / (l * l)))


@dataclass(frozen=True)
class KernelTerm:
    scale: float  # mm^2
    length: float  # mm
    labels: Optional[tuple[Label, ...]] = None  # None: every vertex

    def __post_init__(self) -> None:
        if self.scale <= 0 or self.length <= 0:
            raise ValueError("kernel scale and length must be positive")

    def mask(self, mesh: SurfaceMesh) -> NDArray[np.bool_]:
        if self.labels is None:
            return np.ones(mesh.n_vertices, dtype=bool)
        if mesh.labels is None:
            raise GpBuildError("masked kernel term needs a labelled reference")
        return mesh.label_mask(*self.labels)


@dataclass(frozen=True)
class KernelSpec:
    terms: tuple[KernelTerm, ...]

    def matrix(self, mesh: SurfaceMesh, rows: Optional[NDArray] = None, cols: Optional[NDArray] = None) -> NDArray:
        """Scalar kernel matrix between vertex subsets (all vertices by default)."""
        r = np.arange(mesh.n_vertices) if rows is None else rows
        c = np.arange(mesh.n_vertices) if cols is None else cols
        d2 = cdist(mesh.vertices[r], mesh.vertices[c], "sqeuclidean")
        out = np.zeros_like(d2)
        for t in self.terms:
            m = t.mask(mesh)
            out += t.scale * np.exp(-d2 / t.length**2) * np.outer(m[r], m[c])
        return out

    def trace(self, mesh: SurfaceMesh) -> float:
        return float(sum(t.scale * t.mask(mesh).sum() for t in self.terms))


BODY_KERNEL = KernelSpec((KernelTerm(50.0, 40.0),))
APPENDAGE_KERNEL = KernelSpec((KernelTerm(20.0, 20.0, (Label.LAA, Label.RAA)),))


@dataclass(frozen=True)
class GpModel:
    """Deformation basis: vertex m moves by sum_k alpha_k sqrt(lambda_k) phi_k(m)."""

    reference: SurfaceMesh
    eigenvalues: NDArray  # (rank,) mm^2, non-increasing
    eigenfunctions: NDArray  # (rank, M, 3), orthonormal under the plain vertex sum
    captured_variance: float = float("nan")
    kind: str = "gp"

    @property
    def rank(self) -> int:
        return int(self.eigenvalues.shape[0])

    def basis(self) -> NDArray:
        """(3M, rank) matrix of scaled eigenfunctions."""
        return (self.eigenfunctions * np.sqrt(self.eigenvalues)[:, None, None]).reshape(self.rank, -1).T

    def with_reference(self, mesh: SurfaceMesh) -> "GpModel":
        if mesh.n_vertices != self.reference.n_vertices:
            raise ValueError("reference vertex count changed")
        return replace(self, reference=mesh)


def _landmarks(candidates: NDArray, n_landmarks: int, seed: int) -> NDArray:
    if n_landmarks >= candidates.size:
        return candidates
    rng = np.random.default_rng(seed)
    return np.sort(rng.choice(candidates, size=n_landmarks, replace=False))


def nystrom_eigenpairs(
    reference: SurfaceMesh, spec: KernelSpec, rank: int, n_landmarks: int = 1000, seed: int = 0
) -> tuple[NDArray, NDArray]:
    """Leading eigenpairs of the scalar kernel matrix over all vertices.

    Nystrom factor K ~ B B^T built from the landmark block, then an exact
    eigendecomposition of that factor (thin SVD), which yields orthonormal
    eigenvectors on the full vertex set.
    """
    support = np.zeros(reference.n_vertices, dtype=bool)
    for t in spec.terms:
        support |= t.mask(reference)
    z = _landmarks(np.flatnonzero(support), n_landmarks, seed)
    w = spec.matrix(reference, z, z)
    lam, u = np.linalg.eigh(w)
    tr = float(np.trace(w))
    if lam[0] < -1e-8 * tr:
        raise GpBuildError(f"kernel block is not positive semi-definite (worst eigenvalue {lam[0]:.3g})")
    keep = lam > 1e-10 * lam[-1]
    if rank > int(keep.sum()):
        raise GpBuildError(f"rank {rank} exceeds the {int(keep.sum())} usable landmark eigenpairs")
    c = spec.matrix(reference, None, z)
    b = c @ (u[:, keep] / np.sqrt(lam[keep]))
    q, s, _ = np.linalg.svd(b, full_matrices=False)
    q, s = q[:, :rank], s[:rank]
    q[~support] = 0.0  # the SVD leaves rounding noise on rows that are exactly zero in b
    # deterministic sign: largest-magnitude entry positive
    flip = np.sign(q[np.abs(q).argmax(axis=0), np.arange(rank)])
    return s**2, q * flip


def build_low_rank_gp(
    reference: SurfaceMesh, spec: KernelSpec, rank: int, n_landmarks: int = 1000, seed: int = 0
) -> GpModel:
    """Low-rank vector GP with `rank` scalar KL terms, i.e. 3*rank modes."""
    if rank < 1:
        raise GpBuildError("rank must be >= 1")
    lam, q = nystrom_eigenpairs(reference, spec, rank, n_landmarks, seed)
    m = reference.n_vertices
    phi = np.zeros((3 * rank, m, 3))
    for d in range(3):
        phi[d::3, :, d] = q.T
    captured = float(lam.sum() / spec.trace(reference))
    _LOGGER.info("gp: rank %d, captured variance %.4f", rank, captured)
    return GpModel(reference, np.repeat(lam, 3), phi, captured)


def _ostium(mesh: SurfaceMesh, group: NDArray, adj) -> NDArray:
    inside = np.zeros(mesh.n_vertices, dtype=bool)
    inside[group] = True
    outside_neighbours = np.asarray(adj[group][:, ~inside].sum(axis=1)).ravel()
    return group[outside_neighbours > 0]


def build_pv_orientation_model(
    reference: SurfaceMesh,
    unit_angle: float = 0.04,
    ap_direction: ArrayLike = (0.0, 1.0, 0.0),
) -> GpModel:
    """Rank-4 model whose modes tilt one vein each in the anterior-posterior plane.

    Mode k is the infinitesimal rotation of vein k about its ostium centroid
    by `unit_angle` radians per unit coefficient; all other vertices are fixed.
    Lengths change only at second order, by sqrt(1 + (alpha*unit_angle)^2) - 1.
    """
    if reference.labels is None:
        raise GpBuildError("PV model needs a labelled reference")
    groups = pv_groups(reference)
    if len(groups) != 4:
        raise GpBuildError(f"expected 4 vein groups from LPV/RPV labels, found {len(groups)}")
    adj = vertex_adjacency(reference.n_vertices, reference.triangles)
    ap = np.asarray(ap_direction, dtype=float)
    ap = ap / np.linalg.norm(ap)
    fields, lams = [], []
    for g in groups:
        c = reference.vertices[_ostium(reference, g, adj)].mean(axis=0)
        axis = reference.vertices[g].mean(axis=0) - c
        normal = np.cross(axis, ap)
        if np.linalg.norm(normal) < 1e-9 * np.linalg.norm(axis):
            raise GpBuildError("vein axis is parallel to the anterior-posterior direction")
        normal /= np.linalg.norm(normal)
        f = np.zeros((reference.n_vertices, 3))
        f[g] = unit_angle * np.cross(normal, reference.vertices[g] - c)
        lam = float((f * f).sum())
        fields.append(f / np.sqrt(lam))
        lams.append(lam)
    order = np.argsort(lams, kind="stable")[::-1]
    return GpModel(reference, np.asarray(lams)[order], np.stack(fields)[order], 1.0, kind="pv")


def gp_deform(model: GpModel, alpha: ArrayLike) -> SurfaceMesh:
    a = np.asarray(alpha, dtype=float).reshape(-1)
    if a.shape[0] != model.rank:
        raise ValueError(f"expected {model.rank} coefficients, got {a.shape[0]}")
    disp = np.einsum("k,kmd->md", a * np.sqrt(model.eigenvalues), model.eigenfunctions)
    return model.reference.with_vertices(model.reference.vertices + disp)


@dataclass
class FitResult:
    coefficients: NDArray
    deformed_reference: SurfaceMesh
    mse: float  # mean squared nearest-neighbour distance to the target, mm^2
    iterations: int
    objective_history: list[float] = field(default_factory=list)
    restarts: int = 0


def fit_to_target(
    model: GpModel,
    target: SurfaceMesh,
    reg_weight: float = 1e-3,
    max_outer: int = 20,
    max_inner: int = 500,
    gtol: float = 1e-6,
    initial: Optional[ArrayLike] = None,
) -> FitResult:
    """Fit coefficients so the deformed reference lies on the target.

    Minimizes mean_m |y_m(alpha) - t_nn(m)|^2 + reg_weight |alpha|^2 with
    L-BFGS. Pairing is re-evaluated at every objective evaluation, so the
    gradient is that of the true nearest-neighbour objective wherever the
    pairing is locally constant. Variables are scaled by the exact diagonal
    of the fixed-pairing Hessian. L-BFGS is restarted (at most `max_outer`
    runs) while a run still changes the pairing.
    """
    nn = NearestNeighbors(target)
    basis = model.basis()
    ref = model.reference.vertices.reshape(-1)
    m = model.reference.n_vertices
    scale = 1.0 / np.sqrt(2.0 * model.eigenvalues / m + 2.0 * reg_weight)
    alpha = np.zeros(model.rank) if initial is None else np.asarray(initial, dtype=float).copy()
    if alpha.shape != (model.rank,):
        raise ValueError(f"expected {model.rank} initial coefficients")
    history: list[float] = []

    def pairing(a: NDArray) -> NDArray:
        return nn.query((ref + basis @ a).reshape(-1, 3))[1]

    def objective(b: NDArray) -> tuple[float, NDArray]:
        a = b * scale
        y = ref + basis @ a
        _, idx = nn.query(y.reshape(-1, 3))
        r = y - nn.points[idx].reshape(-1)
        f = float(r @ r) / m + reg_weight * float(a @ a)
        if not np.isfinite(f):
            raise FitDivergenceError("non-finite objective", history)
        g = (2.0 / m) * (basis.T @ r) + 2.0 * reg_weight * a
        return f, g * scale

    history.append(objective(alpha / scale)[0])
    iterations = 0
    restarts = 0
    for restarts in range(1, max_outer + 1):
        before = pairing(alpha)
        res = minimize(
            objective,
            alpha / scale,
            jac=True,
            method="L-BFGS-B",
            callback=lambda intermediate_result: history.append(float(intermediate_result.fun)),
            options={"maxiter": max_inner, "gtol": gtol, "ftol": 1e-15, "maxcor": 20},
        )
        if not np.all(np.isfinite(res.x)):
            raise FitDivergenceError("optimizer returned non-finite coefficients", history)
        alpha = res.x * scale
        iterations += int(res.nit)
        if np.array_equal(pairing(alpha), before):
            break
    deformed = gp_deform(model, alpha)
    d, _ = nn.query(deformed.vertices)
    return FitResult(alpha, deformed, float(np.mean(d * d)), iterations, history, restarts)


def establish_correspondence(
    models: Sequence[GpModel], target: SurfaceMesh, reg_weight: float = 1e-3, **fit_kwargs
) -> tuple[SurfaceMesh, list[FitResult]]:
    """Fit the models in order, each starting from the previous stage's output."""
    current = models[0].reference
    results = []
    for model in models:
        res = fit_to_target(model.with_reference(current), target, reg_weight, **fit_kwargs)
        current = res.deformed_reference
        results.append(res)
    return current, results


def default_models(reference: SurfaceMesh, body_rank: int = 100, appendage_rank: int = 50, n_landmarks: int = 1000, seed: int = 0) -> list[GpModel]:
    """Body, appendage and PV models in fitting order."""
    models = [build_low_rank_gp(reference, BODY_KERNEL, body_rank, n_landmarks, seed)]
    if reference.labels is not None and reference.label_mask(Label.LAA, Label.RAA).any():
        models.append(build_low_rank_gp(reference, APPENDAGE_KERNEL, appendage_rank, n_landmarks, seed))
    if reference.labels is not None and reference.label_mask(Label.LPV, Label.RPV).any():
        models.append(build_pv_orientation_model(reference))
    return models


def save_gp(model: GpModel, path) -> None:
    """Write a GP model to the shared SSMC1 container (reference as the mean)."""
    ref = model.reference
    write_container(
        path,
        ContainerData(
            TYPE_PV if model.kind == "pv" else TYPE_GP, 0, ref.vertices.reshape(-1), model.eigenvalues,
            model.eigenfunctions.reshape(model.rank, -1), ref.triangles, ref.labels, 0.0, model.captured_variance,
        ),
    )


def load_gp(path) -> GpModel:
    d = read_container(path)
    if d.type_tag not in (TYPE_GP, TYPE_PV):
        raise ContainerError(f"{path}: type tag {d.type_tag} is not a GP model")
    ref = SurfaceMesh(d.mean.reshape(-1, 3), d.triangles, d.labels)
    return GpModel(ref, d.eigenvalues, d.eigenvectors.reshape(len(d.eigenvalues), -1, 3), d.extra,
                   kind="pv" if d.type_tag == TYPE_PV else "gp")

"""PCA point-distribution model: build, project, reconstruct, sample, save."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .container import TYPE_PDM, ContainerData, read_container, write_container
from .mesh import SurfaceMesh, from_shape_vector


class PdmError(ValueError):
    pass


@dataclass(frozen=True)
class PdmModel:
    """s = mean + sum_k r_k sqrt(sigma2_k) v_k."""

    mean: NDArray  # (3M,)
    eigenvalues: NDArray  # (K,) non-increasing, >= 0
    eigenvectors: NDArray  # (K, 3M) orthonormal rows
    triangles: NDArray
    labels: Optional[NDArray] = None
    n_samples: int = 0
    divisor: float = 0.0  # covariance divisor used at build time

    @property
    def n_modes(self) -> int:
        return int(self.eigenvalues.shape[0])

    @property
    def n_vertices(self) -> int:
        return self.mean.shape[0] // 3

    def mesh(self, coords: Optional[ArrayLike] = None) -> SurfaceMesh:
        return from_shape_vector(self.mean if coords is None else coords, self.triangles, self.labels)

    def truncated(self, k: int) -> "PdmModel":
        return PdmModel(self.mean, self.eigenvalues[:k], self.eigenvectors[:k], self.triangles, self.labels, self.n_samples, self.divisor)


def build_pdm(
    corpus: Union[Sequence[ArrayLike], NDArray],
    triangles: Optional[ArrayLike] = None,
    labels: Optional[ArrayLike] = None,
    vertex_mask: Optional[ArrayLike] = None,
    rel_tol: float = 1e-12,
) -> PdmModel:
    """PCA of shape vectors in correspondence.

    The eigenproblem is solved on the N x N Gram matrix of the centred data
    (3M >> N). Covariance divisor N-1. Modes whose eigenvalue is below
    rel_tol times the largest are dropped, so a model never has more than
    N-1 modes. `vertex_mask` keeps only the selected vertices; triangles
    touching a removed vertex are dropped and the rest re-indexed.
    """
    vectors = [np.asarray(s, dtype=np.float64).reshape(-1) for s in corpus]
    if len({v.shape[0] for v in vectors}) > 1:
        raise PdmError("shape vectors have different lengths")
    n = len(vectors)
    if n < 2:
        raise PdmError("need at least two shapes")
    x = np.stack(vectors)
    if x.shape[1] % 3:
        raise PdmError("shape vector length is not a multiple of 3")
    tris = np.zeros((0, 3), dtype=np.int64) if triangles is None else np.asarray(triangles, dtype=np.int64).reshape(-1, 3)
    lab = None if labels is None else np.asarray(labels)
    if vertex_mask is not None:
        keep = np.asarray(vertex_mask, dtype=bool)
        x = x.reshape(n, -1, 3)[:, keep].reshape(n, -1)
        new_index = np.full(keep.size, -1)
        new_index[keep] = np.arange(keep.sum())
        tris = new_index[tris[np.all(keep[tris], axis=1)]] if tris.size else tris
        lab = None if lab is None else lab[keep]
    mean = x.mean(axis=0)
    xc = x - mean
    gram = xc @ xc.T / (n - 1)
    lam, u = np.linalg.eigh(gram)
    lam, u = lam[::-1], u[:, ::-1]
    top = max(lam[0], 0.0)
    keep_modes = (lam > rel_tol * top) if top > 0 else np.zeros(n, dtype=bool)
    keep_modes[n - 1:] = False
    lam, u = lam[keep_modes], u[:, keep_modes]
    vecs = (xc.T @ u / np.sqrt((n - 1) * lam)).T if lam.size else np.zeros((0, x.shape[1]))
    if lam.size:
        # one Gram-Schmidt pass against round-off in the dual-space lift
        q, r = np.linalg.qr(vecs.T)
        vecs = (q * np.sign(np.diag(r))).T
        big = np.abs(vecs).argmax(axis=1)
        vecs *= np.sign(vecs[np.arange(len(lam)), big])[:, None]
    return PdmModel(mean, lam, vecs, tris, lab, n, float(n - 1))


def _check_length(model: PdmModel, shape: NDArray) -> None:
    if shape.shape[0] != model.mean.shape[0]:
        raise PdmError(f"shape length {shape.shape[0]} does not match model length {model.mean.shape[0]}")


def project(model: PdmModel, shape: ArrayLike, k_modes: Optional[int] = None) -> NDArray:
    """Least-squares standardized coefficients of `shape` in the first k modes."""
    s = np.asarray(shape, dtype=np.float64).reshape(-1)
    _check_length(model, s)
    k = model.n_modes if k_modes is None else k_modes
    if not 0 <= k <= model.n_modes:
        raise PdmError(f"k_modes {k} outside [0, {model.n_modes}]")
    return (model.eigenvectors[:k] @ (s - model.mean)) / np.sqrt(model.eigenvalues[:k])


def reconstruct(model: PdmModel, r: ArrayLike, k_modes: Optional[int] = None) -> NDArray:
    coeffs = np.asarray(r, dtype=np.float64).reshape(-1)
    k = min(model.n_modes, coeffs.size) if k_modes is None else k_modes
    if not 0 <= k <= model.n_modes:
        raise PdmError(f"k_modes {k} exceeds the {model.n_modes} available modes")
    if coeffs.size < k:
        raise PdmError(f"{coeffs.size} coefficients given for {k} modes")
    if not np.all(np.isfinite(coeffs[:k])):
        raise PdmError("non-finite coefficients")
    return model.mean + (coeffs[:k] * np.sqrt(model.eigenvalues[:k])) @ model.eigenvectors[:k]


def empirical_bounds(model: PdmModel, corpus: Sequence[ArrayLike]) -> NDArray:
    """Per-mode [min, max] of the training coefficients."""
    r = np.stack([project(model, s) for s in corpus])
    return np.column_stack([r.min(axis=0), r.max(axis=0)])


def _bounds_array(model: PdmModel, bounds) -> NDArray:
    b = np.asarray(bounds, dtype=np.float64)
    if b.shape == (2,):
        b = np.tile(b, (model.n_modes, 1))
    if b.shape != (model.n_modes, 2):
        raise PdmError(f"bounds must be a pair or have shape ({model.n_modes}, 2)")
    if not np.all(np.isfinite(b)) or np.any(b[:, 0] > b[:, 1]):
        raise PdmError("bounds must be finite intervals")
    return b


def sample(model: PdmModel, rng_seed, bounds=(-3.0, 3.0)) -> tuple[NDArray, NDArray]:
    """Uniform coefficients within per-mode bounds, and the resulting shape."""
    b = _bounds_array(model, bounds)
    rng = np.random.default_rng(rng_seed)
    r = rng.uniform(b[:, 0], b[:, 1])
    return r, reconstruct(model, r)


def cumulative_variance(model: PdmModel) -> NDArray:
    c = np.cumsum(model.eigenvalues)
    if model.n_modes == 0 or c[-1] <= 0:
        raise PdmError("model has no variance")
    return c / c[-1]


def modes_for_variance(model: PdmModel, fraction: float) -> int:
    if not 0.0 < fraction <= 1.0:
        raise PdmError("fraction must be in (0, 1]")
    curve = cumulative_variance(model)
    return int(np.searchsorted(curve, fraction - 1e-15) + 1)


def save_pdm(model: PdmModel, path: Union[str, Path]) -> None:
    write_container(
        path,
        ContainerData(TYPE_PDM, model.n_samples, model.mean, model.eigenvalues, model.eigenvectors,
                      model.triangles, model.labels, model.divisor),
    )


def load_pdm(path: Union[str, Path]) -> PdmModel:
    d = read_container(path, TYPE_PDM)
    return PdmModel(d.mean, d.eigenvalues, d.eigenvectors, d.triangles, d.labels, d.n_samples, d.divisor)

"""SSMC1 binary container shared by PCA and GP models.

Layout (all little-endian)::

    b"SSMC1"
    header   <I version> <I type tag> <I n_samples> <I n_vertices> <I n_modes>
             <d covariance divisor> <I n_triangles> <B has_labels> <d extra>
    float64  mean          (3 * n_vertices)
    float64  eigenvalues   (n_modes)
    float64  eigenvectors  (n_modes * 3 * n_vertices, row-major)
    uint32   triangles     (3 * n_triangles)
    int8     labels        (n_vertices, only if has_labels)

`extra` is type specific (captured variance for GP models, 0 otherwise).
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np
from numpy.typing import NDArray

MAGIC = b"SSMC1"
VERSION = 1
TYPE_PDM = 1
TYPE_GP = 2
TYPE_PV = 3
_HEADER = struct.Struct("<IIIIIdIBd")


class ContainerError(ValueError):
    pass


@dataclass
class ContainerData:
    type_tag: int
    n_samples: int
    mean: NDArray
    eigenvalues: NDArray
    eigenvectors: NDArray  # (n_modes, 3M)
    triangles: NDArray
    labels: Optional[NDArray]
    divisor: float = 0.0
    extra: float = 0.0


def write_container(path: Union[str, Path], data: ContainerData) -> None:
    mean = np.ascontiguousarray(data.mean, dtype="<f8").reshape(-1)
    if mean.size % 3:
        raise ContainerError("mean length is not a multiple of 3")
    m = mean.size // 3
    ev = np.ascontiguousarray(data.eigenvalues, dtype="<f8").reshape(-1)
    vecs = np.ascontiguousarray(data.eigenvectors, dtype="<f8").reshape(ev.size, 3 * m)
    tris = np.ascontiguousarray(data.triangles, dtype="<u4").reshape(-1, 3)
    header = _HEADER.pack(
        VERSION, data.type_tag, data.n_samples, m, ev.size, float(data.divisor), tris.shape[0],
        int(data.labels is not None), float(data.extra),
    )
    parts = [MAGIC, header, mean.tobytes(), ev.tobytes(), vecs.tobytes(), tris.tobytes()]
    if data.labels is not None:
        parts.append(np.ascontiguousarray(data.labels, dtype="i1").tobytes())
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(parts))
    tmp.replace(path)


def read_container(path: Union[str, Path], expect_type: Optional[int] = None) -> ContainerData:
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC):
        raise ContainerError(f"{path}: not an SSMC1 container")
    off = len(MAGIC)
    if len(raw) < off + _HEADER.size:
        raise ContainerError(f"{path}: truncated header")
    version, tag, n_samples, m, k, divisor, nt, has_labels, extra = _HEADER.unpack_from(raw, off)
    off += _HEADER.size
    if version != VERSION:
        raise ContainerError(f"{path}: unsupported version {version}")
    if expect_type is not None and tag != expect_type:
        raise ContainerError(f"{path}: type tag {tag}, expected {expect_type}")
    expected = 8 * (3 * m + k + 3 * m * k) + 4 * 3 * nt + (m if has_labels else 0)
    if len(raw) - off != expected:
        raise ContainerError(
            f"{path}: header declares M={m}, modes={k}, triangles={nt} ({expected} payload bytes) "
            f"but file carries {len(raw) - off}"
        )

    def take(dtype: str, count: int) -> NDArray:
        nonlocal off
        a = np.frombuffer(raw, dtype=dtype, count=count, offset=off)
        off += a.nbytes
        return a.astype(dtype.lstrip("<"), copy=True)

    mean = take("<f8", 3 * m)
    ev = take("<f8", k)
    vecs = take("<f8", 3 * m * k).reshape(k, 3 * m)
    tris = take("<u4", 3 * nt).reshape(nt, 3).astype(np.int64)
    labels = take("i1", m) if has_labels else None
    if tris.size and tris.max() >= m:
        raise ContainerError(f"{path}: triangle index out of range")
    return ContainerData(tag, n_samples, mean, ev, vecs, tris, labels, divisor, extra)

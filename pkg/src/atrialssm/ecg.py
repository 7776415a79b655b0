"""Forward ECG: shifted action potentials, dipole summation, 12 leads, P-wave.

The volume conductor is infinite and homogeneous. Each element contributes
the current dipole -sigma * grad(Vm) * volume; dipoles are summed in cubic
bins of `sample_spacing` mm and placed at the volume-weighted bin centroid.
The potential at electrode e is

    phi(e) = sum_b  p_b . (e - c_b) / (4 pi |e - c_b|^3)

which is linear in Vm, so the whole projection is a precomputed
(n_electrodes x n_vertices) matrix applied to the Vm movie.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Mapping, Optional, Union

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .volume import TetMesh

log = logging.getLogger(__name__)

ELECTRODES = ("RA", "LA", "LL", "V1", "V2", "V3", "V4", "V5", "V6")
LEADS = ("I", "II", "III", "aVR", "aVL", "aVF", "V1", "V2", "V3", "V4", "V5", "V6")
MIN_ELECTRODE_DISTANCE = 10.0  # mm


class EcgError(ValueError):
    pass


def _data_path(name: str) -> Path:
    return Path(str(resources.files("atrialssm") / "data" / name))


# -- action potential --------------------------------------------------------


@dataclass(frozen=True)
class ApTemplate:
    dt: float  # ms
    samples: NDArray  # mV, samples[0] is the resting value

    def __post_init__(self) -> None:
        if not self.dt > 0:
            raise EcgError("template dt must be > 0")
        if self.samples.ndim != 1 or self.samples.size < 2:
            raise EcgError("template needs at least two samples")

    @property
    def rest(self) -> float:
        return float(self.samples[0])

    @property
    def duration(self) -> float:
        return self.dt * (self.samples.size - 1)

    @property
    def upstroke_index(self) -> int:
        return int(np.argmax(self.samples))

    def __call__(self, t: ArrayLike) -> NDArray:
        """Voltage at time t after activation; resting before 0 and after the end."""
        t = np.asarray(t, dtype=np.float64)
        times = np.arange(self.samples.size) * self.dt
        return np.interp(t, times, self.samples, left=self.rest, right=float(self.samples[-1]))

    def apd(self, fraction: float = 0.9) -> float:
        level = self.samples.max() - fraction * (self.samples.max() - self.rest)
        after = np.flatnonzero(self.samples[self.upstroke_index:] <= level)
        if after.size == 0:
            raise EcgError("template does not repolarize")
        return float((after[0] + self.upstroke_index) * self.dt)


def load_ap_template(path: Union[str, Path, None] = None) -> ApTemplate:
    """CSV with header time_ms,vm_mV at a fixed step; '#' lines are comments."""
    path = _data_path("ap_template.csv") if path is None else Path(path)
    rows = [ln for ln in Path(path).read_text().splitlines() if ln and not ln.startswith("#")]
    data = np.array([[float(x) for x in ln.split(",")] for ln in rows[1:]])
    steps = np.diff(data[:, 0])
    if steps.size == 0 or not np.allclose(steps, steps[0], rtol=1e-6, atol=1e-9):
        raise EcgError(f"{path}: template samples must be equally spaced")
    tmpl = ApTemplate(float(steps[0]), data[:, 1].copy())
    up = tmpl.samples[: tmpl.upstroke_index + 1]
    if np.any(np.diff(up) < 0):
        raise EcgError(f"{path}: upstroke is not monotone")
    return tmpl


def vm_movie(lat: ArrayLike, template: ApTemplate, duration: float, dt: float = 1.0) -> tuple[NDArray, NDArray]:
    """Vm(m, t) = template(t - lat_m). Returns (times, Vm) with Vm of shape
    (n_vertices, n_times)."""
    lat = np.asarray(lat, dtype=np.float64)
    if not np.all(np.isfinite(lat)):
        raise EcgError(f"{int((~np.isfinite(lat)).sum())} vertices have a non-finite activation time")
    if not dt > 0 or not duration > 0:
        raise EcgError("duration and dt must be > 0")
    if template.duration < duration - lat.min():
        raise EcgError(f"template covers {template.duration} ms but {duration - lat.min()} ms are needed")
    times = np.arange(0.0, duration + 0.5 * dt, dt)
    return times, template(times[None, :] - lat[:, None])


# -- electrodes ----------------------------------------------------------------


@dataclass(frozen=True)
class ElectrodeSet:
    positions: Mapping[str, tuple[float, float, float]]

    def __post_init__(self) -> None:
        missing = [n for n in ELECTRODES if n not in self.positions]
        if missing:
            raise EcgError(f"missing electrodes {missing}")
        pts = self.array()
        d = np.linalg.norm(pts[:, None] - pts[None], axis=2)
        if np.any(d[np.triu_indices(len(pts), 1)] == 0):
            raise EcgError("electrode positions must be distinct")

    def array(self) -> NDArray:
        return np.array([self.positions[n] for n in ELECTRODES], dtype=np.float64)

    def scaled_about(self, center: ArrayLike, factor: float) -> "ElectrodeSet":
        c = np.asarray(center, dtype=float)
        return ElectrodeSet({n: tuple(c + factor * (np.asarray(p) - c)) for n, p in self.positions.items()})


def load_electrodes(path: Union[str, Path, None] = None) -> ElectrodeSet:
    path = _data_path("electrodes.txt") if path is None else Path(path)
    pos = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 4:
            raise EcgError(f"{path}:{lineno}: expected 'name x y z'")
        pos[parts[0]] = tuple(float(x) for x in parts[1:])
    return ElectrodeSet(pos)


# -- forward projection ------------------------------------------------------------


def p1_gradients(vertices: NDArray, tets: NDArray) -> tuple[NDArray, NDArray]:
    """Gradients of the four linear hat functions per tet, (T, 4, 3), and volumes."""
    p = vertices[tets]
    e = p[:, 1:] - p[:, :1]  # (T, 3, 3) rows are edges
    inv = np.linalg.inv(e)  # columns are gradients of barycentric 1..3
    g = np.empty((len(tets), 4, 3))
    g[:, 1:] = np.transpose(inv, (0, 2, 1))
    g[:, 0] = -g[:, 1:].sum(axis=1)
    vol = np.abs(np.linalg.det(e)) / 6.0
    return g, vol


def bin_elements(centroids: NDArray, spacing: float) -> NDArray:
    """Bin index per element on a cubic grid of `spacing` mm."""
    keys = np.floor((centroids - centroids.min(axis=0)) / spacing).astype(np.int64)
    _, inverse = np.unique(keys, axis=0, return_inverse=True)
    return inverse.reshape(-1)


def lead_field(mesh: TetMesh, electrodes: ElectrodeSet, sample_spacing: float = 3.0, sigma: float = 1.0) -> NDArray:
    """(n_electrodes, n_vertices) matrix K with phi = K @ Vm."""
    e = electrodes.array()
    if sample_spacing <= 0:
        raise EcgError("sample_spacing must be > 0")
    lo, hi = mesh.vertices.min(axis=0), mesh.vertices.max(axis=0)
    inside = np.all((e >= lo) & (e <= hi), axis=1)
    if inside.any():
        raise EcgError(f"electrodes {[ELECTRODES[i] for i in np.flatnonzero(inside)]} lie inside the source bounding box")
    grads, vol = p1_gradients(mesh.vertices, mesh.tets)
    cent = mesh.centroids()
    b = bin_elements(cent, sample_spacing)
    nb = int(b.max()) + 1
    wsum = np.bincount(b, weights=vol, minlength=nb)
    cb = np.column_stack([np.bincount(b, weights=vol * cent[:, k], minlength=nb) for k in range(3)]) / wsum[:, None]
    r = e[:, None, :] - cb[None, :, :]  # (E, B, 3)
    dist = np.linalg.norm(r, axis=2)
    if dist.min() <= MIN_ELECTRODE_DISTANCE:
        raise EcgError(f"an electrode is {dist.min():.2f} mm from a source point (minimum {MIN_ELECTRODE_DISTANCE} mm)")
    lead = r / (4.0 * np.pi * dist[..., None] ** 3)  # (E, B, 3)
    # contribution of vertex i of tet K: -sigma * vol_K * grad_i . lead(e, bin(K))
    w = -sigma * vol[:, None, None] * grads  # (T, 4, 3)
    K = np.zeros((len(e), mesh.n_vertices))
    for j in range(len(e)):
        c = np.einsum("tik,tk->ti", w, lead[j, b])
        K[j] = np.bincount(mesh.tets.reshape(-1), weights=c.reshape(-1), minlength=mesh.n_vertices)
    return K


def surface_potentials(
    mesh: TetMesh, vm: NDArray, electrodes: ElectrodeSet, sample_spacing: float = 3.0, sigma: float = 1.0
) -> NDArray:
    """(9, n_times) potentials, rows in ELECTRODES order."""
    vm = np.asarray(vm, dtype=np.float64)
    if vm.shape[0] != mesh.n_vertices:
        raise EcgError("Vm movie must have one row per vertex")
    return lead_field(mesh, electrodes, sample_spacing, sigma) @ vm


# -- leads ----------------------------------------------------------------------------


@dataclass
class EcgTraceSet:
    times: NDArray  # ms
    leads: dict  # name -> (n_times,) signal
    onset: dict = field(default_factory=dict)
    offset: dict = field(default_factory=dict)

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0]) if self.times.size > 1 else 0.0

    def scaled(self, gain: float) -> "EcgTraceSet":
        return EcgTraceSet(self.times, {k: v * gain for k, v in self.leads.items()})

    def normalized(self) -> "EcgTraceSet":
        peak = max(float(np.abs(v).max()) for v in self.leads.values())
        return self.scaled(1.0 / peak) if peak > 0 else self

    def write_csv(self, path: Union[str, Path]) -> None:
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        with open(tmp, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["time_ms", *LEADS])
            for i, t in enumerate(self.times):
                w.writerow([repr(float(t)), *(repr(float(self.leads[k][i])) for k in LEADS)])
        tmp.replace(path)


def read_traces_csv(path: Union[str, Path]) -> EcgTraceSet:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, data = rows[0], np.array(rows[1:], dtype=np.float64)
    return EcgTraceSet(data[:, 0], {name: data[:, i] for i, name in enumerate(header) if i > 0})


def derive_12_leads(potentials: Union[NDArray, Mapping[str, ArrayLike]], times: Optional[ArrayLike] = None) -> EcgTraceSet:
    """Einthoven, Goldberger and Wilson leads from the nine electrode series."""
    if isinstance(potentials, Mapping):
        missing = [n for n in ELECTRODES if n not in potentials]
        if missing:
            raise EcgError(f"missing electrodes {missing}")
        phi = {n: np.asarray(potentials[n], dtype=np.float64) for n in ELECTRODES}
    else:
        arr = np.asarray(potentials, dtype=np.float64)
        if arr.shape[0] != len(ELECTRODES):
            raise EcgError(f"expected {len(ELECTRODES)} electrode rows, got {arr.shape[0]}")
        phi = dict(zip(ELECTRODES, arr))
    n = {v.shape for v in phi.values()}
    if len(n) != 1:
        raise EcgError("electrode series differ in length")
    ra, la, ll = phi["RA"], phi["LA"], phi["LL"]
    # (RA+LA+LL)/3 written relative to RA so equal inputs give exactly zero
    wct = ra + ((la - ra) + (ll - ra)) / 3.0
    leads = {
        "I": la - ra,
        "II": ll - ra,
        "aVR": ra - (la + ll) / 2.0,
        "aVL": la - (ra + ll) / 2.0,
        "aVF": ll - (ra + la) / 2.0,
    }
    leads["III"] = leads["II"] - leads["I"]  # exact Einthoven closure
    for v in ("V1", "V2", "V3", "V4", "V5", "V6"):
        leads[v] = phi[v] - wct
    length = next(iter(n))[0]
    t = np.arange(length, dtype=np.float64) if times is None else np.asarray(times, dtype=np.float64)
    return EcgTraceSet(t, {k: leads[k] for k in LEADS})


def annotate(traces: EcgTraceSet, threshold_frac: float = 0.05) -> EcgTraceSet:
    """Per-lead onset/offset: first and last sample where |signal| exceeds
    threshold_frac times that lead's peak |signal|. Flat leads are skipped."""
    if not 0 < threshold_frac < 1:
        raise EcgError("threshold_frac must be in (0, 1)")
    onset, offset = {}, {}
    for name, sig in traces.leads.items():
        a = np.abs(sig)
        peak = a.max()
        if peak == 0:
            continue
        above = np.flatnonzero(a > threshold_frac * peak)
        onset[name] = float(traces.times[above[0]])
        offset[name] = float(traces.times[above[-1]])
    if not onset:
        raise EcgError("all leads are zero")
    return EcgTraceSet(traces.times, traces.leads, onset, offset)


def p_wave_duration(traces: EcgTraceSet, threshold_frac: float = 0.05) -> float:
    """Latest offset minus earliest onset over all leads (ms)."""
    a = annotate(traces, threshold_frac)
    return max(a.offset.values()) - min(a.onset.values())


def simulate_ecg(
    mesh: TetMesh,
    lat: ArrayLike,
    electrodes: ElectrodeSet,
    template: ApTemplate,
    dt: float = 1.0,
    tail: float = 60.0,
    sample_spacing: float = 3.0,
    lead_matrix: Optional[NDArray] = None,
) -> EcgTraceSet:
    """Leads over [0, max(lat) + tail] ms, normalized to unit peak."""
    lat = np.asarray(lat, dtype=np.float64)
    times, vm = vm_movie(lat, template, float(lat.max()) + tail, dt)
    K = lead_field(mesh, electrodes, sample_spacing) if lead_matrix is None else lead_matrix
    return annotate(derive_12_leads(K @ vm, times).normalized())

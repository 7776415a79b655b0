"""Generalization, specificity and compactness of a point-distribution model."""
from __future__ import annotations

import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .pdm import PdmModel, build_pdm, cumulative_variance, project, reconstruct, sample

log = logging.getLogger(__name__)


class EvalError(ValueError):
    pass


def vertex_distances(a: ArrayLike, b: ArrayLike) -> NDArray:
    """Per-vertex Euclidean distance between two shape vectors (mm)."""
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if a.shape != b.shape or a.size % 3:
        raise EvalError(f"shape vectors of length {a.size} and {b.size} are not comparable")
    return np.linalg.norm((a - b).reshape(-1, 3), axis=1)


def rmse(a: ArrayLike, b: ArrayLike) -> float:
    d = vertex_distances(a, b)
    return float(np.sqrt(np.mean(d * d)))


@dataclass(frozen=True)
class BoxStats:
    """Box-plot summary with 1.5 IQR whiskers and an explicit 95th percentile."""

    median: float
    q1: float
    q3: float
    p95: float
    whisker_low: float
    whisker_high: float
    n_outliers: int
    mean: float
    maximum: float

    @classmethod
    def of(cls, values: ArrayLike) -> "BoxStats":
        v = np.asarray(values, dtype=np.float64).reshape(-1)
        q1, med, q3, p95 = np.percentile(v, [25, 50, 75, 95])
        iqr = q3 - q1
        inside = v[(v >= q1 - 1.5 * iqr) & (v <= q3 + 1.5 * iqr)]
        return cls(
            float(med), float(q1), float(q3), float(p95),
            float(inside.min()), float(inside.max()), int(v.size - inside.size),
            float(v.mean()), float(v.max()),
        )


@dataclass
class GeneralizationResult:
    distances: list[NDArray]  # per left-out instance, per-vertex mm
    k_modes: Optional[int] = None

    @property
    def stats(self) -> list[BoxStats]:
        return [BoxStats.of(d) for d in self.distances]

    @property
    def medians(self) -> NDArray:
        return np.array([np.median(d) for d in self.distances])


def _stack(corpus) -> NDArray:
    return np.stack([np.asarray(s, dtype=np.float64).reshape(-1) for s in corpus])


def _loo_fold(x: NDArray, n: int, k_modes: Optional[int]) -> NDArray:
    model = build_pdm(np.delete(x, n, axis=0))
    k = model.n_modes if k_modes is None else min(k_modes, model.n_modes)
    r = project(model, x[n], k)
    return vertex_distances(x[n], reconstruct(model, r, k))


def generalization_loo(
    corpus: Union[Sequence[ArrayLike], NDArray], k_modes: Optional[int] = None, jobs: int = 1
) -> GeneralizationResult:
    """Leave-one-out reconstruction error. All modes of each reduced model by
    default; `k_modes` truncates."""
    x = _stack(corpus)
    if x.shape[0] < 3:
        raise EvalError("leave-one-out needs at least 3 shapes")
    if jobs > 1:
        with ThreadPoolExecutor(jobs) as pool:
            dists = list(pool.map(lambda n: _loo_fold(x, n, k_modes), range(x.shape[0])))
    else:
        dists = [_loo_fold(x, n, k_modes) for n in range(x.shape[0])]
    return GeneralizationResult(dists, k_modes)


def sample_seed(master_seed: int, index: int) -> np.random.SeedSequence:
    """Seed of sample `index`, independent of execution order."""
    return np.random.SeedSequence([int(master_seed), int(index)])


@dataclass
class SpecificityResult:
    rmse: NDArray  # per random sample
    closest: NDArray  # index of the closest corpus shape

    @property
    def mean(self) -> float:
        return float(self.rmse.mean())

    @property
    def sd(self) -> float:
        return float(self.rmse.std(ddof=1)) if self.rmse.size > 1 else 0.0

    @property
    def minimum(self) -> float:
        return float(self.rmse.min())

    @property
    def maximum(self) -> float:
        return float(self.rmse.max())


def specificity(
    model: PdmModel,
    corpus: Union[Sequence[ArrayLike], NDArray],
    n_samples: int = 1000,
    seed: int = 0,
    bounds=(-3.0, 3.0),
    jobs: int = 1,
) -> SpecificityResult:
    """rmse from each random model instance to its closest corpus shape."""
    x = _stack(corpus)
    if x.shape[1] != model.mean.shape[0]:
        raise EvalError("corpus and model lengths differ")
    m = x.shape[1] // 3

    def one(i: int) -> tuple[float, int]:
        _, s = sample(model, sample_seed(seed, i), bounds)
        d2 = ((x - s) ** 2).reshape(x.shape[0], m, 3).sum(axis=2).mean(axis=1)
        j = int(d2.argmin())
        return float(np.sqrt(d2[j])), j

    if jobs > 1:
        with ThreadPoolExecutor(jobs) as pool:
            out = list(pool.map(one, range(n_samples)))
    else:
        out = [one(i) for i in range(n_samples)]
    return SpecificityResult(np.array([o[0] for o in out]), np.array([o[1] for o in out], dtype=np.int64))


def compactness(model: PdmModel) -> NDArray:
    if model.n_modes < 1:
        raise EvalError("model has no modes")
    curve = cumulative_variance(model)
    curve[-1] = 1.0
    return curve


@dataclass
class EvalReport:
    generalization: GeneralizationResult
    specificity: SpecificityResult
    compactness: NDArray
    notes: dict = field(default_factory=dict)

    def write_csv(self, directory: Union[str, Path]) -> list[Path]:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        paths = [d / "generalization.csv", d / "specificity.csv", d / "compactness.csv"]
        with open(paths[0], "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["instance", "median_mm", "q1_mm", "q3_mm", "p95_mm", "whisker_low_mm", "whisker_high_mm", "outliers", "mean_mm", "max_mm"])
            for i, s in enumerate(self.generalization.stats):
                w.writerow([i, s.median, s.q1, s.q3, s.p95, s.whisker_low, s.whisker_high, s.n_outliers, s.mean, s.maximum])
        with open(paths[1], "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["sample", "rmse_mm", "closest_instance"])
            for i, (r, c) in enumerate(zip(self.specificity.rmse, self.specificity.closest)):
                w.writerow([i, repr(float(r)), int(c)])
        with open(paths[2], "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["modes", "cumulative_variance"])
            for k, c in enumerate(self.compactness, start=1):
                w.writerow([k, repr(float(c))])
        return paths

    def summary(self) -> str:
        med = self.generalization.medians
        sp = self.specificity
        lines = [
            "[generalization]",
            f"instances = {len(med)}",
            f"median_of_medians_mm = {np.median(med):.4f}",
            f"max_median_mm = {med.max():.4f}",
            "[specificity]",
            f"samples = {sp.rmse.size}",
            f"rmse_min_mm = {sp.minimum:.4f}",
            f"rmse_max_mm = {sp.maximum:.4f}",
            f"rmse_mean_mm = {sp.mean:.4f}",
            f"rmse_sd_mm = {sp.sd:.4f}",
            "[compactness]",
            f"modes = {self.compactness.size}",
            f"modes_90 = {int(np.searchsorted(self.compactness, 0.90 - 1e-15) + 1)}",
            f"modes_95 = {int(np.searchsorted(self.compactness, 0.95 - 1e-15) + 1)}",
        ]
        lines += [f"{k} = {v}" for k, v in self.notes.items()]
        return "\n".join(lines) + "\n"


def evaluate(
    model: PdmModel, corpus, n_samples: int = 1000, seed: int = 0, jobs: int = 1, k_modes: Optional[int] = None
) -> EvalReport:
    gen = generalization_loo(corpus, k_modes=k_modes, jobs=jobs)
    spec = specificity(model, corpus, n_samples=n_samples, seed=seed, jobs=jobs)
    return EvalReport(gen, spec, compactness(model))

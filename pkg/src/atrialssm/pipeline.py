"""Stage orchestration with checksummed, resumable on-disk artifacts.

Every stage reads its inputs from the output directory, writes its outputs
atomically, and records in manifest.json the hash of its inputs (settings
and input files) together with the checksum of every output. A stage whose
input hash is unchanged and whose outputs still match their checksums is
skipped.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import platform
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import scipy

from . import __version__
from .align import IcpConfig, icp_align
from .config import PipelineConfig
from .ecg import load_ap_template, load_electrodes, simulate_ecg
from .eikonal import fast_march, sinus_seed
from .evaluation import evaluate
from .gpmm import (
    KernelSpec,
    KernelTerm,
    build_low_rank_gp,
    build_pv_orientation_model,
    establish_correspondence,
    save_gp,
)
from .mesh import Label, SurfaceMesh, enclosed_volume, halfspace_volume, is_closed_manifold, load_mesh, save_mesh, to_shape_vector
from .pdm import build_pdm, empirical_bounds, load_pdm, sample, save_pdm
from .phantom import SyntheticCorpusSpec, synth_corpus
from .volume import (
    VolumeError,
    WallConfig,
    assign_fibers,
    assign_regions,
    extrude_wall,
    load_fiber_rules,
    load_region_rules,
    load_tetmesh,
    save_tetmesh,
    self_intersections,
)
from . import plots

log = logging.getLogger(__name__)

STAGES = ("synth", "align", "correspond", "build-pdm", "eval", "sample", "extrude", "simulate", "ecg")
P_WAVE_BAND = (60.0, 160.0)  # ms, plausibility band for the batch check
REFERENCE_BAND = (80.0, 118.0)  # ms, published range over 100 instances


class StageError(RuntimeError):
    def __init__(self, stage: str, path, message: str):
        self.stage, self.path = stage, Path(path) if path is not None else None
        super().__init__(f"stage {stage} failed at {path}: {message}")


class ValidationError(StageError):
    pass


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _write_text(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


def _write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    tmp.replace(path)


@dataclass
class Manifest:
    path: Path
    data: dict = field(default_factory=dict)

    @classmethod
    def load(cls, out_dir: Path) -> "Manifest":
        p = out_dir / "manifest.json"
        data = json.loads(p.read_text()) if p.is_file() else {}
        data.setdefault("stages", {})
        return cls(p, data)

    def fresh(self, stage: str, input_hash: str, root: Path) -> bool:
        rec = self.data["stages"].get(stage)
        if rec is None or rec.get("input_hash") != input_hash:
            return False
        for rel, digest in rec["outputs"].items():
            p = root / rel
            if not p.is_file() or sha256_file(p) != digest:
                return False
        return True

    def record(self, stage: str, input_hash: str, outputs: Sequence[Path], root: Path, seed: int, seconds: float) -> None:
        self.data["stages"][stage] = {
            "input_hash": input_hash,
            "seed": seed,
            "seconds": round(seconds, 3),
            "outputs": {str(p.relative_to(root)): sha256_file(p) for p in sorted(outputs)},
        }
        self.data["versions"] = {
            "atrialssm": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
        }
        _write_text(self.path, json.dumps(self.data, indent=1, sort_keys=True) + "\n")


@dataclass
class Context:
    cfg: PipelineConfig
    manifest: Manifest
    executed: list = field(default_factory=list)
    skipped: list = field(default_factory=list)

    @property
    def out(self) -> Path:
        return self.cfg.output_dir

    def dir(self, name: str) -> Path:
        d = self.out / name
        d.mkdir(parents=True, exist_ok=True)
        return d

    def map(self, fn: Callable, items: Sequence) -> list:
        if self.cfg.jobs > 1 and len(items) > 1:
            with ThreadPoolExecutor(self.cfg.jobs) as pool:
                return list(pool.map(fn, items))
        return [fn(x) for x in items]


def _shape_files(directory: Path) -> list[Path]:
    return sorted(p for p in directory.glob("*.off") if p.name != "reference.off")


def _hash_inputs(settings: dict, files: Iterable[Path]) -> str:
    h = hashlib.sha256(json.dumps(settings, sort_keys=True, default=str).encode())
    for f in sorted(files):
        h.update(f.name.encode())
        h.update(sha256_file(f).encode())
    return h.hexdigest()


# -- stages ----------------------------------------------------------------------------


def _stage_synth(ctx: Context) -> tuple[dict, list[Path], Callable[[], list[Path]]]:
    c = ctx.cfg
    settings = c.fingerprint("seed", "n_instances", "n_vertices", "variances", "noise_sigma", "max_rotation_deg", "max_translation")
    if c.corpus_dir is not None:
        return settings, [], lambda: []

    def run() -> list[Path]:
        spec = SyntheticCorpusSpec(c.n_instances, c.n_vertices, tuple(c.variances), c.noise_sigma,
                                   c.max_rotation_deg, c.max_translation, c.seed)
        corpus = synth_corpus(spec)
        d = ctx.dir("corpus")
        paths = corpus.save(d)
        return paths + [d / "reference.off", d / "ground_truth.json", d / "ground_truth_modes.npy"]

    return settings, [], run


def _reference(ctx: Context) -> Path:
    ref = ctx.cfg.corpus / "reference.off"
    if ref.is_file():
        return ref
    shapes = _shape_files(ctx.cfg.corpus)
    if not shapes:
        raise StageError("align", ctx.cfg.corpus, "no .off shapes in the corpus directory")
    return shapes[0]


def _stage_align(ctx: Context):
    c = ctx.cfg
    inputs = _shape_files(c.corpus) + [_reference(ctx)] if c.corpus.is_dir() else []

    def run() -> list[Path]:
        reference = load_mesh(_reference(ctx))
        icp = IcpConfig(max_iterations=c.icp_max_iterations, convergence_tol=c.icp_tol)
        d = ctx.dir("aligned")

        def one(path: Path):
            try:
                aligned, rep = icp_align(load_mesh(path), reference, icp)
            except Exception as exc:
                raise StageError("align", path, str(exc)) from exc
            if not np.all(np.isfinite(aligned.vertices)):
                raise ValidationError("align", path, "non-finite aligned vertices")
            save_mesh(aligned, d / path.name)
            return path.name, rep

        results = ctx.map(one, _shape_files(c.corpus))
        rows = [[n, r.iterations_run, f"{r.initial_residual:.6f}", f"{r.residual_history[-1]:.6f}",
                 f"{r.final_transform.angle_deg():.6f}"] for n, r in results]
        _write_csv(d / "icp.csv", ["shape", "iterations", "initial_rms_mm", "final_rms_mm", "rotation_deg"], rows)
        return [d / n for n, _ in results] + [d / "icp.csv"]

    return c.fingerprint("icp_max_iterations", "icp_tol"), inputs, run


def build_models(cfg: PipelineConfig, reference: SurfaceMesh) -> list:
    body = KernelSpec((KernelTerm(cfg.body_scale, cfg.body_length),))
    models = [build_low_rank_gp(reference, body, cfg.body_rank, cfg.n_landmarks, cfg.seed)]
    if reference.labels is not None and reference.label_mask(Label.LAA, Label.RAA).any():
        app = KernelSpec((KernelTerm(cfg.appendage_scale, cfg.appendage_length, (Label.LAA, Label.RAA)),))
        models.append(build_low_rank_gp(reference, app, cfg.appendage_rank, cfg.n_landmarks, cfg.seed))
    if cfg.use_pv_model and reference.labels is not None and reference.label_mask(Label.LPV, Label.RPV).any():
        models.append(build_pv_orientation_model(reference))
    return models


def _stage_correspond(ctx: Context):
    c = ctx.cfg
    aligned_dir = c.output_dir / "aligned"
    inputs = _shape_files(aligned_dir) + ([_reference(ctx)] if c.corpus.is_dir() else [])
    settings = c.fingerprint("seed", "body_scale", "body_length", "body_rank", "appendage_scale",
                             "appendage_length", "appendage_rank", "n_landmarks", "reg_weight", "use_pv_model")

    def run() -> list[Path]:
        reference = load_mesh(_reference(ctx))
        models = build_models(c, reference)
        md = ctx.dir("model")
        outputs = []
        for k, m in enumerate(models):
            p = md / f"gp_{k}_{m.kind}.ssmc"
            save_gp(m, p)
            outputs.append(p)
        d = ctx.dir("correspond")

        def one(path: Path):
            target = load_mesh(path)
            try:
                fitted, results = establish_correspondence(models, target, c.reg_weight)
            except Exception as exc:
                raise StageError("correspond", path, str(exc)) from exc
            dist = np.sqrt(results[-1].mse)
            from .align import NearestNeighbors

            d_nn, _ = NearestNeighbors(target).query(fitted.vertices)
            save_mesh(fitted, d / path.name)
            return path.name, float(d_nn.mean()), float(dist), sum(r.iterations for r in results)

        rows = ctx.map(one, _shape_files(aligned_dir))
        if not rows:
            raise StageError("correspond", aligned_dir, "no aligned shapes")
        means = np.array([r[1] for r in rows])
        _write_csv(d / "fit.csv", ["shape", "mean_distance_mm", "rms_distance_mm", "iterations"],
                   [[n, f"{a:.6f}", f"{b:.6f}", it] for n, a, b, it in rows])
        _write_text(d / "fit_summary.txt",
                    f"shapes = {len(rows)}\nmean_of_shape_means_mm = {means.mean():.6f}\n"
                    f"sd_of_shape_means_mm = {means.std(ddof=1) if len(means) > 1 else 0.0:.6f}\n")
        return outputs + [d / r[0] for r in rows] + [d / "fit.csv", d / "fit_summary.txt"]

    return settings, inputs, run


def _corpus_vectors(ctx: Context) -> tuple[list[Path], np.ndarray, SurfaceMesh]:
    files = _shape_files(ctx.cfg.output_dir / "correspond")
    meshes = [load_mesh(p) for p in files]
    if len(meshes) < 2:
        raise StageError("build-pdm", ctx.cfg.output_dir / "correspond", "need at least two shapes in correspondence")
    return files, np.stack([to_shape_vector(m) for m in meshes]), meshes[0]


def _stage_build_pdm(ctx: Context):
    inputs = _shape_files(ctx.cfg.output_dir / "correspond")

    def run() -> list[Path]:
        _, x, first = _corpus_vectors(ctx)
        model = build_pdm(x, first.triangles, first.labels)
        orth = model.eigenvectors @ model.eigenvectors.T
        if not np.allclose(orth, np.eye(model.n_modes), atol=1e-8):
            raise ValidationError("build-pdm", ctx.out / "model", "eigenvectors are not orthonormal")
        p = ctx.dir("model") / "pdm.ssmc"
        save_pdm(model, p)
        save_mesh(model.mesh(), ctx.dir("model") / "mean.off")
        return [p, ctx.out / "model" / "mean.off"]

    return {}, inputs, run


def _stage_eval(ctx: Context):
    c = ctx.cfg
    pdm_path = c.output_dir / "model" / "pdm.ssmc"
    inputs = _shape_files(c.output_dir / "correspond") + ([pdm_path] if pdm_path.is_file() else [])

    def run() -> list[Path]:
        model = load_pdm(pdm_path)
        _, x, _ = _corpus_vectors(ctx)
        report = evaluate(model, x, n_samples=c.specificity_samples, seed=c.seed, jobs=c.jobs)
        if abs(report.compactness[-1] - 1.0) > 1e-12:
            raise ValidationError("eval", pdm_path, "compactness curve does not end at 1")
        fit_summary = c.output_dir / "correspond" / "fit_summary.txt"
        if fit_summary.is_file():
            for line in fit_summary.read_text().splitlines():
                k, _, v = line.partition(" = ")
                report.notes[f"correspondence_{k}"] = v
        d = ctx.dir("eval")
        paths = report.write_csv(d)
        _write_text(d / "summary.txt", report.summary())
        paths.append(d / "summary.txt")
        for kind, src in (("generalization", d / "generalization.csv"), ("compactness", d / "compactness.csv")):
            svg = d / f"{kind}.svg"
            plots.plot(src, kind, svg)
            paths.append(svg)
        return paths

    return c.fingerprint("seed", "specificity_samples"), inputs, run


def _stage_sample(ctx: Context):
    c = ctx.cfg
    pdm_path = c.output_dir / "model" / "pdm.ssmc"
    inputs = [pdm_path] if pdm_path.is_file() else []
    if c.bounds == "empirical":
        inputs += _shape_files(c.output_dir / "correspond")

    def run() -> list[Path]:
        model = load_pdm(pdm_path)
        if c.bounds == "empirical":
            _, x, _ = _corpus_vectors(ctx)
            bounds = empirical_bounds(model, x)
        else:
            bounds = (-3.0, 3.0)
        d = ctx.dir("samples")
        for old in d.glob("sample_*.off"):
            old.unlink()
        rows, outputs = [], []
        for i in range(c.n_samples):
            r, s = sample(model, np.random.SeedSequence([c.seed, i]), bounds)
            mesh = model.mesh(s)
            p = d / f"sample_{i:03d}.off"
            if not is_closed_manifold(mesh) or len(self_intersections(mesh.vertices, mesh.triangles)):
                raise ValidationError("sample", p, "sampled surface self-intersects; narrow the sampling bounds")
            save_mesh(mesh, p)
            outputs.append(p)
            rows.append([p.name, *(f"{v:.12g}" for v in r)])
        _write_csv(d / "coefficients.csv", ["sample", *(f"r{k + 1}" for k in range(model.n_modes))], rows)
        return outputs + [d / "coefficients.csv"]

    return c.fingerprint("seed", "n_samples", "bounds"), inputs, run


def _sinus_index(cfg: PipelineConfig, mean: SurfaceMesh) -> int:
    return int(np.argmin(np.linalg.norm(mean.vertices - np.asarray(cfg.sinus_point), axis=1)))


def _stage_extrude(ctx: Context):
    c = ctx.cfg
    mean_path = c.output_dir / "model" / "mean.off"
    inputs = _shape_files(c.output_dir / "samples") + [Path(c.region_rules), Path(c.fiber_rules)]
    inputs += [mean_path] if mean_path.is_file() else []

    def run() -> list[Path]:
        wall = WallConfig(c.thickness, c.target_edge, normal_smoothing=c.normal_smoothing)
        mean = load_mesh(mean_path)
        try:
            mean_tet = assign_regions(extrude_wall(mean, wall), load_region_rules(c.region_rules))
        except (VolumeError, ValueError) as exc:
            raise StageError("extrude", mean_path, str(exc)) from exc
        fibers = load_fiber_rules(c.fiber_rules)
        d = ctx.dir("volumes")
        for old in d.glob("sample_*.tet"):
            old.unlink()

        def one(path: Path):
            surf = load_mesh(path)
            try:
                tet = extrude_wall(surf, wall)
            except VolumeError as exc:
                raise StageError("extrude", path, str(exc)) from exc
            if tet.tets.shape != mean_tet.tets.shape or not np.array_equal(np.sort(tet.tets, 1), np.sort(mean_tet.tets, 1)):
                raise ValidationError("extrude", path, "instance topology differs from the mean shape")
            tet.region = mean_tet.region.copy()
            tet = assign_fibers(tet, fibers)
            try:
                tet.validate()
            except VolumeError as exc:
                raise ValidationError("extrude", path, str(exc)) from exc
            out = d / (path.stem + ".tet")
            save_tetmesh(tet, out)
            la = halfspace_volume(surf, (0.0, 0.0, 0.0), (1.0, 0.0, 0.0)) / 1000.0
            return out, [path.stem, f"{enclosed_volume(surf) / 1000.0:.4f}", f"{la:.4f}", tet.n_tets,
                         *np.bincount(tet.region, minlength=7).tolist()]

        results = ctx.map(one, _shape_files(c.output_dir / "samples"))
        _write_csv(d / "volumes.csv", ["sample", "cavity_ml", "la_halfspace_ml", "tets",
                                       "RA", "LA", "InterAtrial", "ValveRing", "PectinateMuscle", "CristaTerminalis", "InferiorIsthmus"],
                   [r for _, r in results])
        return [p for p, _ in results] + [d / "volumes.csv"]

    return c.fingerprint("thickness", "target_edge", "normal_smoothing"), inputs, run


def _stage_simulate(ctx: Context):
    c = ctx.cfg
    mean_path = c.output_dir / "model" / "mean.off"
    inputs = sorted((c.output_dir / "volumes").glob("sample_*.tet")) + ([mean_path] if mean_path.is_file() else [])

    def run() -> list[Path]:
        idx = _sinus_index(c, load_mesh(mean_path))
        d = ctx.dir("lat")
        for old in d.glob("sample_*.csv"):
            old.unlink()

        def one(path: Path):
            tet, _ = load_tetmesh(path)
            try:
                seeds = sinus_seed(tet, tet.vertices[idx], c.sinus_radius)
                act = fast_march(tet, c.table, seeds, init_radius=c.init_radius)
            except Exception as exc:
                raise StageError("simulate", path, str(exc)) from exc
            if not np.all(np.isfinite(act.lat)) or act.lat.min() < 0:
                raise ValidationError("simulate", path, "activation times must be finite and non-negative")
            out = d / (path.stem + ".csv")
            act.write_csv(out)
            return out, [path.stem, len(seeds), f"{act.lat.max():.4f}", act.reinsertions]

        results = ctx.map(one, sorted((c.output_dir / "volumes").glob("sample_*.tet")))
        _write_csv(d / "activation.csv", ["sample", "seeds", "total_activation_ms", "reinsertions"], [r for _, r in results])
        return [p for p, _ in results] + [d / "activation.csv"]

    return c.fingerprint("sinus_point", "sinus_radius", "init_radius", "conduction"), inputs, run


def _stage_ecg(ctx: Context):
    c = ctx.cfg
    vols = sorted((c.output_dir / "volumes").glob("sample_*.tet"))
    inputs = vols + sorted((c.output_dir / "lat").glob("sample_*.csv")) + [Path(c.electrodes), Path(c.ap_template)]

    def run() -> list[Path]:
        from .eikonal import read_lat_csv

        electrodes = load_electrodes(c.electrodes)
        template = load_ap_template(c.ap_template)
        d = ctx.dir("ecg")
        for old in d.glob("sample_*"):
            old.unlink()

        def one(path: Path):
            tet, _ = load_tetmesh(path)
            lat = read_lat_csv(c.output_dir / "lat" / (path.stem + ".csv"))
            try:
                traces = simulate_ecg(tet, lat, electrodes, template, c.ecg_dt, c.ecg_tail, c.sample_spacing)
            except Exception as exc:
                raise StageError("ecg", path, str(exc)) from exc
            closure = np.abs(traces.leads["I"] + traces.leads["III"] - traces.leads["II"]).max()
            if closure > 1e-9:
                raise ValidationError("ecg", path, f"Einthoven closure violated by {closure}")
            from .ecg import annotate

            traces = annotate(traces, c.threshold_frac)
            out = d / (path.stem + ".csv")
            traces.write_csv(out)
            on, off = min(traces.onset.values()), max(traces.offset.values())
            return out, [path.stem, f"{off - on:.3f}", f"{on:.3f}", f"{off:.3f}"]

        results = ctx.map(one, vols)
        rows = [r for _, r in results]
        _write_csv(d / "p_durations.csv", ["sample", "p_wave_ms", "onset_ms", "offset_ms"], rows)
        dur = np.array([float(r[1]) for r in rows])
        inside = int(((dur >= P_WAVE_BAND[0]) & (dur <= P_WAVE_BAND[1])).sum())
        in_ref = int(((dur >= REFERENCE_BAND[0]) & (dur <= REFERENCE_BAND[1])).sum())
        _write_text(d / "summary.txt", "\n".join([
            f"instances = {dur.size}",
            f"p_wave_min_ms = {dur.min():.3f}",
            f"p_wave_max_ms = {dur.max():.3f}",
            f"p_wave_mean_ms = {dur.mean():.3f}",
            f"inside_plausibility_band_{P_WAVE_BAND[0]:g}_{P_WAVE_BAND[1]:g}_ms = {inside}",
            f"inside_reference_band_{REFERENCE_BAND[0]:g}_{REFERENCE_BAND[1]:g}_ms = {in_ref}",
        ]) + "\n")
        outputs = [p for p, _ in results] + [d / "p_durations.csv", d / "summary.txt"]
        for p, _ in results[: min(5, len(results))]:
            svg = p.with_suffix(".svg")
            plots.plot(p, "traces", svg)
            outputs.append(svg)
        return outputs

    return c.fingerprint("ecg_dt", "ecg_tail", "sample_spacing", "threshold_frac"), inputs, run


_STAGE_FUNCS = {
    "synth": _stage_synth,
    "align": _stage_align,
    "correspond": _stage_correspond,
    "build-pdm": _stage_build_pdm,
    "eval": _stage_eval,
    "sample": _stage_sample,
    "extrude": _stage_extrude,
    "simulate": _stage_simulate,
    "ecg": _stage_ecg,
}


def run_stage(ctx: Context, stage: str, force: bool = False) -> bool:
    """Run one stage unless its manifest entry is fresh. Returns True if it ran."""
    settings, inputs, fn = _STAGE_FUNCS[stage](ctx)
    input_hash = _hash_inputs({"stage": stage, **settings}, inputs)
    if not force and ctx.manifest.fresh(stage, input_hash, ctx.out):
        log.info("%s: up to date", stage)
        ctx.skipped.append(stage)
        return False
    log.info("%s: running", stage)
    t0 = time.perf_counter()
    try:
        outputs = fn()
    except StageError:
        raise
    except Exception as exc:
        raise StageError(stage, ctx.out, f"{type(exc).__name__}: {exc}") from exc
    ctx.manifest.record(stage, input_hash, outputs, ctx.out, ctx.cfg.seed, time.perf_counter() - t0)
    ctx.executed.append(stage)
    return True


def run_pipeline(cfg: PipelineConfig, stages: Sequence[str] = STAGES, force: bool = False) -> Context:
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    ctx = Context(cfg, Manifest.load(cfg.output_dir))
    for stage in stages:
        run_stage(ctx, stage, force)
    return ctx

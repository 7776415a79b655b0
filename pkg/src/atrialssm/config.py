"""Pipeline configuration: INI file with sections, validated on load."""
from __future__ import annotations

import configparser
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional, Union

from .eikonal import DEFAULT_CONDUCTION, Conduction, ConductionTable
from .volume import Region


class ConfigError(ValueError):
    pass


def data_file(name: str) -> Path:
    return Path(str(resources.files("atrialssm") / "data" / name))


DEFAULT_SINUS_POINT = (-16.5, -6.6, 28.1)  # on the default phantom, RA roof near the RAA base


@dataclass
class PipelineConfig:
    corpus_dir: Optional[Path] = None  # None: output/corpus, generated by the synth stage
    output_dir: Path = Path("out")
    seed: int = 0
    jobs: int = 1
    # synthetic corpus
    n_instances: int = 12
    n_vertices: int = 2000
    variances: tuple[float, ...] = (16.0, 9.0, 4.0)
    noise_sigma: float = 0.3
    max_rotation_deg: float = 20.0
    max_translation: float = 10.0
    # rigid alignment
    icp_max_iterations: int = 150
    icp_tol: float = 1e-4
    # correspondence
    body_scale: float = 50.0
    body_length: float = 40.0
    body_rank: int = 100
    appendage_scale: float = 20.0
    appendage_length: float = 20.0
    appendage_rank: int = 50
    n_landmarks: int = 1000
    reg_weight: float = 1e-3
    use_pv_model: bool = True
    # model, evaluation, sampling
    specificity_samples: int = 1000
    n_samples: int = 5
    bounds: str = "empirical"  # "empirical" (training min/max per mode) or "default" ([-3, 3])
    # wall, regions, fibers
    thickness: float = 3.0
    target_edge: float = 1.0
    normal_smoothing: int = 20
    region_rules: Path = field(default_factory=lambda: data_file("regions_phantom.txt"))
    fiber_rules: Path = field(default_factory=lambda: data_file("fibers_phantom.txt"))
    # activation
    sinus_point: tuple[float, float, float] = DEFAULT_SINUS_POINT
    sinus_radius: float = 2.0
    init_radius: float = 10.0  # mm, straight-line source ball
    conduction: dict = field(default_factory=lambda: dict(DEFAULT_CONDUCTION))
    # ecg
    electrodes: Path = field(default_factory=lambda: data_file("electrodes.txt"))
    ap_template: Path = field(default_factory=lambda: data_file("ap_template.csv"))
    ecg_dt: float = 1.0
    ecg_tail: float = 60.0
    sample_spacing: float = 3.0
    threshold_frac: float = 0.05

    @property
    def corpus(self) -> Path:
        return self.corpus_dir if self.corpus_dir is not None else self.output_dir / "corpus"

    @property
    def table(self) -> ConductionTable:
        return ConductionTable(dict(self.conduction))

    def validate(self) -> "PipelineConfig":
        def need(cond: bool, msg: str) -> None:
            if not cond:
                raise ConfigError(msg)

        need(self.jobs >= 1, "jobs must be >= 1")
        need(self.n_instances >= 3, "n_instances must be >= 3")
        need(self.n_vertices >= 100, "n_vertices must be >= 100")
        need(len(self.variances) < self.n_instances, "need fewer planted modes than instances")
        need(all(v > 0 for v in self.variances), "variances must be positive")
        need(list(self.variances) == sorted(self.variances, reverse=True), "variances must be descending")
        need(self.noise_sigma >= 0, "noise_sigma must be >= 0")
        need(0 <= self.max_rotation_deg <= 180, "max_rotation_deg must be in [0, 180]")
        need(self.max_translation >= 0, "max_translation must be >= 0")
        need(1 <= self.icp_max_iterations <= 10000, "icp max_iterations must be in [1, 10000]")
        need(self.icp_tol >= 0, "icp tolerance must be >= 0")
        for name in ("body_scale", "body_length", "appendage_scale", "appendage_length"):
            need(getattr(self, name) > 0, f"{name} must be > 0")
        need(self.body_rank >= 1 and self.appendage_rank >= 1, "GP ranks must be >= 1")
        need(self.n_landmarks >= 1, "n_landmarks must be >= 1")
        need(self.reg_weight >= 0, "reg_weight must be >= 0")
        need(self.specificity_samples >= 1, "specificity samples must be >= 1")
        need(self.n_samples >= 1, "n_samples must be >= 1")
        need(self.bounds in ("default", "empirical"), "bounds must be 'default' or 'empirical'")
        need(self.thickness > 0 and self.target_edge > 0, "wall thickness and target_edge must be > 0")
        need(self.normal_smoothing >= 0, "normal_smoothing must be >= 0")
        need(self.sinus_radius > 0, "sinus radius must be > 0")
        need(self.init_radius >= 0, "init radius must be >= 0")
        need(self.ecg_dt > 0 and self.ecg_tail >= 0, "ecg dt must be > 0 and tail >= 0")
        need(self.sample_spacing > 0, "sample_spacing must be > 0")
        need(0 < self.threshold_frac < 1, "threshold_frac must be in (0, 1)")
        need(set(self.conduction) == set(Region), "conduction table must cover every region")
        for path in (self.region_rules, self.fiber_rules, self.electrodes, self.ap_template):
            need(Path(path).is_file(), f"file not found: {path}")
        if self.corpus_dir is not None:
            need(Path(self.corpus_dir).is_dir(), f"corpus directory not found: {self.corpus_dir}")
        return self

    def fingerprint(self, *names: str) -> dict:
        """The named settings as plain JSON values, for stage checksums."""
        d = asdict(self)
        out = {}
        for n in names:
            v = d[n]
            if isinstance(v, Path):
                v = str(v)
            elif isinstance(v, dict):
                v = {Region(int(k)).name: [c.cv_t, c.ar] if isinstance(c, Conduction) else c for k, c in v.items()} \
                    if n == "conduction" else v
            elif isinstance(v, tuple):
                v = list(v)
            out[n] = v
        return out


def _floats(text: str, n: Optional[int] = None) -> tuple[float, ...]:
    vals = tuple(float(x) for x in text.replace(",", " ").split())
    if n is not None and len(vals) != n:
        raise ValueError(f"expected {n} numbers, got {len(vals)}")
    return vals


# (section, key) -> (attribute, parser)
_FIELDS = {
    ("paths", "corpus"): ("corpus_dir", Path),
    ("paths", "output"): ("output_dir", Path),
    ("run", "seed"): ("seed", int),
    ("run", "jobs"): ("jobs", int),
    ("synth", "n_instances"): ("n_instances", int),
    ("synth", "n_vertices"): ("n_vertices", int),
    ("synth", "variances"): ("variances", _floats),
    ("synth", "noise_sigma"): ("noise_sigma", float),
    ("synth", "max_rotation_deg"): ("max_rotation_deg", float),
    ("synth", "max_translation"): ("max_translation", float),
    ("icp", "max_iterations"): ("icp_max_iterations", int),
    ("icp", "convergence_tol"): ("icp_tol", float),
    ("gp", "body_scale"): ("body_scale", float),
    ("gp", "body_length"): ("body_length", float),
    ("gp", "body_rank"): ("body_rank", int),
    ("gp", "appendage_scale"): ("appendage_scale", float),
    ("gp", "appendage_length"): ("appendage_length", float),
    ("gp", "appendage_rank"): ("appendage_rank", int),
    ("gp", "n_landmarks"): ("n_landmarks", int),
    ("gp", "reg_weight"): ("reg_weight", float),
    ("gp", "pv_model"): ("use_pv_model", None),
    ("eval", "specificity_samples"): ("specificity_samples", int),
    ("sample", "n_samples"): ("n_samples", int),
    ("sample", "bounds"): ("bounds", str),
    ("wall", "thickness"): ("thickness", float),
    ("wall", "target_edge"): ("target_edge", float),
    ("wall", "normal_smoothing"): ("normal_smoothing", int),
    ("wall", "region_rules"): ("region_rules", Path),
    ("wall", "fiber_rules"): ("fiber_rules", Path),
    ("eikonal", "sinus_point"): ("sinus_point", lambda s: _floats(s, 3)),
    ("eikonal", "sinus_radius"): ("sinus_radius", float),
    ("eikonal", "init_radius"): ("init_radius", float),
    ("ecg", "electrodes"): ("electrodes", Path),
    ("ecg", "ap_template"): ("ap_template", Path),
    ("ecg", "dt"): ("ecg_dt", float),
    ("ecg", "tail"): ("ecg_tail", float),
    ("ecg", "sample_spacing"): ("sample_spacing", float),
    ("ecg", "threshold_frac"): ("threshold_frac", float),
}


def load_config(path: Union[str, Path, None] = None, **overrides) -> PipelineConfig:
    """Read an INI file. Relative paths resolve against the file's directory.

    The [conduction] section takes lines ``Region = cv_t_mm_per_s, ar``.
    Keyword overrides (e.g. seed=3) are applied last.
    """
    cfg = PipelineConfig()
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
        try:
            parser.read(path)
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from None
        base = path.parent
        for section in parser.sections():
            for key, raw in parser.items(section):
                if section == "conduction":
                    try:
                        region = Region[key] if key in Region.__members__ else next(r for r in Region if r.name.lower() == key)
                        cv, ar = _floats(raw, 2)
                        cfg.conduction[region] = Conduction(cv, ar)
                    except (StopIteration, ValueError) as exc:
                        raise ConfigError(f"{path}: [conduction] {key}: {exc or 'unknown region'}") from None
                    continue
                if (section, key) not in _FIELDS:
                    raise ConfigError(f"{path}: unknown setting [{section}] {key}")
                attr, conv = _FIELDS[(section, key)]
                try:
                    if conv is None:
                        value = parser.getboolean(section, key)
                    else:
                        value = conv(raw)
                except ValueError as exc:
                    raise ConfigError(f"{path}: [{section}] {key}: {exc}") from None
                if isinstance(value, Path) and not value.is_absolute():
                    value = base / value
                setattr(cfg, attr, value)
    for k, v in overrides.items():
        if v is not None:
            setattr(cfg, k, Path(v) if k in ("output_dir", "corpus_dir") else v)
    return cfg.validate()

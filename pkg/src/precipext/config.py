"""Pipeline configuration: sectioned INI files mapped onto dataclasses.

Defaults reproduce the modelling choices of the original analysis (0.1 mm/h
zero floor, 5 km radar exclusion, p_u = 0.95, p_tau = 0.9, N = 1000, the
stated prior calibrations) on a synthetic desk-scale domain.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from io import StringIO
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass
class PathsConfig:
    input: str = ""
    input_format: str = ""
    polygon: str = ""


@dataclass
class GeometryConfig:
    nx: int = 25
    ny: int = 25
    cell_size: float = 1.0


@dataclass
class SynthConfig:
    n_times: int = 4000
    hours_per_day: int = 24
    first_day: int = 152
    n_days: int = 92
    dependence: str = "condext"
    copula_range: float = 10.0
    occurrence: str = "probit"
    zero_probability: float = 0.3
    psi_mean: float = 2.0
    psi_amplitude: float = 0.3
    kappa: float = 0.69
    phi: float = 1.0
    xi: float = 0.145
    lambda_a0: float = 10.0
    Lambda_lambda: float = 4.0
    kappa_a0: float = 1.2
    Lambda_kappa: float = 3.0
    varkappa: float = 1.5
    beta0: float = 0.65
    lambda_b: float = 8.5
    kappa_b: float = 0.5
    rho: float = 15.0
    sigma: float = 1.5
    sigma_eps: float = 0.1
    seed: int = 1


@dataclass
class PreprocessConfig:
    zero_floor: float = 0.1
    exclusion_x: float = -1.0
    exclusion_y: float = -1.0
    exclusion_radius: float = 5.0
    months: tuple = (6, 7, 8)


@dataclass
class MarginalsConfig:
    p_u: float = 0.95
    beta: float = 0.5
    xi_lambda: float = 7.0
    smoothing: bool = True
    range0_days: float = 28.0
    range_exceed_prob: float = 0.05
    sd0: float = 3.0
    sd_exceed_prob: float = 0.05
    gamma_stride: int = 2
    gp_stride: int = 1


@dataclass
class CondExtConfig:
    p_tau: float = 0.9
    sites: tuple = ()
    stride: int = 2
    n_starts: int = 3
    prefit_window: float = 0.2
    prior_sd: float = 5.0
    lambda_b_mean: float = 8.5
    kappa_b_mean: float = 0.5
    beta0_mean: float = 0.65
    range0_km: float = 60.0
    range_exceed_prob: float = 0.05
    sd0: float = 4.0
    sd_exceed_prob: float = 0.05
    nugget_mean: float = 0.1
    nugget_sd: float = 5.0


@dataclass
class OccurrenceConfig:
    model: str = "threshold"
    knot_spacing: float = 5.0
    anchor: float = 5.0
    coef_sd: float = 10.0
    range0_km: float = 70.0
    range_exceed_prob: float = 0.05
    sd0: float = 5.0
    sd_exceed_prob: float = 0.01


@dataclass
class DiagnoseConfig:
    d_half: float = 0.5
    logy_half: float = 0.025
    min_count: int = 30
    n_levels: int = 20
    level_lo: float = 0.85
    level_hi: float = 0.999
    y1_prob: float = 0.9
    tol_alpha: float = 0.1
    tol_beta: float = 0.15
    chi_p: tuple = (0.9, 0.95, 0.99)


@dataclass
class SimulateConfig:
    n: int = 1000
    seed: int = 2024
    fix_theta: bool = False


@dataclass
class EvaluateConfig:
    radii: tuple = (0.5, 2.0, 4.0, 6.0, 8.0, 10.0)
    chi_p: tuple = (0.9, 0.95)


@dataclass
class PipelineConfig:
    paths: PathsConfig = field(default_factory=PathsConfig)
    geometry: GeometryConfig = field(default_factory=GeometryConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    marginals: MarginalsConfig = field(default_factory=MarginalsConfig)
    condext: CondExtConfig = field(default_factory=CondExtConfig)
    occurrence: OccurrenceConfig = field(default_factory=OccurrenceConfig)
    diagnose: DiagnoseConfig = field(default_factory=DiagnoseConfig)
    simulate: SimulateConfig = field(default_factory=SimulateConfig)
    evaluate: EvaluateConfig = field(default_factory=EvaluateConfig)

    def validate(self) -> "PipelineConfig":
        for name, p in (("p_u", self.marginals.p_u), ("beta", self.marginals.beta),
                        ("p_tau", self.condext.p_tau)):
            if not 0 < p < 1:
                raise ConfigError(f"{name} must lie in (0, 1), got {p}")
        if not self.condext.p_tau > 0.5:
            raise ConfigError("p_tau must exceed 0.5")
        if self.occurrence.model not in ("nonzero", "probit", "spatial-probit", "threshold"):
            raise ConfigError(f"unknown occurrence model {self.occurrence.model!r}")
        if self.synth.dependence not in ("copula", "condext"):
            raise ConfigError(f"unknown synthetic dependence {self.synth.dependence!r}")
        if self.simulate.n < 1:
            raise ConfigError("simulate.n must be >= 1")
        if self.geometry.nx < 1 or self.geometry.ny < 1 or not self.geometry.cell_size > 0:
            raise ConfigError("invalid geometry")
        if list(self.evaluate.radii) != sorted(self.evaluate.radii):
            raise ConfigError("evaluate.radii must be ascending")
        return self

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)

    def section_hash(self, *sections: str) -> str:
        d = self.as_dict()
        blob = json.dumps({s: d[s] for s in sorted(sections)}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()

    def sites(self) -> list[int]:
        if self.condext.sites:
            return [int(s) for s in self.condext.sites]
        return [(self.geometry.ny // 2) * self.geometry.nx + self.geometry.nx // 2]


def _coerce(value: str, default):
    if isinstance(default, bool):
        v = value.strip().lower()
        if v in ("1", "true", "yes", "on"):
            return True
        if v in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {value!r}")
    if isinstance(default, int):
        return int(value)
    if isinstance(default, float):
        return float(value)
    if isinstance(default, tuple):
        items = [s for s in value.replace(",", " ").split() if s]
        kind = float if any("." in s or "e" in s.lower() for s in items) else int
        return tuple(kind(s) for s in items)
    return value.strip()


def load_config(path=None) -> PipelineConfig:
    cfg = PipelineConfig()
    if path is None:
        return cfg.validate()
    parser = configparser.ConfigParser()
    parser.optionxform = str
    if not parser.read(path):
        raise ConfigError(f"cannot read config file {path}")
    for section in parser.sections():
        if not hasattr(cfg, section):
            raise ConfigError(f"unknown config section [{section}]")
        target = getattr(cfg, section)
        known = {f.name: f for f in dataclasses.fields(target)}
        for key, raw in parser.items(section):
            if key not in known:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
            try:
                setattr(target, key, _coerce(raw, getattr(target, key)))
            except ValueError as exc:
                raise ConfigError(f"[{section}] {key}: {exc}") from None
    if cfg.paths.input and not Path(cfg.paths.input).is_absolute():
        cfg.paths.input = str((Path(path).parent / cfg.paths.input).resolve())
    if cfg.paths.polygon and not Path(cfg.paths.polygon).is_absolute():
        cfg.paths.polygon = str((Path(path).parent / cfg.paths.polygon).resolve())
    return cfg.validate()


def dump_config(cfg: PipelineConfig) -> str:
    parser = configparser.ConfigParser()
    parser.optionxform = str
    for section, values in cfg.as_dict().items():
        parser[section] = {
            k: " ".join(str(x) for x in v) if isinstance(v, (tuple, list)) else str(v) for k, v in values.items()
        }
    buf = StringIO()
    parser.write(buf)
    return buf.getvalue()

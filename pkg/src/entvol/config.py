"""Run configuration: a sectioned key-value text file.

Keys are addressed as ``section.key`` (``model.alpha``, ``simulation.dt``).
Length and time entries accept ``auto``; they resolve against the derived
scales when a run starts, so one file works for any model.  Floats are
written with 17 significant digits so that parse -> write -> parse is exact.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import io
import math
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

from .model import ModelSpec, ScaleSet, ValidationError, derive_scales
from .pde import grid_ratio, stability_limit

AUTO = "auto"


@dataclass
class ModelSection:
    type: str = "cgl"
    alpha: float = 2.0
    beta: float = -2.0
    q_star: float = 2.8
    m_star_override: Optional[float] = None


@dataclass
class ScalesSection:
    k_star_prefactor: float = 4.0


@dataclass
class SimulationSection:
    domain_length: Optional[float] = None     # auto: 128 delta*
    grid_points: int = 2048
    dt: Optional[float] = None                # auto: tau* / 8
    transient: Optional[float] = None         # auto: 500 tau*
    t_final: Optional[float] = None           # auto: 4096 tau* after the transient
    snapshot_every: Optional[float] = None    # auto: tau*
    seed: int = 1


@dataclass
class ExperimentSection:
    eps0: float = 1e-5
    support: str = "everywhere"
    twin_duration: Optional[float] = None     # auto: 512 tau*
    record_every: Optional[float] = None      # auto: tau*
    mode: str = "dissipative"
    epsilon: float = 1e-5
    ell: Optional[float] = None               # auto: 2 delta*
    lam: Optional[float] = None               # auto: L / 4
    l_inner: Optional[float] = None           # auto: 4 delta*
    e_hat: Optional[float] = None             # auto: 8e-5 delta*
    f_hat: float = 1.0
    kernel_dims: str = "1"
    kernel_powers: str = "0,3"
    kernel_k_stars: str = "1,2,4,8"
    kernel_n_tau: int = 12
    kernel_n_x: int = 24
    entropy_window: Optional[float] = None    # auto: delta*
    norm: str = "grid"
    n_max: int = 48
    eps_lo: float = 0.05
    eps_hi: float = 2.0
    eps_per_decade: int = 16
    fit_lo: int = 10
    fit_hi: int = 40


@dataclass
class OutputSection:
    directory: str = "run"


SECTIONS = {
    "model": ModelSection,
    "scales": ScalesSection,
    "simulation": SimulationSection,
    "experiment": ExperimentSection,
    "output": OutputSection,
}


@dataclass
class RunConfig:
    model: ModelSection = field(default_factory=ModelSection)
    scales: ScalesSection = field(default_factory=ScalesSection)
    simulation: SimulationSection = field(default_factory=SimulationSection)
    experiment: ExperimentSection = field(default_factory=ExperimentSection)
    output: OutputSection = field(default_factory=OutputSection)

    # ---------------------------------------------------------------- parsing
    @classmethod
    def parse(cls, text: str, require_model: bool = True) -> "RunConfig":
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        try:
            cp.read_string(text)
        except configparser.Error as exc:
            raise ValidationError(f"config syntax error: {exc}") from None
        unknown = [s for s in cp.sections() if s not in SECTIONS]
        if unknown:
            raise ValidationError(f"unknown config section(s): {', '.join(unknown)}")
        if require_model and cp.has_section("model") and "q_star" not in cp["model"]:
            raise ValidationError("missing required key model.q_star")
        parts = {}
        for name, kind in SECTIONS.items():
            values = dict(cp[name]) if cp.has_section(name) else {}
            parts[name] = _build_section(name, kind, values)
        cfg = cls(**parts)
        cfg.check_static()
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            with open(path, encoding="utf-8") as fh:
                return cls.parse(fh.read())
        except OSError as exc:
            raise ValidationError(f"cannot read config {path}: {exc.strerror}") from None

    def dumps(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        for name in SECTIONS:
            sec = getattr(self, name)
            cp[name] = {f.name: _format(getattr(sec, f.name)) for f in dataclasses.fields(sec)}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.dumps())

    def hash(self) -> str:
        """Digest of everything that affects results (the output directory excluded)."""
        clone = dataclasses.replace(self, output=OutputSection())
        return hashlib.sha256(clone.dumps().encode()).hexdigest()

    # -------------------------------------------------------------- semantics
    def check_static(self) -> None:
        m = self.model
        if m.type != "cgl":
            raise ValidationError(f"model.type must be 'cgl', got {m.type!r}")
        if not m.q_star > 0:
            raise ValidationError("model.q_star must be positive")
        if m.m_star_override is not None and not m.m_star_override > 0:
            raise ValidationError("model.m_star_override must be positive")
        if not self.scales.k_star_prefactor >= 1.0:
            raise ValidationError("scales.k_star_prefactor must be at least 1")
        g = self.simulation.grid_points
        if g < 2 or g & (g - 1):
            raise ValidationError(f"simulation.grid_points={g} is not a power of two")
        e = self.experiment
        if e.support not in ("everywhere", "lattice-only"):
            raise ValidationError("experiment.support must be 'everywhere' or 'lattice-only'")
        if e.mode not in ("dissipative", "forward", "sampling"):
            raise ValidationError("experiment.mode must be dissipative, forward or sampling")
        if e.norm not in ("grid", "lattice"):
            raise ValidationError("experiment.norm must be 'grid' or 'lattice'")
        if not 0 < e.eps_lo < e.eps_hi:
            raise ValidationError("experiment.eps_lo and eps_hi must satisfy 0 < lo < hi")
        if not 1 <= e.fit_lo < e.fit_hi <= e.n_max:
            raise ValidationError("experiment.fit_lo/fit_hi must satisfy 1 <= lo < hi <= n_max")

    def model_spec(self) -> ModelSpec:
        m = self.model
        return ModelSpec.cgl(m.alpha, m.beta, m.q_star, m.m_star_override)

    def derived_scales(self, prefactor: Optional[float] = None) -> ScaleSet:
        p = self.scales.k_star_prefactor if prefactor is None else prefactor
        return derive_scales(self.model_spec(), p)

    def resolved(self) -> "Resolved":
        """Concrete numbers for every ``auto`` entry plus cross-field validation."""
        spec = self.model_spec()
        sc = derive_scales(spec, self.scales.k_star_prefactor)
        s, e = self.simulation, self.experiment
        tau, delta = sc.tau_star, sc.delta_star
        L = _or(s.domain_length, 128 * delta)
        G = s.grid_points
        h = L / G
        dt = _or(s.dt, tau / 8)
        r = Resolved(
            spec=spec, scales=sc, domain_length=L, grid_points=G, dt=dt,
            transient=_or(s.transient, 500 * tau), t_final=_or(s.t_final, 4096 * tau),
            snapshot_every=_or(s.snapshot_every, tau), seed=s.seed,
            twin_duration=_or(e.twin_duration, 512 * tau), record_every=_or(e.record_every, tau),
            ell=_or(e.ell, 2 * delta), lam=_or(e.lam, L / 4), l_inner=_or(e.l_inner, 4 * delta),
            e_hat=_or(e.e_hat, 8e-5 * delta), entropy_window=_or(e.entropy_window, delta),
        )
        try:
            grid_ratio(delta, h, "delta*")
        except ValidationError:
            raise ValidationError(
                f"simulation: delta*/h = {delta / h:.17g} must be an integer "
                f"(delta*={delta:.17g}, h=L/G={h:.17g})") from None
        if dt > stability_limit(spec) * (1 + 1e-12):
            raise ValidationError(
                f"simulation.dt={dt:.6g} exceeds the stability limit {stability_limit(spec):.6g}")
        for name in ("transient", "t_final", "snapshot_every", "twin_duration", "record_every"):
            value = getattr(r, name)
            if value < 0 or (name in ("snapshot_every", "record_every") and value == 0):
                raise ValidationError(f"{name} must be positive")
            n = value / dt
            if abs(n - round(n)) > 1e-9 * max(1.0, n):
                raise ValidationError(f"{name}={value:.17g} is not a multiple of dt={dt:.17g}")
        if r.lam > L / 4 * (1 + 1e-12):
            raise ValidationError(f"experiment.lam={r.lam:.6g} exceeds L/4={L / 4:.6g}")
        return r

    def dimensions(self) -> Tuple[int, ...]:
        return tuple(int(v) for v in _split(self.experiment.kernel_dims))

    def powers(self) -> Tuple[float, ...]:
        return tuple(float(v) for v in _split(self.experiment.kernel_powers))

    def kernel_k_stars(self) -> Tuple[float, ...]:
        return tuple(float(v) for v in _split(self.experiment.kernel_k_stars))


@dataclass
class Resolved:
    spec: ModelSpec
    scales: ScaleSet
    domain_length: float
    grid_points: int
    dt: float
    transient: float
    t_final: float
    snapshot_every: float
    seed: int
    twin_duration: float
    record_every: float
    ell: float
    lam: float
    l_inner: float
    e_hat: float
    entropy_window: float

    def as_dict(self) -> Dict[str, object]:
        out = {k: v for k, v in self.__dict__.items() if k not in ("spec", "scales")}
        out["scales"] = self.scales.as_dict()
        return out


def _or(value: Optional[float], default: float) -> float:
    return default if value is None else value


def _split(text: str):
    return [v.strip() for v in text.split(",") if v.strip()]


def _format(value) -> str:
    if value is None:
        return AUTO
    if isinstance(value, float):
        return format(value, ".17g")
    return str(value)


def _build_section(name: str, kind, values: Dict[str, str]):
    known = {f.name: f for f in dataclasses.fields(kind)}
    extra = sorted(set(values) - set(known))
    if extra:
        raise ValidationError(f"unknown key(s) in [{name}]: {', '.join(name + '.' + k for k in extra)}")
    hints = {f.name: f.type for f in dataclasses.fields(kind)}
    kwargs = {}
    for key, raw in values.items():
        kwargs[key] = _coerce(f"{name}.{key}", hints[key], raw.strip())
    return kind(**kwargs)


def _coerce(where: str, hint: str, raw: str):
    optional = "Optional" in hint
    if optional and raw.lower() in (AUTO, "none", ""):
        return None
    try:
        if "float" in hint:
            v = float(raw)
            if not math.isfinite(v):
                raise ValueError
            return v
        if "int" in hint:
            return int(raw)
    except ValueError:
        kind = "number" if "float" in hint else "integer"
        raise ValidationError(f"{where}: expected a {kind}, got {raw!r}") from None
    return raw

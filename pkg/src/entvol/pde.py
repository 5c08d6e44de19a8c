"""Periodic pseudo-spectral simulator for the one-dimensional CGL equation.

The two real components are carried internally as the complex amplitude
``v = u1 + i u2`` obeying ``v_t = growth*v + (1 + i alpha) v_xx - (1 + i beta) v|v|^2``.
Time stepping is ETDRK4 (exponential time differencing, fourth order) with
contour-integral coefficients and 2/3-rule dealiasing of the cubic term.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field as dc_field
from typing import BinaryIO, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import scipy.fft as sfft

from .model import CGL, ModelSpec, ValidationError, compute_m_star

MAGIC = b"ENTV"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIIIdd")
DT_FRACTION = 0.2  # dt <= DT_FRACTION / M*
_BLOWUP = 1e6


class DivergenceError(FloatingPointError):
    """Non-finite or runaway values appeared during time stepping."""

    def __init__(self, message: str, time: float):
        super().__init__(f"{message} at t={time:.17g}")
        self.time = time


@dataclass
class Field:
    """One snapshot: ``components`` has shape (N, G) on x_j = j*h, h = L/G."""

    components: np.ndarray
    domain_length: float
    time: float = 0.0

    def __post_init__(self):
        c = np.array(self.components, dtype=float, copy=True)
        if c.ndim != 2:
            raise ValidationError("components must be an (N, G) array")
        g = c.shape[1]
        if g < 2 or g & (g - 1):
            raise ValidationError(f"grid size G={g} is not a power of two")
        if not self.domain_length > 0:
            raise ValidationError("domain_length must be positive")
        self.components = c
        self.domain_length = float(self.domain_length)
        self.time = float(self.time)

    @property
    def n_components(self) -> int:
        return self.components.shape[0]

    @property
    def grid_points(self) -> int:
        return self.components.shape[1]

    @property
    def h(self) -> float:
        return self.domain_length / self.grid_points

    @property
    def x(self) -> np.ndarray:
        return np.arange(self.grid_points) * self.h

    def sup_norm(self) -> float:
        """Largest absolute component value over the grid."""
        return float(np.max(np.abs(self.components)))

    def modulus_max(self) -> float:
        """Largest Euclidean length of the component vector over the grid."""
        return float(np.max(np.sqrt(np.sum(self.components ** 2, axis=0))))

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.components)))

    def copy(self) -> "Field":
        return Field(self.components.copy(), self.domain_length, self.time)

    def as_complex(self) -> np.ndarray:
        if self.n_components != 2:
            raise ValidationError("complex view needs exactly 2 components")
        return self.components[0] + 1j * self.components[1]

    @classmethod
    def from_complex(cls, v: np.ndarray, domain_length: float, time: float) -> "Field":
        return cls(np.vstack([v.real, v.imag]), domain_length, time)


@dataclass
class TwinPair:
    """Two trajectories on a shared grid plus their recorded separation.

    ``history`` rows are ``(t, sup|u - v|, lattice norm of u - v)`` where the
    lattice norm uses spacing ``delta`` and half-width ``lam`` about x = 0.
    """

    u: Field
    v: Field
    spec: ModelSpec
    delta: float
    lam: float
    history: List[Tuple[float, float, float]] = dc_field(default_factory=list)
    eps0: float = 0.0
    support: str = "everywhere"
    gap: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.u.components.shape != self.v.components.shape:
            raise ValidationError("twin members must share the grid")
        if self.u.domain_length != self.v.domain_length or self.u.time != self.v.time:
            raise ValidationError("twin members must share domain and time")
        if self.gap is None:
            self.gap = self.u.components - self.v.components
        elif self.gap.shape != self.u.components.shape:
            raise ValidationError("gap must match the field shape")

    @property
    def difference(self) -> np.ndarray:
        """``u - v``, carried separately so it keeps full relative precision."""
        return self.gap

    def copy(self) -> "TwinPair":
        return TwinPair(self.u.copy(), self.v.copy(), self.spec, self.delta, self.lam,
                        list(self.history), self.eps0, self.support, self.gap.copy())

    def record(self) -> Tuple[float, float, float]:
        w = self.difference
        idx = lattice_indices(self.u.grid_points, self.u.domain_length, self.delta, self.lam)
        row = (self.u.time, float(np.max(np.abs(w))), float(np.max(np.abs(w[:, idx]))))
        self.history.append(row)
        return row

    def history_array(self) -> np.ndarray:
        return np.array(self.history, dtype=float).reshape(-1, 3)


def wavenumbers(grid_points: int, domain_length: float) -> np.ndarray:
    return 2 * math.pi * sfft.fftfreq(grid_points, d=domain_length / grid_points)


def dealias_mask(grid_points: int) -> np.ndarray:
    """Keep modes with |index| <= G/3."""
    idx = np.abs(sfft.fftfreq(grid_points, d=1.0 / grid_points))
    return idx <= grid_points / 3


def grid_ratio(length: float, h: float, what: str) -> int:
    """``length / h`` as an integer, or a validation error naming ``what``."""
    r = length / h
    m = int(round(r))
    if m < 1 or abs(r - m) > 1e-9 * max(1.0, r):
        raise ValidationError(f"{what}={length:.17g} is not an integer multiple of h={h:.17g}")
    return m


def lattice_indices(grid_points: int, domain_length: float, delta: float, lam: float,
                    center: float = 0.0) -> np.ndarray:
    """Grid indices of the lattice {center + n*delta : |n| delta <= lam} (periodic)."""
    h = domain_length / grid_points
    m = grid_ratio(delta, h, "lattice spacing")
    c = grid_ratio(center, h, "lattice centre") if center else 0
    n_max = int(math.floor(lam / delta + 1e-12))
    n = np.arange(-n_max, n_max + 1)
    return np.unique((c + n * m) % grid_points)


def stability_limit(spec: ModelSpec) -> float:
    return DT_FRACTION / compute_m_star(spec)


class CGLSolver:
    """ETDRK4 integrator for a fixed model on a fixed grid.

    ``growth`` scales the linear ``v`` term and ``cubic`` toggles the
    nonlinearity; both exist so that linear and pure-diffusion sectors can
    be exercised on their own.
    """

    def __init__(self, spec: ModelSpec, grid_points: int, domain_length: float, dt: float,
                 growth: float = 1.0, cubic: bool = True, workers: int = 1,
                 enforce_limit: bool = True, contour_points: int = 32):
        if not isinstance(spec.nonlinearity, CGL):
            raise ValidationError("the simulator supports the CGL nonlinearity only")
        if not dt > 0:
            raise ValidationError(f"dt must be positive, got {dt}")
        limit = stability_limit(spec)
        if enforce_limit and dt > limit * (1 + 1e-12):
            raise ValidationError(f"dt={dt:.6g} exceeds the stability limit 0.2/M* = {limit:.6g}")
        if grid_points < 2 or grid_points & (grid_points - 1):
            raise ValidationError(f"grid size G={grid_points} is not a power of two")
        self.spec = spec
        self.alpha = spec.nonlinearity.alpha
        self.beta = spec.nonlinearity.beta
        self.grid_points = grid_points
        self.domain_length = float(domain_length)
        self.dt = float(dt)
        self.growth = float(growth)
        self.cubic = bool(cubic)
        self.workers = int(workers)
        self.k = wavenumbers(grid_points, domain_length)
        self.lin = self.growth - (1 + 1j * self.alpha) * self.k ** 2
        self.mask = dealias_mask(grid_points)
        self._coefficients(contour_points)

    def _coefficients(self, m: int):
        h = self.dt
        lh = h * self.lin
        self.E = np.exp(lh)
        self.E2 = np.exp(lh / 2)
        r = np.exp(2j * math.pi * (np.arange(1, m + 1) - 0.5) / m)
        LR = lh[:, None] + r[None, :]
        eLR = np.exp(LR)
        self.Q = h * np.mean((np.exp(LR / 2) - 1) / LR, axis=1)
        self.f1 = h * np.mean((-4 - LR + eLR * (4 - 3 * LR + LR ** 2)) / LR ** 3, axis=1)
        self.f2 = h * np.mean((2 + LR + eLR * (LR - 2)) / LR ** 3, axis=1)
        self.f3 = h * np.mean((-4 - 3 * LR - LR ** 2 + eLR * (4 - LR)) / LR ** 3, axis=1)

    def fft(self, v):
        return sfft.fft(v, axis=-1, workers=self.workers)

    def ifft(self, vh):
        return sfft.ifft(vh, axis=-1, workers=self.workers)

    def nonlinear(self, vh: np.ndarray) -> np.ndarray:
        if not self.cubic:
            return np.zeros_like(vh)
        v = self.ifft(vh)
        out = self.fft(-(1 + 1j * self.beta) * v * (v.real ** 2 + v.imag ** 2))
        return out * self.mask

    def nonlinear_pair(self, sh: np.ndarray) -> np.ndarray:
        """Nonlinear term for a stacked ``(u, s)`` state with ``s = v - u``.

        The second row is ``N(u + s) - N(u)`` expanded so that no O(|u|)
        terms cancel, keeping ``s`` accurate relative to its own size.
        """
        if not self.cubic:
            return np.zeros_like(sh)
        u, s = self.ifft(sh)
        uu = u.real ** 2 + u.imag ** 2
        cross = 2 * (u.real * s.real + u.imag * s.imag) + s.real ** 2 + s.imag ** 2
        c = -(1 + 1j * self.beta)
        out = self.fft(np.vstack([c * u * uu, c * (s * uu + (u + s) * cross)]))
        return out * self.mask

    def advance(self, vh: np.ndarray, n_steps: int, t0: float = 0.0,
                offset_form: bool = False) -> np.ndarray:
        """Advance spectral coefficients (last axis is the grid) by ``n_steps``.

        With ``offset_form`` the input is a stacked ``(u, v - u)`` pair.  Every
        stage is affine in the nonlinear term, so this is the same scheme as
        stepping ``u`` and ``v`` separately, without the cancellation error.
        """
        nonlinear = self.nonlinear_pair if offset_form else self.nonlinear
        for i in range(n_steps):
            nv = nonlinear(vh)
            a = self.E2 * vh + self.Q * nv
            na = nonlinear(a)
            b = self.E2 * vh + self.Q * na
            nb = nonlinear(b)
            c = self.E2 * a + self.Q * (2 * nb - nv)
            nc = nonlinear(c)
            vh = self.E * vh + nv * self.f1 + 2 * (na + nb) * self.f2 + nc * self.f3
            if not np.all(np.isfinite(vh)):
                raise DivergenceError("non-finite values", t0 + (i + 1) * self.dt)
        if n_steps and np.max(np.abs(vh)) > _BLOWUP * self.grid_points:
            raise DivergenceError("solution blew up", t0 + n_steps * self.dt)
        return vh

    def _check(self, f: Field):
        if f.grid_points != self.grid_points or f.domain_length != self.domain_length:
            raise ValidationError("field grid does not match the solver grid")
        if f.n_components != 2:
            raise ValidationError("CGL fields have 2 components")

    def step(self, f: Field) -> Field:
        self._check(f)
        vh = self.advance(self.fft(f.as_complex()), 1, f.time)
        return Field.from_complex(self.ifft(vh), f.domain_length, f.time + self.dt)

    def steps_for(self, duration: float, what: str = "duration") -> int:
        n = duration / self.dt
        k = int(round(n))
        if abs(n - k) > 1e-9 * max(1.0, n):
            raise ValidationError(f"{what}={duration:.17g} is not a multiple of dt={self.dt:.17g}")
        return k

    def evolve(self, f: Field, t_final: float, snapshot_every: Optional[float] = None) -> List[Field]:
        """Snapshots at ``f.time + j*snapshot_every`` including start and end."""
        self._check(f)
        if t_final < f.time:
            raise ValidationError("t_final precedes the field time")
        total = self.steps_for(t_final - f.time, "t_final - t0")
        every = total if snapshot_every is None else self.steps_for(snapshot_every, "snapshot_every")
        every = max(every, 1)
        out = [f.copy()]
        vh = self.fft(f.as_complex())
        done = 0
        while done < total:
            n = min(every, total - done)
            vh = self.advance(vh, n, f.time + done * self.dt)
            done += n
            out.append(Field.from_complex(self.ifft(vh), f.domain_length, f.time + done * self.dt))
        return out

    def evolve_twin(self, pair: TwinPair, t_final: float, record_every: float) -> TwinPair:
        """Step both members together, appending to the separation history."""
        self._check(pair.u)
        total = self.steps_for(t_final - pair.u.time, "t_final - t0")
        every = max(self.steps_for(record_every, "record_every"), 1)
        if not pair.history:
            pair.record()
        t0 = pair.u.time
        gap = pair.difference
        vh = self.fft(np.vstack([pair.u.as_complex(), -(gap[0] + 1j * gap[1])]))
        L = pair.u.domain_length
        done = 0
        while done < total:
            n = min(every, total - done)
            vh = self.advance(vh, n, t0 + done * self.dt, offset_form=True)
            done += n
            u, s = self.ifft(vh)
            t = t0 + done * self.dt
            pair.u = Field.from_complex(u, L, t)
            pair.v = Field.from_complex(u + s, L, t)
            pair.gap = -np.vstack([s.real, s.imag])
            pair.record()
        return pair


def step(f: Field, dt: float, spec: ModelSpec, **options) -> Field:
    return CGLSolver(spec, f.grid_points, f.domain_length, dt, **options).step(f)


def evolve(f: Field, t_final: float, dt: float, snapshot_every: Optional[float],
           spec: ModelSpec, **options) -> List[Field]:
    return CGLSolver(spec, f.grid_points, f.domain_length, dt, **options).evolve(
        f, t_final, snapshot_every)


def evolve_twin(pair: TwinPair, t_final: float, dt: float, record_every: float,
                **options) -> TwinPair:
    solver = CGLSolver(pair.spec, pair.u.grid_points, pair.u.domain_length, dt, **options)
    return solver.evolve_twin(pair, t_final, record_every)


def heat_smooth(v: np.ndarray, domain_length: float, alpha: float, tau: float) -> np.ndarray:
    """Apply the linear diffusion semigroup exp(tau (1 + i alpha) d_xx) spectrally."""
    k = wavenumbers(v.shape[-1], domain_length)
    return sfft.ifft(sfft.fft(v) * np.exp(-(1 + 1j * alpha) * k ** 2 * tau))


def random_initial_field(spec: ModelSpec, grid_points: int, domain_length: float,
                         seed: int, smoothing_time: float) -> Field:
    """Uniform [-0.5, 0.5] components smoothed once by the diffusion semigroup."""
    if not isinstance(spec.nonlinearity, CGL):
        raise ValidationError("initial data generator supports CGL only")
    rng = np.random.default_rng(seed)
    raw = rng.uniform(-0.5, 0.5, size=(2, grid_points))
    v = heat_smooth(raw[0] + 1j * raw[1], domain_length, spec.nonlinearity.alpha, smoothing_time)
    return Field.from_complex(v, domain_length, 0.0)


def bump(r: np.ndarray, radius: float) -> np.ndarray:
    """C^2 bump (1 - (r/R)^2)^3 on |r| < R with peak 1."""
    s = np.clip(1 - (np.asarray(r) / radius) ** 2, 0.0, None)
    return s ** 3


def make_twin(f: Field, spec: ModelSpec, eps0: float, support: str = "everywhere",
              seed: int = 0, delta: Optional[float] = None, lam: Optional[float] = None,
              smoothing_time: Optional[float] = None) -> TwinPair:
    """Return (u, u + rho) with sup|rho| = eps0.

    ``support="lattice-only"`` builds rho from bumps of radius delta/4
    centred midway between lattice points, so rho vanishes on the lattice.
    ``"everywhere"`` uses smoothed random noise rescaled to sup eps0.
    """
    if eps0 < 0:
        raise ValidationError("perturbation amplitude must be non-negative")
    if eps0 > spec.q_star / 2:
        raise ValidationError(f"eps0={eps0} exceeds Q*/2={spec.q_star / 2}")
    if support not in ("everywhere", "lattice-only"):
        raise ValidationError("support must be 'everywhere' or 'lattice-only'")
    G, L, h = f.grid_points, f.domain_length, f.h
    if delta is None:
        raise ValidationError("lattice spacing delta is required")
    m = grid_ratio(delta, h, "lattice spacing")
    lam = L / 4 if lam is None else lam
    rng = np.random.default_rng(seed)
    rho = np.zeros_like(f.components)
    if eps0 > 0:
        if support == "lattice-only":
            if m % 2:
                raise ValidationError("lattice-only twins need an even number of grid steps per lattice cell")
            n_cells = grid_ratio(L, delta, "domain length")
            x = f.x
            radius = delta / 4
            signs = rng.choice([-1.0, 1.0], size=(f.n_components, n_cells))
            for j in range(n_cells):
                centre = (j + 0.5) * delta
                dist = np.abs((x - centre + L / 2) % L - L / 2)
                rho += signs[:, j:j + 1] * bump(dist, radius)[None, :]
            rho *= eps0
        else:
            raw = rng.uniform(-1.0, 1.0, size=f.components.shape)
            ts = smoothing_time if smoothing_time is not None else (delta / 4) ** 2
            k = wavenumbers(G, L)
            rho = sfft.ifft(sfft.fft(raw, axis=-1) * np.exp(-k ** 2 * ts), axis=-1).real
            rho *= eps0 / np.max(np.abs(rho))
    v = Field(f.components + rho, L, f.time)
    pair = TwinPair(f.copy(), v, spec, float(delta), float(lam), eps0=float(eps0),
                    support=support, gap=-rho)
    return pair


@dataclass
class GrowthFit:
    rate: float
    intercept: float
    t_range: Tuple[float, float]
    n_points: int
    residual: float


def fit_growth_rate(history: np.ndarray, floor: float = 0.0, ceiling: float = 1e-2,
                    column: int = 1, t_min: float = 0.0) -> GrowthFit:
    """Least-squares slope of log separation while it sits inside (floor, ceiling)."""
    h = np.asarray(history, dtype=float)
    t, s = h[:, 0], h[:, column]
    ok = (s > floor) & (s > 0) & (t >= t_min)
    # stop at first saturation so late nonlinear plateaus do not bias the slope
    above = np.nonzero(s >= ceiling)[0]
    if above.size:
        ok &= np.arange(s.size) < above[0]
    if ok.sum() < 3:
        raise ValidationError("fewer than 3 usable points for the growth-rate fit")
    A = np.vstack([t[ok], np.ones(ok.sum())]).T
    coef, res, *_ = np.linalg.lstsq(A, np.log(s[ok]), rcond=None)
    resid = float(np.sqrt(res[0] / ok.sum())) if res.size else 0.0
    return GrowthFit(float(coef[0]), float(coef[1]), (float(t[ok][0]), float(t[ok][-1])),
                     int(ok.sum()), resid)


@dataclass
class LyapunovEstimate:
    rate: float
    stderr: float
    intervals: int
    local_rates: np.ndarray


def lyapunov_rate(f: Field, spec: ModelSpec, dt: float, duration: float, eps0: float = 1e-8,
                  renorm_every: float = 1.0, discard: float = 0.0, seed: int = 0,
                  **options) -> LyapunovEstimate:
    """Largest separation growth rate by repeated renormalisation of a twin.

    The offset is rescaled to root-mean-square size ``eps0`` after every
    ``renorm_every``; the rate averages the logarithmic growth per interval
    after the first ``discard`` time units, which let the offset align with
    the most unstable direction.
    """
    solver = CGLSolver(spec, f.grid_points, f.domain_length, dt, **options)
    n = solver.steps_for(renorm_every, "renorm_every")
    total = solver.steps_for(duration, "duration") // n
    skip = int(math.ceil(discard / renorm_every - 1e-9))
    if total - skip < 2:
        raise ValidationError("duration leaves fewer than 2 renormalisation intervals")
    rng = np.random.default_rng(seed)
    s = rng.standard_normal(f.grid_points) + 1j * rng.standard_normal(f.grid_points)
    s *= eps0 / np.sqrt(np.mean(np.abs(s) ** 2))
    state = solver.fft(np.vstack([f.as_complex(), s]))
    rates = []
    for i in range(total):
        state = solver.advance(state, n, f.time + i * n * dt, offset_form=True)
        gap = solver.ifft(state[1])
        size = float(np.sqrt(np.mean(np.abs(gap) ** 2)))
        if not size > 0:
            raise DivergenceError("offset collapsed to zero", f.time + (i + 1) * n * dt)
        if i >= skip:
            rates.append(math.log(size / eps0) / (n * dt))
        state[1] *= eps0 / size
    r = np.array(rates)
    return LyapunovEstimate(float(r.mean()), float(r.std(ddof=1) / math.sqrt(r.size)), r.size, r)


def write_snapshots(stream: BinaryIO, fields: Iterable[Field]) -> int:
    """Append ENTV records for ``fields``; returns the number written."""
    n = 0
    for f in fields:
        N, G = f.components.shape
        stream.write(_HEADER.pack(MAGIC, FORMAT_VERSION, N, G, f.domain_length, f.time))
        stream.write(np.ascontiguousarray(f.components, dtype="<f8").tobytes())
        n += 1
    return n


def read_snapshots(stream: BinaryIO) -> List[Field]:
    out = []
    while True:
        head = stream.read(_HEADER.size)
        if not head:
            return out
        if len(head) < _HEADER.size:
            raise ValidationError("truncated snapshot header")
        magic, version, N, G, L, t = _HEADER.unpack(head)
        if magic != MAGIC:
            raise ValidationError(f"bad snapshot magic {magic!r}")
        if version != FORMAT_VERSION:
            raise ValidationError(f"unsupported snapshot format version {version}")
        raw = stream.read(8 * N * G)
        if len(raw) < 8 * N * G:
            raise ValidationError("truncated snapshot payload")
        out.append(Field(np.frombuffer(raw, dtype="<f8").reshape(N, G), L, t))


def save_snapshots(path, fields: Sequence[Field]) -> int:
    with open(path, "wb") as fh:
        return write_snapshots(fh, fields)


def load_snapshots(path) -> List[Field]:
    with open(path, "rb") as fh:
        return read_snapshots(fh)

"""Discrete sup-norms, cardinal-series reconstruction and twin experiments.

Band-limited reconstruction follows the half-spacing scheme: samples at
``x_n = n pi / (2 sigma)``, odd samples recover the derivative at a base
point and even samples carry the interpolating series.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
import scipy.fft as sfft
from scipy.optimize import nnls
from scipy.special import polygamma

from .kernels import DEFAULT_PROFILE, CutoffProfile
from .model import ScaleSet, ValidationError
from .pde import CGLSolver, Field, TwinPair, grid_ratio, lattice_indices, wavenumbers

POLE_TOL = 1e-8

# Pointwise constants of the certified reconstruction bound |f| <= C6 alpha + C7 S'/N.
# C6 sums the sample coefficients: 1 (derivative term) + 1 (f(0) term)
# + 4 ln 2 / pi (even-sample series); C7 bounds both truncation tails.
C6 = 2.0 + 4.0 * math.log(2.0) / math.pi
C7 = 2.0 / math.pi ** 2 + 2.0 / math.pi
CONSTANTS_VERSION = "1"


# --------------------------------------------------------------------------- lattices

@dataclass
class SampleLattice:
    """Samples on {n delta : |n| delta <= lam}; ``values`` has shape (N, 2J+1)."""

    delta: float
    lam: float
    values: np.ndarray

    def __post_init__(self):
        v = np.atleast_2d(np.asarray(self.values, dtype=float))
        if not (self.delta > 0 and self.lam >= 0):
            raise ValidationError("delta must be positive and lam non-negative")
        j = self.half_count
        if v.shape[1] != 2 * j + 1:
            raise ValidationError(f"expected {2 * j + 1} lattice values, got {v.shape[1]}")
        if not np.all(np.isfinite(v)):
            raise ValidationError("lattice values must be finite")
        self.values = v

    @property
    def half_count(self) -> int:
        return int(math.floor(self.lam / self.delta + 1e-12))

    @property
    def indices(self) -> np.ndarray:
        j = self.half_count
        return np.arange(-j, j + 1)

    @property
    def positions(self) -> np.ndarray:
        return self.indices * self.delta

    def sup(self) -> float:
        return float(np.max(np.abs(self.values))) if self.values.size else 0.0

    @classmethod
    def from_field(cls, f: Field, delta: float, lam: float, center: float = 0.0) -> "SampleLattice":
        h = f.h
        m = grid_ratio(delta, h, "lattice spacing")
        c = grid_ratio(center, h, "lattice centre") if center else 0
        j = int(math.floor(lam / delta + 1e-12))
        idx = (c + np.arange(-j, j + 1) * m) % f.grid_points
        return cls(delta, lam, f.components[:, idx])


def discrete_sup_norm(f: Field, delta: float, lam: float, center: float = 0.0) -> float:
    """max over components and |n| delta <= lam of |f(center + n delta)|."""
    idx = lattice_indices(f.grid_points, f.domain_length, delta, lam, center)
    return float(np.max(np.abs(f.components[:, idx])))


def window_indices(grid_points: int, domain_length: float, lam: float) -> np.ndarray:
    """Grid indices with periodic distance to x = 0 at most ``lam``."""
    x = np.arange(grid_points) * (domain_length / grid_points)
    dist = np.abs((x + domain_length / 2) % domain_length - domain_length / 2)
    return np.nonzero(dist <= lam * (1 + 1e-12))[0]


def window_sup(w: np.ndarray, domain_length: float, lam: float) -> float:
    idx = window_indices(w.shape[-1], domain_length, lam)
    return float(np.max(np.abs(w[..., idx]))) if idx.size else 0.0


# --------------------------------------------------------------------------- cardinal series

@dataclass
class BandlimitedWitness:
    """Samples of a function assumed to lie in the Bernstein class of type sigma.

    ``samples[n + J]`` holds f(n pi / (2 sigma)) for |n| <= J.  Membership in
    the class with bound S is an assumption carried along, not checked.
    """

    sigma: float
    bound: float
    samples: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=float)
        if not self.sigma > 0:
            raise ValidationError("sigma must be positive")
        if s.ndim != 1 or s.size % 2 == 0 or s.size < 3:
            raise ValidationError("samples must be a 1-D array of odd length 2J+1 with J >= 1")
        self.samples = s

    @property
    def J(self) -> int:
        return (self.samples.size - 1) // 2

    @property
    def spacing(self) -> float:
        return math.pi / (2 * self.sigma)

    def sample(self, n):
        n = np.asarray(n)
        if np.any(np.abs(n) > self.J):
            bad = np.unique(n[np.abs(n) > self.J])
            shown = ", ".join(map(str, bad[:6])) + (", ..." if bad.size > 6 else "")
            raise ValidationError(f"missing samples at {bad.size} indices [{shown}]; "
                                  f"need |n| <= {int(np.max(np.abs(bad)))}, have J={self.J}")
        return self.samples[n + self.J]

    @classmethod
    def from_function(cls, f: Callable, sigma: float, bound: float, J: int) -> "BandlimitedWitness":
        n = np.arange(-J, J + 1)
        return cls(sigma, bound, np.asarray(f(n * math.pi / (2 * sigma)), dtype=float))


def _odd_tail(N: int) -> float:
    """Sum of m^-2 over odd |m| > 2N+1."""
    return 0.5 * float(polygamma(1, N + 1.5))


def cardinal_derivative_at_zero(w: BandlimitedWitness, N: int, base: int = 0) -> Tuple[float, float]:
    """f'(x_base) from odd-offset samples; returns ``(value, tail_bound)``.

    ``base`` is an even sample index about which the series is centred.
    """
    if N < 0:
        raise ValidationError("truncation N must be non-negative")
    n = np.arange(-N - 1, N + 1)
    odd = 2 * n + 1
    vals = w.sample(base + odd)
    coef = (4 * w.sigma / math.pi ** 2) * ((-1.0) ** n) / odd.astype(float) ** 2
    value = float(np.sum(coef * vals))
    tail = (4 * w.sigma / math.pi ** 2) * w.bound * _odd_tail(N)
    return value, tail


def cardinal_eval(w: BandlimitedWitness, x, N: int, fprime0: Optional[float] = None,
                  base: int = 0) -> np.ndarray:
    """Evaluate the truncated cardinal series at ``x`` (array or scalar).

    The series is expanded about the even sample ``x_base``.  When
    ``fprime0`` (the derivative there) is not supplied it is recovered
    from the odd samples with the same truncation.
    """
    if N < 1:
        raise ValidationError("truncation N must be at least 1")
    if base % 2:
        raise ValidationError("the expansion point must be an even sample index")
    sigma = w.sigma
    if fprime0 is None:
        fprime0, _ = cardinal_derivative_at_zero(w, N, base)
    n = np.concatenate([np.arange(-N, 0), np.arange(1, N + 1)])
    fe = w.sample(base + 2 * n)
    f0 = float(w.sample(np.array(base)))
    x = np.asarray(x, dtype=float)
    z = sigma * (x - base * w.spacing)
    zf = z.ravel()
    sz = np.sin(zf)
    out = np.empty_like(zf)
    # removable singularities: z = 0 and z = n pi
    near = np.round(zf / math.pi)
    pole = np.abs(zf - near * math.pi) < POLE_TOL
    on = pole & (np.abs(near) <= N)
    out[on] = np.where(near[on] == 0, f0, w.sample(base + 2 * near[on].astype(int)))
    off = ~on
    zo, so = zf[off], sz[off]
    with np.errstate(divide="ignore", invalid="ignore"):
        sinc = np.where(zo == 0, 1.0, so / np.where(zo == 0, 1.0, zo))
        terms = ((-1.0) ** np.abs(n))[None, :] * fe[None, :] / (
            n[None, :] * math.pi * (zo[:, None] - n[None, :] * math.pi))
    out[off] = fprime0 * so / sigma + f0 * sinc + zo * so * terms.sum(axis=1)
    return out.reshape(x.shape) if x.shape else out[0]


@dataclass
class CertifiedReport:
    interval: float
    alpha: float
    bound: float
    derivative_tail: float
    c6: float = C6
    c7: float = C7
    constants_version: str = CONSTANTS_VERSION
    x: Optional[np.ndarray] = None
    values: Optional[np.ndarray] = None

    def as_dict(self) -> dict:
        d = {"interval": self.interval, "alpha": self.alpha, "bound": self.bound,
             "derivative_tail": self.derivative_tail, "c6": self.c6, "c7": self.c7,
             "constants_version": self.constants_version}
        if self.values is not None:
            d["max_abs_reconstruction"] = float(np.max(np.abs(self.values)))
        return d


def certified_interval(J: int, N: int, sigma: float) -> float:
    """Half-width on which every point has an even base with 2N+1 odd neighbours."""
    return math.pi * (J - 2 * N - 2) / (2 * sigma)


def reconstruct(w: BandlimitedWitness, x, N: int) -> np.ndarray:
    """Series evaluation re-centred at the nearest even sample of each point."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    base = 2 * np.round(x / (2 * w.spacing)).astype(int)
    out = np.empty_like(x)
    for b in np.unique(base):
        sel = base == b
        out[sel] = cardinal_eval(w, x[sel], N, base=int(b))
    return out


def reconstruct_and_certify(lattice: SampleLattice, sigma: float, S_prime: float, N: int,
                            x: Optional[np.ndarray] = None, component: int = 0) -> CertifiedReport:
    """Pointwise bound C6*alpha + C7*S'/N on the certified interval."""
    if abs(lattice.delta - math.pi / (2 * sigma)) > 1e-12 * lattice.delta:
        raise ValidationError(
            f"lattice spacing {lattice.delta:.17g} differs from pi/(2 sigma) = {math.pi / (2 * sigma):.17g}")
    if N < 1:
        raise ValidationError("truncation N must be at least 1")
    J = lattice.half_count
    if J <= 2 * N + 2:
        raise ValidationError(f"empty certification interval: J={J} <= 2N+2={2 * N + 2}")
    alpha = lattice.sup()
    half = certified_interval(J, N, sigma)
    w = BandlimitedWitness(sigma, S_prime, lattice.values[component])
    rep = CertifiedReport(half, alpha, C6 * alpha + C7 * S_prime / N,
                          (4 / math.pi ** 2) * S_prime * _odd_tail(N))
    if x is not None:
        x = np.asarray(x, dtype=float)
        if np.any(np.abs(x) > half * (1 + 1e-12)):
            raise ValidationError("requested points leave the certified interval")
        rep.x, rep.values = x, reconstruct(w, x, N)
    return rep


# --------------------------------------------------------------------------- spectral split

def frequency_split(w: np.ndarray, domain_length: float, k_star: float,
                    profile: CutoffProfile = DEFAULT_PROFILE) -> Tuple[np.ndarray, np.ndarray]:
    """Low part (support |k| <= 2k*) and high part (support |k| >= k*) of ``w``."""
    k = wavenumbers(w.shape[-1], domain_length)
    chi = profile(k / k_star)
    wh = sfft.fft(w, axis=-1)
    low = sfft.ifft(wh * chi, axis=-1).real
    high = sfft.ifft(wh * (1.0 - chi), axis=-1).real
    return low, high


def dissipative_prefactor(scales: ScaleSet, d: int = 1) -> float:
    r = scales.nu_star * scales.k_star ** 2 / scales.m_star
    return math.exp(-r / 2) + (1.0 / r) ** (1 - d / 4)


@dataclass
class DissipativeReport:
    allk_ratio: float
    highk_ratio: float
    predicted_prefactor: float
    normalised_highk: float
    numerator_allk: float
    numerator_highk: float
    denominator: float
    k_star: float
    ell: float
    lam: float
    split_residual: float
    steps: List[Tuple[float, float, float]] = dc_field(default_factory=list)

    def as_dict(self) -> dict:
        d = dict(self.__dict__)
        d["steps"] = [list(s) for s in self.steps]
        return d


def _copy_pair(pair: TwinPair) -> TwinPair:
    return pair.copy()


def run_dissipative_experiment(pair: TwinPair, scales: ScaleSet, ell: float, lam: float,
                               dt: float, profile: CutoffProfile = DEFAULT_PROFILE,
                               solver_options: Optional[dict] = None) -> DissipativeReport:
    """Evolve a copy of the pair by tau* and measure the localised bounds."""
    L, G = pair.u.domain_length, pair.u.grid_points
    h = L / G
    if ell < 2 * h:
        raise ValidationError(f"ell={ell} is below two grid spacings")
    if ell >= lam:
        raise ValidationError("ell must be smaller than lam")
    if lam > L / 4 * (1 + 1e-12):
        raise ValidationError(f"lam={lam} exceeds L_dom/4={L / 4}")
    w0 = pair.difference
    solver = CGLSolver(pair.spec, G, L, dt, **(solver_options or {}))
    n = solver.steps_for(scales.tau_star, "tau_star")
    work = _copy_pair(pair)
    work.history = []
    solver.evolve_twin(work, pair.u.time + n * dt, dt)
    if abs(work.u.time - pair.u.time - scales.tau_star) > 1e-9 * scales.tau_star:
        raise ValidationError("tau* was not reached")
    w1 = work.difference
    low, high = frequency_split(w1, L, scales.k_star, profile)
    denom = window_sup(w0, L, lam) + (scales.delta_star / ell) * float(np.max(np.abs(w0)))
    num_all = window_sup(w1, L, lam - ell)
    num_high = window_sup(high, L, lam - ell)
    pref = dissipative_prefactor(scales)
    ra = num_all / denom if denom > 0 else 0.0
    rh = num_high / denom if denom > 0 else 0.0
    return DissipativeReport(ra, rh, pref, rh / pref, num_all, num_high, denom,
                             scales.k_star, ell, lam, float(np.max(np.abs(low + high - w1))),
                             list(work.history))


# --------------------------------------------------------------------------- forward / sampling

@dataclass
class ForwardSample:
    K: float
    epsilon: float
    K_prime: float
    high_sup: float
    chain_bound: float


@dataclass
class ForwardReport:
    samples: List[ForwardSample]
    A_hat: float
    rho: float
    A_hat_direct: float
    rho_direct: float
    k_star_prefactor: float

    def as_dict(self) -> dict:
        return {"A_hat": self.A_hat, "rho": self.rho, "A_hat_direct": self.A_hat_direct,
                "rho_direct": self.rho_direct, "k_star_prefactor": self.k_star_prefactor,
                "samples": [s.__dict__ for s in self.samples]}


def forward_step(pair: TwinPair, scales: ScaleSet, lam: float, lam_prime: float, dt: float,
                 delta: Optional[float] = None, profile: CutoffProfile = DEFAULT_PROFILE,
                 solver_options: Optional[dict] = None) -> ForwardSample:
    """One tau* step: (K, eps, K') plus the sample-reconstruction chain bound.

    The chain bound splits w(tau*) at k*, bounds the low part by C6 times its
    lattice samples and keeps the high part as measured:
    C6*eps + (1 + C6)*sup|w_>|.
    """
    L, G = pair.u.domain_length, pair.u.grid_points
    delta = scales.delta_star if delta is None else delta
    K = window_sup(pair.difference, L, lam)
    solver = CGLSolver(pair.spec, G, L, dt, **(solver_options or {}))
    n = solver.steps_for(scales.tau_star, "tau_star")
    work = _copy_pair(pair)
    solver.evolve_twin(work, pair.u.time + n * dt, n * dt)
    w1 = work.difference
    idx = lattice_indices(G, L, delta, lam)
    eps = float(np.max(np.abs(w1[:, idx])))
    _, high = frequency_split(w1, L, scales.k_star, profile)
    hs = window_sup(high, L, lam)
    return ForwardSample(K, eps, window_sup(w1, L, lam_prime), hs, C6 * eps + (1 + C6) * hs)


def fit_forward(samples: Sequence[ForwardSample], k_star_prefactor: float) -> ForwardReport:
    """Non-negative fits K' ~ A eps + rho K for the chain bound and the direct measurement."""
    A = np.array([[s.epsilon, s.K] for s in samples])
    chain = np.array([s.chain_bound for s in samples])
    direct = np.array([s.K_prime for s in samples])
    # scale columns so nnls is not dominated by magnitude differences
    scale = np.maximum(np.max(np.abs(A), axis=0), 1e-300)
    (a1, r1), _ = nnls(A / scale, chain)
    (a2, r2), _ = nnls(A / scale, direct)
    return ForwardReport(list(samples), a1 / scale[0], r1 / scale[1], a2 / scale[0],
                         r2 / scale[1], k_star_prefactor)


@dataclass
class SamplingReport:
    epsilon: float
    m: int
    L_inner: float
    windows: List[float]
    discrete_norms: List[float]
    violations: List[int]
    final_sup: float
    ratio: float
    epsilon_observed: float
    ratio_observed: float
    inconclusive: bool
    steps: List[Tuple[float, float, float]] = dc_field(default_factory=list)

    def as_dict(self) -> dict:
        d = dict(self.__dict__)
        d["steps"] = [list(s) for s in self.steps]
        return d


def sampling_window_steps(epsilon: float, F_hat: float) -> int:
    if not 0 < epsilon < 1:
        raise ValidationError("epsilon must lie in (0, 1)")
    return max(1, int(math.ceil(F_hat * math.log(1.0 / epsilon))))


def run_sampling_experiment(pair: TwinPair, scales: ScaleSet, epsilon: float, L_inner: float,
                            dt: float, E_hat: float, F_hat: float,
                            delta: Optional[float] = None,
                            solver_options: Optional[dict] = None) -> SamplingReport:
    """Evolve m = ceil(F log(1/eps)) steps of tau* checking lattice samples.

    Windows shrink linearly from L_0 = L_inner + E/eps at the first step to
    L_inner at the last; a step whose lattice norm exceeds eps is recorded
    as a premise violation.
    """
    L, G = pair.u.domain_length, pair.u.grid_points
    delta = scales.delta_star if delta is None else delta
    m = sampling_window_steps(epsilon, F_hat)
    L0 = L_inner + E_hat / epsilon
    if L0 > L / 4 * (1 + 1e-12):
        raise ValidationError(f"premise window L_0={L0:.6g} exceeds L_dom/4={L / 4:.6g}")
    solver = CGLSolver(pair.spec, G, L, dt, **(solver_options or {}))
    n = solver.steps_for(scales.tau_star, "tau_star")
    work = _copy_pair(pair)
    windows, norms, viol, steps = [], [], [], []
    for j in range(m + 1):
        Lj = L0 + (L_inner - L0) * j / m
        if j:
            solver.evolve_twin(work, work.u.time + n * dt, n * dt)
        w = work.difference
        idx = lattice_indices(G, L, delta, Lj)
        dn = float(np.max(np.abs(w[:, idx])))
        windows.append(Lj)
        norms.append(dn)
        steps.append((work.u.time, float(np.max(np.abs(w))), dn))
        if dn > epsilon:
            viol.append(j)
    final = window_sup(work.difference, L, L_inner)
    eps_obs = max(norms)
    return SamplingReport(epsilon, m, L_inner, windows, norms, viol, final, final / epsilon,
                          eps_obs, final / eps_obs if eps_obs > 0 else 0.0,
                          len(viol) == m + 1, steps)


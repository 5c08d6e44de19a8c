"""Heat-semigroup convolution kernels and their frequency-split variants.

All kernels use the mass-one normalisation

    G_tau(x) = (2 pi)^-d  int d^dk  exp(i k.x) exp(-D |k|^2 tau) c(|k|)

with ``c = 1`` (full), ``chi(|k|/k*)`` (low) or ``1 - chi(|k|/k*)`` (high).
The matrix exponential is diagonalised once through the eigenvectors of
``D`` so every quadrature reduces to scalar integrals with a complex
diffusion constant.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy.special import j0

from .model import ValidationError, d_star_of, nu_star_of

VARIANTS = ("full", "low", "high")
QUAD_TOL = 1e-10
_GL_ORDER = 24
_MAX_PANELS = 1 << 13


class QuadratureError(RuntimeError):
    def __init__(self, message: str, achieved: float):
        super().__init__(f"{message} (achieved {achieved:.3g})")
        self.achieved = achieved


def _smooth_step(t):
    # C-infinity transition from 1 at t=0 to 0 at t=1
    t = np.clip(t, 0.0, 1.0)
    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        a = np.where(t < 1.0, np.exp(-1.0 / np.where(t < 1.0, 1.0 - t, 1.0)), 0.0)
        b = np.where(t > 0.0, np.exp(-1.0 / np.where(t > 0.0, t, 1.0)), 0.0)
    return a / (a + b)


def _c2_step(t):
    t = np.clip(t, 0.0, 1.0)
    return 1.0 - t ** 3 * (10.0 - 15.0 * t + 6.0 * t * t)


@dataclass(frozen=True)
class CutoffProfile:
    """Radial cutoff ``chi``: 1 on ``|s| <= 1``, 0 on ``|s| >= 2``.

    ``kind="smooth"`` is C-infinity; ``kind="c2"`` is the quintic smoothstep,
    useful for probing how the measured constants depend on the cutoff.
    """

    kind: str = "smooth"

    def __post_init__(self):
        if self.kind not in ("smooth", "c2"):
            raise ValidationError(f"unknown cutoff kind {self.kind!r}")

    @property
    def smoothness(self) -> float:
        return math.inf if self.kind == "smooth" else 2

    def __call__(self, s):
        t = np.abs(np.asarray(s, dtype=float)) - 1.0
        step = _smooth_step if self.kind == "smooth" else _c2_step
        return step(t)


DEFAULT_PROFILE = CutoffProfile()


@dataclass
class KernelSample:
    tau: float
    x: object
    value: np.ndarray
    variant: str
    k_star: Optional[float] = None
    achieved_tol: float = 0.0


def _segments(variant, k_star, k_max):
    if variant == "full":
        return [(0.0, k_max)]
    if variant == "low":
        return [(0.0, k_star), (k_star, 2 * k_star)]
    cuts = [k_star, 2 * k_star, max(k_max, 2 * k_star)]
    return [(a, b) for a, b in zip(cuts[:-1], cuts[1:]) if b > a]


def _cutoff_factor(k, variant, k_star, profile):
    if variant == "full":
        return np.ones_like(k)
    chi = profile(k / k_star)
    return chi if variant == "low" else 1.0 - chi


def _mm(a, g):
    """``a @ g`` for real or complex ``a`` (x, p) and complex ``g`` (p, ...)."""
    shape = g.shape
    g2 = g.reshape(shape[0], -1)
    if np.iscomplexobj(a):
        out = a @ g2
    else:
        # strided real/imag views defeat BLAS; copy them first
        out = a @ np.ascontiguousarray(g2.real) + 1j * (a @ np.ascontiguousarray(g2.imag))
    return out.reshape((a.shape[0],) + shape[1:])


def _panel_sum(mid, offs, gw, r, d):
    """Sum ``ang(k, r) * gw`` over Gauss nodes ``k = mid[p] + offs[i]``.

    ``gw`` has shape (panels, nodes, n_lam).  For d = 1, 3 the angular factor
    is split with the addition theorem so trig calls scale with
    panels + nodes instead of panels * nodes.
    """
    if d == 2:
        k = (mid[:, None] + offs[None, :]).ravel()
        ang = j0(np.multiply.outer(r, k)) * k / (2 * math.pi)
        return _mm(ang, gw.reshape(k.size, -1))
    pm = np.multiply.outer(r, mid)
    po = np.multiply.outer(r, offs)[:, :, None]
    if d == 1:
        a = _mm(np.cos(pm), gw)
        b = _mm(np.sin(pm), gw)
        return np.sum(a * np.cos(po) - b * np.sin(po), axis=1) / math.pi
    # d == 3: k^2 sinc(k r) = k sin(k r) / r
    k = mid[:, None] + offs[None, :]
    gk = gw * k[:, :, None]
    a = _mm(np.sin(pm), gk)
    b = _mm(np.cos(pm), gk)
    s = np.sum(a * np.cos(po) + b * np.sin(po), axis=1)
    out = np.empty_like(s)
    nz = r != 0
    out[nz] = s[nz] / r[nz, None]
    out[~nz] = np.sum(gk * k[:, :, None], axis=(0, 1))
    return out / (2 * math.pi ** 2)


def _quad_scalar(lams, tau, r, d, variant, k_star, profile, tol):
    """Integrate for every complex diffusion constant in ``lams``.

    Returns an array of shape ``(len(r), len(lams))`` and the achieved
    successive-refinement difference.
    """
    lams = np.asarray(lams, dtype=complex)
    re_min = float(np.min(lams.real))
    k_max = max(4.0 * (k_star or 0.0), 10.0 / math.sqrt(re_min * tau))
    segs = _segments(variant, k_star, k_max)
    x_scale = float(np.max(np.abs(r))) if r.size else 0.0
    nodes, weights = leggauss(_GL_ORDER)

    def integrate(n_panels):
        total = np.zeros((r.size, lams.size), dtype=complex)
        mag = np.zeros(lams.size)
        for a, b in segs:
            half = 0.5 * (b - a) / n_panels
            mid = a + half * (2 * np.arange(n_panels) + 1)
            k = mid[:, None] + half * nodes[None, :]
            c = _cutoff_factor(k, variant, k_star, profile) * (half * weights)[None, :]
            gw = np.exp(-np.multiply.outer(k * k * tau, lams)) * c[:, :, None]
            total += _panel_sum(mid, half * nodes, gw, r, d)
            mag += np.sum(np.abs(gw) * (k ** (d - 1))[:, :, None], axis=(0, 1))
        return total, mag

    # a 24-node panel integrates about two periods of cos(k x) to full precision
    width = max(b - a for a, b in segs)
    n = max(2, int(math.ceil(width * x_scale / (4 * math.pi) + width * math.sqrt(re_min * tau))))
    n = min(n, _MAX_PANELS // 2)
    prev, _ = integrate(n)
    while True:
        n *= 2
        cur, mag = integrate(n)
        diff = float(np.max(np.abs(cur - prev))) if cur.size else 0.0
        floor = 64 * np.finfo(float).eps * float(np.max(mag))
        if diff <= max(tol, floor):
            return cur, diff
        if n >= _MAX_PANELS:
            raise QuadratureError("kernel quadrature did not converge", diff)
        prev = cur


def _planar_scalar(lams, tau, r, variant, k_star, profile, tol):
    """d = 2 full/high kernels without Bessel quadrature over the Gaussian tail.

    The uncut Gaussian factorises over coordinates, so the full planar kernel
    at (r, 0) is the product of two one-dimensional quadratures; the high
    kernel is full minus the compactly supported low kernel, which is only
    used while the high part is not exponentially small.
    """
    pts = np.concatenate([r, [0.0]])
    one, e1 = _quad_scalar(lams, tau, pts, 1, "full", None, profile, tol)
    full = one[:-1] * one[-1][None, :]
    if variant == "full":
        return full, e1 * float(np.max(np.abs(one)))
    low, e2 = _quad_scalar(lams, tau, r, 2, "low", k_star, profile, tol)
    return full - low, e1 * float(np.max(np.abs(one))) + e2


def _conjugate_classes(lam):
    reps, src, conj = [], [], []
    for l in lam:
        for j, r in enumerate(reps):
            if abs(l - r) <= 1e-12 * abs(r):
                src.append(j), conj.append(False)
                break
            if abs(l - np.conj(r)) <= 1e-12 * abs(r):
                src.append(j), conj.append(True)
                break
        else:
            reps.append(l), src.append(len(reps) - 1), conj.append(False)
    return reps, src, conj


def kernel_values(D, tau: float, x, variant: str = "full", k_star: Optional[float] = None,
                  profile: CutoffProfile = DEFAULT_PROFILE, d: int = 1,
                  tol: float = QUAD_TOL):
    """Vectorised kernel evaluation at radii (or complex points, d=1) ``x``.

    Returns ``(values, achieved)`` with ``values.shape == x.shape + (N, N)``.
    """
    if not tau > 0:
        raise ValidationError(f"tau must be positive, got {tau}")
    if variant not in VARIANTS:
        raise ValidationError(f"variant must be one of {VARIANTS}")
    if (variant != "full") != (k_star is not None):
        raise ValidationError("k_star is required exactly when variant is low/high")
    if k_star is not None and not k_star > 0:
        raise ValidationError("k_star must be positive")
    D = np.atleast_2d(np.asarray(D, dtype=float))
    nu_star_of(D)
    x = np.asarray(x)
    if np.iscomplexobj(x) and d != 1:
        raise ValidationError("complex arguments are supported for d=1 only")
    r = x.ravel()
    if d > 1:
        r = np.abs(r)

    lam, V = np.linalg.eig(D)
    if np.linalg.cond(V) > 1e8:
        raise ValidationError("diffusion matrix is not diagonalisable to working precision")
    # for real x the integral at conj(lam) is the conjugate of the one at lam
    reps, src, conj = _conjugate_classes(lam) if not np.iscomplexobj(x) else (
        list(lam), list(range(lam.size)), [False] * lam.size)
    # the split loses relative accuracy once the high part is exponentially small
    split = variant == "full" or min(l.real for l in reps) * k_star ** 2 * tau <= 1.0
    if d == 2 and variant != "low" and split:
        part, achieved = _planar_scalar(reps, tau, r, variant, k_star, profile, tol)
    else:
        part, achieved = _quad_scalar(reps, tau, r, d, variant, k_star, profile, tol)
    scal = np.stack([np.conj(part[:, j]) if c else part[:, j] for j, c in zip(src, conj)], axis=1)
    Vinv = np.linalg.inv(V)
    vals = np.einsum("ij,pj,jk->pik", V, scal, Vinv)
    if not np.iscomplexobj(x):
        vals = vals.real
    return vals.reshape(x.shape + D.shape), achieved


def eval_kernel(D, tau: float, x, variant: str = "full", k_star: Optional[float] = None,
                profile: CutoffProfile = DEFAULT_PROFILE) -> KernelSample:
    """Evaluate one kernel value; ``x`` may be a scalar, a complex number or a d-vector."""
    x_arr = np.atleast_1d(np.asarray(x))
    d = x_arr.size
    if d == 1:
        point = x_arr[0]
    else:
        if np.iscomplexobj(x_arr):
            raise ValidationError("complex arguments are supported for d=1 only")
        point = float(np.linalg.norm(x_arr))
    vals, achieved = kernel_values(D, tau, np.array([point]), variant, k_star, profile, d=d)
    return KernelSample(tau, x, vals[0], variant, k_star, achieved)


def heat_kernel_exact(nu: float, tau: float, x, d: int = 1):
    """Closed-form mass-one Gaussian kernel for scalar diffusion ``nu``."""
    x = np.asarray(x, dtype=float)
    return (4 * math.pi * nu * tau) ** (-d / 2) * np.exp(-x * x / (4 * nu * tau))


# ---------------------------------------------------------------------------
# envelope verification


def envelope(variant: str, d: int, p: float, tau, x, nu_star: float, d_star: float,
             k_star: Optional[float] = None, im_z=0.0):
    """Claimed kernel envelope with unit constant; returns (value, regime)."""
    tau = np.asarray(tau, dtype=float)
    x = np.abs(np.asarray(x))
    if variant == "full":
        env = (nu_star * tau) ** (-d / 2) * (1 + x ** 2 / (d_star * tau)) ** (-p / 2)
        return env, "all"
    if variant == "low":
        a = k_star ** -2 + nu_star * tau
        b = k_star ** -2 + d_star * tau
        env = a ** (-d / 2) * np.exp(2 * k_star * np.abs(im_z)) * (1 + x ** 2 / b) ** (-p / 2)
        return env, "all"
    base = (nu_star * tau) ** (-d / 2) * (1 + x ** 2 / (d_star * tau)) ** (-p / 2)
    decay = np.exp(-nu_star * k_star ** 2 * tau / 2)
    if nu_star * float(np.max(tau)) > k_star ** -2:
        return decay * base, "exponential"
    extra = k_star ** d * (1 + k_star ** 2 * x ** 2) ** (-p / 2)
    return decay * (base + extra), "short-time"


@dataclass
class EnvelopeRow:
    variant: str
    d: int
    p: float
    tau: float
    x_norm: float
    k_star: Optional[float]
    ratio: float
    regime: str


@dataclass
class EnvelopeReport:
    variant: str
    d: int
    p: float
    max_ratio: float
    location: tuple
    regime: str
    rows: list = field(default_factory=list)
    rejected: list = field(default_factory=list)


def verify_envelope(D, d: int, variant: str, p: float,
                    grid: Iterable[tuple], profile: CutoffProfile = DEFAULT_PROFILE,
                    keep_rows: bool = True) -> EnvelopeReport:
    """Ratio of the kernel norm to its claimed envelope over a grid.

    ``grid`` holds ``(tau, x, k_star)`` triples (``k_star`` ignored for the
    full kernel).  The maximum ratio is the empirical envelope constant.
    """
    if p < 0:
        raise ValidationError("p must be non-negative")
    pts = list(grid)
    if not pts:
        raise ValidationError("envelope grid is empty")
    D = np.atleast_2d(np.asarray(D, dtype=float))
    nu, ds = nu_star_of(D), d_star_of(D)

    groups: dict = {}
    for tau, x, ks in pts:
        key = (float(tau), None if variant == "full" else float(ks))
        groups.setdefault(key, []).append(float(np.linalg.norm(np.atleast_1d(x))))

    report = EnvelopeReport(variant, d, p, -math.inf, (), "")
    for (tau, ks), xs in sorted(groups.items(), key=lambda kv: (kv[0][0], kv[0][1] or 0)):
        xs = np.array(xs)
        vals, _ = kernel_values(D, tau, xs, variant, ks, profile, d=d)
        norms = np.linalg.norm(vals, ord=2, axis=(-2, -1))
        env, regime = envelope(variant, d, p, tau, xs, nu, ds, ks)
        env = np.broadcast_to(env, xs.shape)
        for xv, nv, ev in zip(xs, norms, env):
            if not ev > 0 or not np.isfinite(ev):
                report.rejected.append(((tau, xv, ks), "envelope is zero or not finite"))
                continue
            ratio = float(nv / ev)
            if keep_rows:
                report.rows.append(EnvelopeRow(variant, d, p, tau, float(xv), ks, ratio, regime))
            if ratio > report.max_ratio:
                report.max_ratio = ratio
                report.location = (tau, float(xv), ks)
                report.regime = regime
    return report


def envelope_grid(D, n_tau: int, n_x: int, k_stars: Sequence[Optional[float]] = (None,),
                  tau_range=(1e-3, 10.0), x_max: Optional[float] = None, x_min: float = 1e-4):
    """(tau, |x|, k*) grid: log-spaced tau, and for each (tau, k*) the union of
    a log-spaced |x| grid with a linear grid in units of the kernel width.

    The linear part resolves the oscillating tails of the cut-off kernels.
    """
    D = np.atleast_2d(np.asarray(D, dtype=float))
    ds = d_star_of(D)
    if x_max is None:
        x_max = 20.0 * math.sqrt(ds)
    taus = np.geomspace(tau_range[0], tau_range[1], n_tau)
    base = np.concatenate([[0.0], np.geomspace(x_min, x_max, n_x)])
    grid = []
    for k in k_stars:
        for t in taus:
            width = math.sqrt(ds * t + (0.0 if k is None else k ** -2))
            lin = width * np.linspace(0.0, 40.0, 6 * n_x + 1)
            xs = np.unique(np.concatenate([base, lin[lin <= x_max]]))
            grid.extend((t, x, k) for x in xs)
    return grid


def envelope_stability(D, d: int, variant: str, p: float, n_tau: int = 12, n_x: int = 24,
                       k_stars: Sequence[float] = (1.0, 2.0, 4.0, 8.0),
                       profile: CutoffProfile = DEFAULT_PROFILE):
    """Max envelope ratio on a base grid and on the 2x refined grid."""
    D = np.atleast_2d(np.asarray(D, dtype=float))
    ks = (None,) if variant == "full" else tuple(k_stars)
    coarse = verify_envelope(D, d, variant, p, envelope_grid(D, n_tau, n_x, ks),
                             profile, keep_rows=False)
    fine = verify_envelope(D, d, variant, p, envelope_grid(D, 2 * n_tau, 2 * n_x, ks),
                           profile, keep_rows=False)
    change = abs(fine.max_ratio - coarse.max_ratio) / coarse.max_ratio
    return coarse, fine, change


def high_pass_decay(D, d: int, p: float, k_star: float, n_x: int = 64,
                    profile: CutoffProfile = DEFAULT_PROFILE):
    """Max high-pass ratio against the long-time envelope form at
    ``nu* tau = 4/k*^2`` and at ``nu* tau = 1/(4 k*^2)``."""
    D = np.atleast_2d(np.asarray(D, dtype=float))
    nu, ds = nu_star_of(D), d_star_of(D)
    out = []
    for s in (4.0, 0.25):
        tau = s / (nu * k_star ** 2)
        xs = np.concatenate([[0.0], np.geomspace(1e-3, 20.0, n_x) * math.sqrt(ds * tau)])
        vals, _ = kernel_values(D, tau, xs, "high", k_star, profile, d=d)
        norms = np.linalg.norm(vals, ord=2, axis=(-2, -1))
        env = (np.exp(-nu * k_star ** 2 * tau / 2) * (nu * tau) ** (-d / 2)
               * (1 + xs ** 2 / (ds * tau)) ** (-p / 2))
        out.append(float(np.max(norms / env)))
    return out[0], out[1]


def bernstein_check(D, tau: float, k_star: float, z, profile: CutoffProfile = DEFAULT_PROFILE,
                    safety: float = 1.05, n_real: int = 401):
    """Check |G_<(z)| <= (real-axis max) exp(2 k* |Im z|) * safety on complex ``z``.

    Returns ``(ok, worst_ratio)`` where ratio 1 corresponds to the bound.
    """
    z = np.asarray(z, dtype=complex)
    span = 20.0 / k_star + 10 * math.sqrt(d_star_of(np.atleast_2d(D)) * tau)
    xr = np.linspace(-span, span, n_real)
    real_vals, _ = kernel_values(D, tau, xr, "low", k_star, profile, d=1)
    real_max = float(np.max(np.linalg.norm(real_vals, ord=2, axis=(-2, -1))))
    cvals, _ = kernel_values(D, tau, z, "low", k_star, profile, d=1)
    cnorm = np.linalg.norm(cvals, ord=2, axis=(-2, -1))
    bound = real_max * np.exp(2 * k_star * np.abs(z.imag)) * safety
    worst = float(np.max(cnorm / bound))
    return worst <= 1.0, worst

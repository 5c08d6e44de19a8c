"""Correlation sums, K2 entropy per unit volume and finite covering counts.

Pair counting uses the run-length method: for each time lag the window
distances along one diagonal of the recurrence matrix are scanned once,
and every maximal run of close pairs of length r contributes r - n + 1
matching n-windows.  Counts are integers, so any partition of the
diagonals into worker blocks reduces to identical totals.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field as dc_field
from typing import Dict, List, Optional, Sequence, Tuple

import os

import numba
import numpy as np

from .model import ValidationError
from .pde import Field, lattice_indices

log = logging.getLogger(__name__)

# Prefer OpenMP: probing an old TBB build only produces a warning.
if "NUMBA_THREADING_LAYER" not in os.environ:
    numba.config.THREADING_LAYER_PRIORITY = ["omp", "tbb", "workqueue"]

EXACT_LIMIT = 24
PLATEAU_TOL = 0.10
PLATEAU_MIN = 3


# --------------------------------------------------------------------------- records

@dataclass
class TrajectoryRecord:
    """Snapshots at uniform cadence ``tau``; ``data`` has shape (T, N, P).

    ``positions`` holds the P sample positions shared by every snapshot.
    ``window`` is the half-width L over which distances are taken.
    """

    data: np.ndarray
    positions: np.ndarray
    tau: float
    delta: float
    window: float
    dimension: int = 1
    metadata: Dict[str, object] = dc_field(default_factory=dict)

    def __post_init__(self):
        d = np.asarray(self.data, dtype=float)
        if d.ndim == 1:
            d = d[:, None, None]
        if d.ndim != 3:
            raise ValidationError("record data must have shape (T, N, P)")
        if d.shape[0] < 2:
            raise ValidationError("a trajectory record needs at least 2 snapshots")
        if not self.tau > 0:
            raise ValidationError("tau must be positive")
        self.data = d
        self.positions = np.asarray(self.positions, dtype=float).reshape(-1)
        if self.positions.size != d.shape[2]:
            raise ValidationError("positions do not match the data width")

    @property
    def length(self) -> int:
        return self.data.shape[0]

    def coordinates(self, norm: str = "grid", delta: Optional[float] = None) -> np.ndarray:
        """(T, K) matrix of the coordinates entering the chosen sup-norm."""
        x = self.positions
        inside = np.abs(x) <= self.window * (1 + 1e-12) + 1e-15
        if norm == "grid":
            sel = inside
        elif norm == "lattice":
            step = self.delta if delta is None else delta
            q = x / step
            sel = inside & (np.abs(q - np.round(q)) < 1e-9)
            need = 2 * int(math.floor(self.window / step + 1e-12)) + 1
            if sel.sum() != need:
                raise ValidationError(
                    f"lattice spacing {step:.6g} is not resolved by the stored positions")
        else:
            raise ValidationError("norm must be 'grid' or 'lattice'")
        return np.ascontiguousarray(self.data[:, :, sel].reshape(self.length, -1))

    @classmethod
    def from_fields(cls, fields: Sequence[Field], window: float, delta: float,
                    metadata: Optional[dict] = None) -> "TrajectoryRecord":
        """Keep grid values with periodic |x| <= window around x = 0."""
        f0 = fields[0]
        L, G = f0.domain_length, f0.grid_points
        x = f0.x
        xc = (x + L / 2) % L - L / 2
        keep = np.nonzero(np.abs(xc) <= window * (1 + 1e-12))[0]
        order = keep[np.argsort(xc[keep])]
        lattice_indices(G, L, delta, window)  # validates alignment
        times = np.array([f.time for f in fields])
        dts = np.diff(times)
        if dts.size and np.ptp(dts) > 1e-9 * max(1.0, abs(dts[0])):
            raise ValidationError("snapshots are not at a uniform cadence")
        data = np.stack([f.components[:, order] for f in fields])
        meta = {"t_start": float(times[0])}
        meta.update(metadata or {})
        return cls(data, xc[order], float(dts[0]) if dts.size else 1.0, delta, window, 1, meta)

    @classmethod
    def from_series(cls, series: np.ndarray, tau: float = 1.0,
                    metadata: Optional[dict] = None) -> "TrajectoryRecord":
        """Scalar time series: one component at a single point, L = 0, d = 0."""
        s = np.asarray(series, dtype=float)
        return cls(s[:, None, None], np.zeros(1), tau, 1.0, 0.0, 0, dict(metadata or {}))


@dataclass
class CorrelationTable:
    epsilons: np.ndarray
    n_values: np.ndarray
    pair_counts: np.ndarray          # (E, n) including self pairs
    n_effective: np.ndarray          # (n,)
    length: int
    tau: float
    window: float
    dimension: int
    delta: float
    norm: str = "grid"

    @property
    def self_pairs(self) -> np.ndarray:
        return self.n_effective

    @property
    def C(self) -> np.ndarray:
        return self.pair_counts / self.n_effective[None, :].astype(float) ** 2

    @property
    def C_without_self(self) -> np.ndarray:
        ne = self.n_effective.astype(float)
        off = self.pair_counts - self.n_effective[None, :]
        return off / np.maximum(ne * (ne - 1), 1.0)[None, :]

    def rows(self):
        C = self.C
        for e, eps in enumerate(self.epsilons):
            for j, n in enumerate(self.n_values):
                c = C[e, j]
                yield (float(eps), int(n), int(self.pair_counts[e, j]), int(self.n_effective[j]),
                       float(c), float(math.log(c)) if c > 0 else float("-inf"))

    def check_invariants(self) -> List[str]:
        C = self.C
        bad = []
        if np.any(C < 0) or np.any(C > 1):
            bad.append("C outside [0, 1]")
        if np.any(np.diff(self.pair_counts, axis=0) < 0):
            bad.append("counts decrease with epsilon")
        if np.any(np.diff(self.pair_counts, axis=1) > 0):
            bad.append("counts increase with n")
        return bad


# --------------------------------------------------------------------------- pair counting

@numba.njit(cache=True, nogil=True)
def _run_histogram(X, eps, d_lo, d_hi, hist):
    """Accumulate run-length histograms for lags d in [d_lo, d_hi)."""
    T, K = X.shape
    E = eps.size
    cur = np.zeros(E, dtype=np.int64)
    for d in range(max(d_lo, 1), d_hi):
        cur[:] = 0
        for i in range(T - d):
            dist = 0.0
            for p in range(K):
                a = abs(X[i, p] - X[i + d, p])
                if a > dist:
                    dist = a
            for e in range(E):
                if dist < eps[e]:
                    cur[e] += 1
                elif cur[e] > 0:
                    hist[e, cur[e]] += 1
                    cur[e] = 0
        for e in range(E):
            if cur[e] > 0:
                hist[e, cur[e]] += 1


@numba.njit(cache=True, parallel=True)
def _blocked_histogram(X, eps, bounds):
    nb = bounds.size - 1
    T = X.shape[0]
    out = np.zeros((nb, eps.size, T + 1), dtype=np.int64)
    for b in numba.prange(nb):
        _run_histogram(X, eps, bounds[b], bounds[b + 1], out[b])
    return out


def _block_bounds(T: int, blocks: int) -> np.ndarray:
    # equal-work split of lags 1..T-1 (work on lag d is T - d)
    blocks = max(1, min(blocks, T - 1))
    total = (T - 1) * T / 2
    cuts = [1]
    acc = 0.0
    for d in range(1, T):
        acc += T - d
        if acc >= total * len(cuts) / blocks and len(cuts) < blocks:
            cuts.append(d + 1)
    cuts.append(T)
    return np.unique(np.array(cuts, dtype=np.int64))


def _counts_from_hist(hist: np.ndarray, n_values: np.ndarray, T: int) -> np.ndarray:
    """Windows of length n inside runs: sum_r h[r] * max(0, r - n + 1), doubled, plus self pairs."""
    r = np.arange(hist.shape[1])
    out = np.empty((hist.shape[0], n_values.size), dtype=np.int64)
    for j, n in enumerate(n_values):
        w = np.maximum(r - n + 1, 0)
        out[:, j] = 2 * (hist @ w) + (T - n + 1)
    return out


def pair_counts(X: np.ndarray, epsilons: Sequence[float], n_values: Sequence[int],
                blocks: int = 8, bounds: Optional[np.ndarray] = None) -> np.ndarray:
    """Integer counts of (j, k) with all n window distances < eps (self pairs included)."""
    X = np.ascontiguousarray(np.asarray(X, dtype=float).reshape(len(X), -1))
    eps = np.asarray(epsilons, dtype=float)
    n_values = np.asarray(n_values, dtype=np.int64)
    T = X.shape[0]
    if bounds is None:
        bounds = _block_bounds(T, blocks)
    hist = _blocked_histogram(X, eps, np.asarray(bounds, dtype=np.int64)).sum(axis=0)
    return _counts_from_hist(hist, n_values, T)


def correlation_sum(record: TrajectoryRecord, epsilons: Sequence[float], n_max: int,
                    norm: str = "grid", delta: Optional[float] = None,
                    blocks: int = 8) -> CorrelationTable:
    """Correlation sums C(eps, n) for n = 1..n_max with N_eff(n) = T - n + 1."""
    eps = np.asarray(epsilons, dtype=float)
    if eps.size == 0:
        raise ValidationError("epsilons must be non-empty")
    if np.any(np.diff(eps) <= 0):
        raise ValidationError("epsilons must be strictly ascending")
    if np.any(eps <= 0):
        raise ValidationError("epsilons must be positive")
    T = record.length
    if n_max < 1 or n_max >= T - 1:
        raise ValidationError(f"n_max={n_max} must satisfy 1 <= n_max <= T - 2 = {T - 2}")
    X = record.coordinates(norm, delta)
    n_values = np.arange(1, n_max + 1)
    counts = pair_counts(X, eps, n_values, blocks)
    return CorrelationTable(eps, n_values, counts, T - n_values + 1, T, record.tau,
                            record.window, record.dimension,
                            record.delta if delta is None else delta, norm)


def brute_force_counts(X: np.ndarray, epsilons: Sequence[float], n_values: Sequence[int]) -> np.ndarray:
    """Direct enumeration over (j, k, i) used as an oracle for the fast path."""
    X = np.asarray(X, dtype=float).reshape(len(X), -1)
    T = X.shape[0]
    dist = np.max(np.abs(X[:, None, :] - X[None, :, :]), axis=2)
    out = np.zeros((len(epsilons), len(n_values)), dtype=np.int64)
    for e, eps in enumerate(epsilons):
        close = dist < eps
        for j_, n in enumerate(n_values):
            m = T - n + 1
            ok = np.ones((m, m), dtype=bool)
            for i in range(n):
                ok &= close[i:i + m, i:i + m]
            out[e, j_] = int(ok.sum())
    return out


def epsilon_grid(lo: float, hi: float, per_decade: int = 16) -> np.ndarray:
    n = int(round(math.log10(hi / lo) * per_decade))
    return np.logspace(math.log10(lo), math.log10(hi), max(n, 1) + 1)


# --------------------------------------------------------------------------- K2

@dataclass
class EntropyReport:
    epsilons: np.ndarray
    slopes: np.ndarray           # per epsilon, -d log C / dn
    k2: np.ndarray               # slopes / (tau L^d)
    residuals: np.ndarray
    fit_ranges: List[Tuple[int, int]]
    plateau: Optional[Tuple[int, int]]
    plateau_value: Optional[float]
    warnings: List[str]

    @property
    def has_plateau(self) -> bool:
        return self.plateau is not None

    def as_dict(self) -> dict:
        return {
            "epsilons": self.epsilons.tolist(), "slopes": self.slopes.tolist(),
            "k2": self.k2.tolist(), "residuals": self.residuals.tolist(),
            "fit_ranges": [list(r) for r in self.fit_ranges],
            "plateau": None if self.plateau is None else list(self.plateau),
            "plateau_value": self.plateau_value,
            "plateau_status": "ok" if self.plateau is not None else "no plateau",
            "warnings": self.warnings,
        }


def find_plateau(values: np.ndarray, tol: float = PLATEAU_TOL,
                 min_len: int = PLATEAU_MIN) -> Optional[Tuple[int, int]]:
    """Longest run of consecutive finite values whose spread stays below ``tol`` relative.

    Ties go to the run at smaller indices; returns (start, stop) half-open.
    """
    best = None
    v = np.asarray(values, dtype=float)
    n = v.size
    for a in range(n):
        if not np.isfinite(v[a]) or v[a] <= 0:
            continue
        lo = hi = v[a]
        b = a
        while b + 1 < n and np.isfinite(v[b + 1]) and v[b + 1] > 0:
            lo2, hi2 = min(lo, v[b + 1]), max(hi, v[b + 1])
            if (hi2 - lo2) > tol * lo2:
                break
            lo, hi, b = lo2, hi2, b + 1
        if b - a + 1 >= min_len and (best is None or b - a + 1 > best[1] - best[0]):
            best = (a, b + 1)
    return best


def k2_estimate(table: CorrelationTable, fit_range: Tuple[int, int],
                epsilon_selection: Optional[Sequence[int]] = None,
                use_self_pairs: bool = True) -> EntropyReport:
    """Least-squares slopes of -log C against n, per unit time and volume."""
    n_lo, n_hi = fit_range
    if n_lo < 1 or n_hi <= n_lo:
        raise ValidationError("fit range must satisfy 1 <= n_lo < n_hi")
    C = table.C if use_self_pairs else table.C_without_self
    sel = np.arange(table.epsilons.size) if epsilon_selection is None else np.asarray(epsilon_selection)
    volume = table.window ** table.dimension
    scale = table.tau * volume
    if not scale > 0:
        raise ValidationError("tau * L^d must be positive")
    slopes, res, ranges, warns = [], [], [], []
    for e in sel:
        nmask = (table.n_values >= n_lo) & (table.n_values <= n_hi)
        cvals = C[e, nmask]
        nv = table.n_values[nmask]
        good = cvals > 0
        if not np.all(good):
            # shrink to the leading stretch of positive values
            stop = int(np.argmin(good))
            nv, cvals = nv[:stop], cvals[:stop]
            warns.append(f"eps={table.epsilons[e]:.6g}: fit range shrunk to n<={nv[-1] if nv.size else n_lo - 1}")
        if nv.size < 3:
            raise ValidationError(
                f"eps={table.epsilons[e]:.6g}: fewer than 3 usable n values in the fit range")
        A = np.vstack([nv, np.ones(nv.size)]).T
        y = -np.log(cvals)
        coef, r, *_ = np.linalg.lstsq(A, y, rcond=None)
        slopes.append(coef[0])
        res.append(float(np.sqrt(r[0] / nv.size)) if r.size else 0.0)
        ranges.append((int(nv[0]), int(nv[-1])))
    slopes = np.array(slopes)
    k2 = slopes / scale
    plateau = find_plateau(k2)
    value = None
    if plateau is not None:
        value = float(np.mean(k2[plateau[0]:plateau[1]]))
    return EntropyReport(table.epsilons[sel], slopes, k2, np.array(res), ranges, plateau, value, warns)


# --------------------------------------------------------------------------- surrogate data

def tent_map_series(length: int, seed: int = 0, slope: int = 2, discard: int = 64) -> np.ndarray:
    """Orbit of the slope-2 tent map computed exactly on a random dyadic start.

    A float orbit collapses to 0 after ~53 steps because each step shifts
    out one mantissa bit; an integer numerator with enough random bits keeps
    every visited value exact until it is rounded for output.
    """
    if slope != 2:
        raise ValidationError("only the slope-2 tent map has an exact dyadic orbit")
    bits = length + discard + 64
    rng = np.random.default_rng(seed)
    words = rng.integers(0, 1 << 62, size=bits // 62 + 1, dtype=np.int64)
    num = 0
    for w in words:
        num = (num << 62) | int(w)
    num &= (1 << bits) - 1
    one = 1 << bits
    out = np.empty(length)
    shift = bits - 53
    for i in range(length + discard):
        num = 2 * num if 2 * num < one else 2 * (one - num)
        if i >= discard:
            out[i - discard] = (num >> shift) / float(1 << 53)
    return out


# --------------------------------------------------------------------------- covering / separation

def distance_matrix(points) -> np.ndarray:
    """Sup-norm distances between flattened points (snapshots or segments)."""
    P = np.asarray(points, dtype=float)
    if P.size == 0:
        return np.zeros((0, 0))
    P = P.reshape(P.shape[0], -1)
    return np.max(np.abs(P[:, None, :] - P[None, :, :]), axis=2)


def _masks(adj: np.ndarray) -> List[int]:
    return [sum(1 << int(j) for j in np.nonzero(row)[0]) for row in adj]


def _max_independent(conflict: List[int], n: int) -> int:
    best = 0

    def rec(cand: int, size: int):
        nonlocal best
        if cand == 0:
            best = max(best, size)
            return
        if size + bin(cand).count("1") <= best:
            return
        v = (cand & -cand).bit_length() - 1
        rec(cand & ~conflict[v] & ~(1 << v), size + 1)
        if cand & conflict[v] & ~(1 << v):
            rec(cand & ~(1 << v), size)

    rec((1 << n) - 1, 0)
    return best


def _min_clique_cover(close: List[int], n: int, order: List[int]) -> int:
    best = n
    groups: List[int] = []

    def rec(i: int):
        nonlocal best
        if len(groups) >= best:
            return
        if i == n:
            best = len(groups)
            return
        v = order[i]
        bit = 1 << v
        for g in range(len(groups)):
            if groups[g] & ~close[v] == 0:
                groups[g] |= bit
                rec(i + 1)
                groups[g] &= ~bit
        groups.append(bit)
        rec(i + 1)
        groups.pop()

    rec(0)
    return best


def _check_mode(mode: str, n: int):
    if mode not in ("exact", "greedy"):
        raise ValidationError("mode must be 'exact' or 'greedy'")
    if mode == "exact" and n > EXACT_LIMIT:
        raise ValidationError(
            f"exact mode handles at most {EXACT_LIMIT} points (got {n}); use mode='greedy'")


def separated_count(points, zeta: float, mode: str = "exact",
                    dist: Optional[np.ndarray] = None) -> int:
    """Largest subset whose pairwise distances are all >= zeta."""
    D = distance_matrix(points) if dist is None else dist
    n = D.shape[0]
    _check_mode(mode, n)
    if n == 0:
        return 0
    conflict = D < zeta
    if mode == "greedy":
        chosen: List[int] = []
        for i in range(n):
            if all(not conflict[i, j] for j in chosen):
                chosen.append(i)
        return len(chosen)
    np.fill_diagonal(conflict, False)
    return _max_independent(_masks(conflict), n)


def covering_count(points, epsilon: float, mode: str = "exact",
                   dist: Optional[np.ndarray] = None) -> int:
    """Fewest groups of diameter <= epsilon that together contain every point."""
    D = distance_matrix(points) if dist is None else dist
    n = D.shape[0]
    _check_mode(mode, n)
    if n == 0:
        return 0
    close = D <= epsilon
    if mode == "greedy":
        groups: List[List[int]] = []
        for i in range(n):
            for g in groups:
                if all(close[i, j] for j in g):
                    g.append(i)
                    break
            else:
                groups.append([i])
        return len(groups)
    order = list(np.argsort(close.sum(axis=1), kind="stable"))
    return _min_clique_cover(_masks(close), n, [int(v) for v in order])


@dataclass
class CountTable:
    """Counts keyed by (kind, epsilon, time label) for one family of segments."""

    mode: str
    epsilons: List[float]
    splits: List[Tuple[int, int]]
    counts: Dict[Tuple[str, float, str], int] = dc_field(default_factory=dict)
    size: int = 0
    length: int = 0


def count_family(segments, epsilons: Sequence[float], splits: Sequence[Tuple[int, int]] = (),
                 mode: str = "exact") -> CountTable:
    """Covering and separated counts on full segments and on time sub-windows.

    ``segments`` has shape (M, T, ...); each split (a, b) restricts every
    segment to snapshots a..b-1.
    """
    S = np.asarray(segments, dtype=float)
    M = 0 if S.size == 0 else S.shape[0]
    table = CountTable(mode, [float(e) for e in epsilons], [tuple(s) for s in splits], size=M)
    T = S.shape[1] if M else 0
    table.length = T
    windows = {"full": (0, T)}
    for a, b in table.splits:
        windows[f"{a}:{b}"] = (a, b)
    for label, (a, b) in windows.items():
        D = distance_matrix(S[:, a:b]) if M else np.zeros((0, 0))
        for e in table.epsilons:
            for kind, fn in (("cover", covering_count), ("separated", separated_count)):
                for arg, key in ((e, e), (e / 2, e / 2), (2 * e, 2 * e)):
                    k = (kind, key, label)
                    if k not in table.counts:
                        table.counts[k] = fn(None, arg, mode, dist=D) if M else 0
    return table


@dataclass
class AuditReport:
    passed: bool
    checks: int
    violations: List[dict]


def entropy_monotonicity_audit(table: CountTable) -> AuditReport:
    """Check epsilon-monotonicity, time submultiplicativity and the sandwich."""
    if table.mode != "exact":
        raise ValidationError("the audit needs exact counts; greedy counts carry no guarantees")
    viol: List[dict] = []
    checks = 0
    c = table.counts
    labels = sorted({k[2] for k in c})
    for kind in ("cover", "separated"):
        for label in labels:
            eps = sorted(k[1] for k in c if k[0] == kind and k[2] == label)
            for a, b in zip(eps, eps[1:]):
                checks += 1
                if c[(kind, b, label)] > c[(kind, a, label)]:
                    viol.append({"check": "epsilon-monotone", "kind": kind, "window": label,
                                 "eps": (a, b), "counts": (c[(kind, a, label)], c[(kind, b, label)])})
    # submultiplicativity for consecutive split pairs covering the full window
    for (a1, b1), (a2, b2) in zip(table.splits, table.splits[1:]):
        if b1 != a2:
            continue
        for e in table.epsilons:
            whole = c.get(("cover", e, "full")) if (a1 == 0 and b2 == table.length) else None
            if whole is None:
                continue
            checks += 1
            prod = c[("cover", e, f"{a1}:{b1}")] * c[("cover", e, f"{a2}:{b2}")]
            if whole > prod:
                viol.append({"check": "submultiplicative", "eps": e, "whole": whole, "product": prod})
    for label in labels:
        for z in table.epsilons:
            n2 = c.get(("cover", 2 * z, label))
            r = c.get(("separated", z, label))
            nh = c.get(("cover", z / 2, label))
            if None in (n2, r, nh):
                continue
            checks += 1
            if not (n2 <= r <= nh):
                viol.append({"check": "sandwich", "zeta": z, "window": label,
                             "N(2z)": n2, "R(z)": r, "N(z/2)": nh})
    return AuditReport(not viol, checks, viol)


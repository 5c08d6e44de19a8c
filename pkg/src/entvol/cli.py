"""Command-line driver for the staged experiment pipeline.

Every command works inside an output directory guarded by a lock file.
Stage outputs live in ``<out>/<stage>/`` next to a ``stage.json`` stamp
holding the config hash and file checksums; ``pipeline`` skips stages
whose stamp still matches.  Exit codes: 0 success, 2 validation error,
3 numerical failure, 4 inconclusive experiment.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from . import __version__
from .config import RunConfig
from .entropy import (TrajectoryRecord, correlation_sum, epsilon_grid, k2_estimate)
from .kernels import VARIANTS, QuadratureError, envelope_grid, verify_envelope
from .model import ValidationError, derive_scales
from .pde import (CGLSolver, DivergenceError, Field, TwinPair, fit_growth_rate,
                  lattice_indices, load_snapshots, make_twin, random_initial_field,
                  save_snapshots)
from .sampling import (fit_forward, forward_step, run_dissipative_experiment,
                       run_sampling_experiment, sampling_window_steps)

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_NUMERICAL = 3
EXIT_INCONCLUSIVE = 4

STAGES = ("simulate", "twin", "verify-kernels", "verify-sampling", "entropy")
DEPENDS = {"twin": ("simulate",), "verify-sampling": ("twin",), "entropy": ("simulate",)}
LOCK_NAME = ".entvol.lock"


@dataclass
class StageResult:
    files: List[Path]
    summary: Dict[str, object] = field(default_factory=dict)
    inconclusive: bool = False


@dataclass
class Context:
    cfg: RunConfig
    out: Path
    threads: int

    @property
    def res(self):
        return self.cfg.resolved()

    def stage_dir(self, stage: str) -> Path:
        d = self.out / stage
        d.mkdir(parents=True, exist_ok=True)
        return d


# --------------------------------------------------------------------------- helpers

def sha256_of(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _fmt(x) -> str:
    if isinstance(x, (float, np.floating)):
        return format(float(x), ".17g")
    return str(x)


def write_csv(path: Path, header: Sequence[str], rows) -> Path:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])
    return path


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else str(v)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    return obj


def write_json(path: Path, data) -> Path:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(_jsonable(data), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


class OutputLock:
    """Exclusive lock file so that one process owns an output directory."""

    def __init__(self, out: Path):
        self.path = out / LOCK_NAME

    def __enter__(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        if not os.access(self.path.parent, os.W_OK):
            raise ValidationError(f"output directory {self.path.parent} is not writable")
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise ValidationError(
                f"output directory is locked by another run ({self.path}); "
                f"remove the lock file if no run is active") from None
        with os.fdopen(fd, "w") as fh:
            fh.write(str(os.getpid()))
        return self

    def __exit__(self, *exc):
        try:
            self.path.unlink()
        except FileNotFoundError:
            pass
        return False


def set_threads(n: int) -> int:
    import numba
    n = max(1, min(int(n), numba.config.NUMBA_NUM_THREADS))
    numba.set_num_threads(n)
    return n


def _snapshot_path(ctx: Context) -> Path:
    return ctx.out / "simulate" / "snapshots.entv"


def _pair_path(ctx: Context) -> Path:
    return ctx.out / "twin" / "pair.entv"


def load_pair(path: Path, ctx: Context) -> TwinPair:
    if not path.exists():
        raise ValidationError(f"twin pair {path} not found; run the twin stage first")
    u, v, gap = load_snapshots(path)
    res = ctx.res
    meta = json.loads((path.parent / "twin.json").read_text())
    return TwinPair(u, v, res.spec, res.scales.delta_star, res.lam,
                    eps0=meta["eps0"], support=meta["support"], gap=np.array(gap.components))


# --------------------------------------------------------------------------- stages

def stage_simulate(ctx: Context) -> StageResult:
    res = ctx.res
    spec, sc = res.spec, res.scales
    L, G = res.domain_length, res.grid_points
    solver = CGLSolver(spec, G, L, res.dt, workers=ctx.threads)
    f = random_initial_field(spec, G, L, res.seed, sc.tau_star)
    if res.transient > 0:
        f = solver.evolve(f, res.transient, None)[-1]
    f = Field(f.components, L, 0.0)
    fields = solver.evolve(f, res.t_final, res.snapshot_every)
    d = ctx.stage_dir("simulate")
    snap = d / "snapshots.entv"
    save_snapshots(snap, fields)
    sup = np.array([fl.sup_norm() for fl in fields])
    mod = np.array([fl.modulus_max() for fl in fields])
    table = write_csv(d / "sup_norm.csv", ["t", "sup_component", "sup_modulus"],
                      zip((fl.time for fl in fields), sup, mod))
    ok = bool(sup.max() <= spec.q_star)
    summary = {"snapshots": len(fields), "t_final": res.t_final, "dt": res.dt,
               "max_component": float(sup.max()), "max_modulus": float(mod.max()),
               "q_star": spec.q_star, "absorbing_bound_holds": ok,
               "resolved": res.as_dict(), "threads": ctx.threads}
    write_json(d / "simulate.json", summary)
    return StageResult([snap, table, d / "simulate.json"], summary, inconclusive=not ok)


def stage_twin(ctx: Context) -> StageResult:
    res = ctx.res
    e = ctx.cfg.experiment
    snaps = _snapshot_path(ctx)
    if not snaps.exists():
        raise ValidationError(f"{snaps} not found; run the simulate stage first")
    base = load_snapshots(snaps)[-1]
    base = Field(base.components, base.domain_length, 0.0)
    pair = make_twin(base, res.spec, e.eps0, e.support, res.seed,
                     delta=res.scales.delta_star, lam=res.lam)
    d = ctx.stage_dir("twin")
    pair_file = d / "pair.entv"
    save_snapshots(pair_file, [pair.u, pair.v, Field(pair.difference, base.domain_length, 0.0)])
    solver = CGLSolver(res.spec, res.grid_points, res.domain_length, res.dt, workers=ctx.threads)
    work = pair.copy()
    solver.evolve_twin(work, res.twin_duration, res.record_every)
    hist = work.history_array()
    hist_file = write_csv(d / "history.csv", ["t", "sup_w", "lattice_w"], hist)
    try:
        fit = fit_growth_rate(hist, floor=0.0, ceiling=1e-2)
        growth = fit.__dict__
    except ValidationError as exc:
        growth = {"error": str(exc)}
    summary = {"eps0": e.eps0, "support": e.support, "seed": res.seed,
               "duration": res.twin_duration, "growth_fit": growth,
               "final_sup": float(hist[-1, 1]), "final_lattice": float(hist[-1, 2])}
    write_json(d / "twin.json", summary)
    return StageResult([pair_file, hist_file, d / "twin.json"], summary)


def stage_verify_kernels(ctx: Context) -> StageResult:
    res = ctx.res
    e = ctx.cfg.experiment
    D = res.spec.diffusion
    d = ctx.stage_dir("verify-kernels")
    rows, summary = [], []
    for dim in ctx.cfg.dimensions():
        for p in ctx.cfg.powers():
            for variant in VARIANTS:
                ks = (None,) if variant == "full" else ctx.cfg.kernel_k_stars()
                grid = envelope_grid(D, e.kernel_n_tau, e.kernel_n_x, ks)
                rep = verify_envelope(D, dim, variant, p, grid)
                rows.extend((r.variant, r.d, r.p, r.tau, r.x_norm,
                             "" if r.k_star is None else r.k_star, r.ratio, r.regime)
                            for r in rep.rows)
                summary.append({"lemma": variant, "d": dim, "p": p, "max_ratio": rep.max_ratio,
                                "location": list(rep.location), "regime": rep.regime,
                                "rejected": len(rep.rejected)})
    table = write_csv(d / "kernels.csv",
                      ["lemma", "d", "p", "tau", "x_norm", "k_star", "ratio", "regime"], rows)
    write_json(d / "kernels.json", {"audits": summary})
    return StageResult([table, d / "kernels.json"], {"audits": summary})


def stage_verify_sampling(ctx: Context) -> StageResult:
    res = ctx.res
    e = ctx.cfg.experiment
    sc = res.scales
    pair = load_pair(_pair_path(ctx), ctx)
    opts = {"workers": ctx.threads}
    d = ctx.stage_dir("verify-sampling")
    inconclusive = False
    if e.mode == "dissipative":
        rep = run_dissipative_experiment(pair, sc, res.ell, res.lam, res.dt, solver_options=opts)
        report = rep.as_dict()
        steps = write_csv(d / "steps.csv", ["t", "sup_w", "lattice_w"], rep.steps)
    elif e.mode == "forward":
        m = sampling_window_steps(e.epsilon, e.f_hat)
        solver = CGLSolver(res.spec, res.grid_points, res.domain_length, res.dt, workers=ctx.threads)
        other = "lattice-only" if pair.support == "everywhere" else "everywhere"
        companion = make_twin(pair.u, res.spec, pair.eps0, other, res.seed + 1,
                              delta=sc.delta_star, lam=res.lam)
        samples = []
        for start in (pair, companion):
            work = start.copy()
            for _ in range(m):
                samples.append(forward_step(work, sc, res.lam, res.lam - res.ell, res.dt,
                                            solver_options=opts))
                solver.evolve_twin(work, work.u.time + sc.tau_star, sc.tau_star)
        rep = fit_forward(samples, sc.k_star_prefactor)
        report = rep.as_dict()
        steps = write_csv(d / "steps.csv", ["step", "K", "epsilon", "K_prime", "high_sup", "chain_bound"],
                          ((i, s.K, s.epsilon, s.K_prime, s.high_sup, s.chain_bound)
                           for i, s in enumerate(samples)))
    else:
        rep = run_sampling_experiment(pair, sc, e.epsilon, res.l_inner, res.dt, res.e_hat,
                                      e.f_hat, solver_options=opts)
        report = rep.as_dict()
        inconclusive = rep.inconclusive
        steps = write_csv(d / "steps.csv", ["step", "t", "sup_w", "lattice_w", "window"],
                          ((i, *s, w) for i, (s, w) in enumerate(zip(rep.steps, rep.windows))))
    report.update({"mode": e.mode, "k_star_prefactor": sc.k_star_prefactor,
                   "k_star": sc.k_star, "epsilon": e.epsilon, "inconclusive": inconclusive})
    write_json(d / "sampling.json", report)
    return StageResult([d / "sampling.json", steps], report, inconclusive)


def stage_entropy(ctx: Context, record: Optional[Path] = None) -> StageResult:
    res = ctx.res
    e = ctx.cfg.experiment
    path = _snapshot_path(ctx) if record is None else Path(record)
    if not path.exists():
        raise ValidationError(f"trajectory record {path} not found; run the simulate stage first")
    fields = load_snapshots(path)
    delta = res.scales.delta_star
    rec = TrajectoryRecord.from_fields(fields, res.entropy_window, delta)
    eps = epsilon_grid(e.eps_lo, e.eps_hi, e.eps_per_decade)
    table = correlation_sum(rec, eps, e.n_max, e.norm, delta)
    bad = table.check_invariants()
    if bad:
        raise FloatingPointError("correlation table invariants failed: " + "; ".join(bad))
    rep = k2_estimate(table, (e.fit_lo, e.fit_hi))
    d = ctx.stage_dir("entropy")
    out = write_csv(d / "correlation.csv", ["epsilon", "n", "pair_count", "n_effective", "C", "log_C"],
                    table.rows())
    report = rep.as_dict()
    report.update({"record": str(path), "snapshots": rec.length, "tau": rec.tau,
                   "window": rec.window, "norm": e.norm, "fit_range": [e.fit_lo, e.fit_hi],
                   "n_max": e.n_max, "self_pairs": "included"})
    write_json(d / "entropy.json", report)
    return StageResult([out, d / "entropy.json"], report, inconclusive=not rep.has_plateau)


STAGE_FUNCS: Dict[str, Callable[[Context], StageResult]] = {
    "simulate": stage_simulate,
    "twin": stage_twin,
    "verify-kernels": stage_verify_kernels,
    "verify-sampling": stage_verify_sampling,
    "entropy": stage_entropy,
}


# --------------------------------------------------------------------------- stamps and manifest

def _stamp_path(ctx: Context, stage: str) -> Path:
    return ctx.out / stage / "stage.json"


def write_stamp(ctx: Context, stage: str, result: StageResult, wall: float) -> dict:
    entry = {
        "stage": stage,
        "config_hash": ctx.cfg.hash(),
        "files": {str(p.relative_to(ctx.out)): sha256_of(p) for p in result.files},
        "wall_clock_s": wall,
        "threads": ctx.threads,
        "inconclusive": result.inconclusive,
    }
    write_json(_stamp_path(ctx, stage), entry)
    return entry


def valid_stamp(ctx: Context, stage: str) -> Optional[dict]:
    p = _stamp_path(ctx, stage)
    if not p.exists():
        return None
    try:
        entry = json.loads(p.read_text())
    except json.JSONDecodeError:
        return None
    if entry.get("config_hash") != ctx.cfg.hash():
        return None
    for rel, digest in entry.get("files", {}).items():
        f = ctx.out / rel
        if not f.exists() or sha256_of(f) != digest:
            return None
    return entry


def run_stage(ctx: Context, stage: str, **kwargs) -> dict:
    t0 = time.perf_counter()
    result = STAGE_FUNCS[stage](ctx, **kwargs)
    return write_stamp(ctx, stage, result, time.perf_counter() - t0)


def verify_manifest(path: Path) -> List[str]:
    """Files whose checksum no longer matches the manifest (empty when valid)."""
    data = json.loads(Path(path).read_text())
    root = Path(path).parent
    bad = []
    for entry in data.get("stages", {}).values():
        for rel, digest in entry.get("files", {}).items():
            f = root / rel
            if not f.exists() or sha256_of(f) != digest:
                bad.append(rel)
    return bad


def cmd_pipeline(ctx: Context, stages: Sequence[str]) -> int:
    wanted = [s for s in STAGES if s in set(stages)]
    unknown = set(stages) - set(STAGES)
    if unknown:
        raise ValidationError(f"unknown stage(s): {', '.join(sorted(unknown))}")
    for s in wanted:
        for dep in DEPENDS.get(s, ()):
            if dep not in wanted and valid_stamp(ctx, dep) is None:
                raise ValidationError(f"stage {s} needs {dep}; add it to the stage list")
    ctx.cfg.save(ctx.out / "config.ini")
    manifest = {"config_hash": ctx.cfg.hash(), "artifact_version": __version__,
                "threads": ctx.threads, "stages": {}, "complete": False}
    code = EXIT_OK
    fresh = set()
    try:
        for s in wanted:
            stale_input = any(dep in fresh for dep in DEPENDS.get(s, ()))
            stamp = None if stale_input else valid_stamp(ctx, s)
            if stamp is not None:
                stamp = dict(stamp, status="skipped")
                print(f"[{s}] up to date, skipped")
            else:
                print(f"[{s}] running")
                stamp = dict(run_stage(ctx, s), status="done")
                fresh.add(s)  # dependants must consume the new outputs
            manifest["stages"][s] = stamp
            if stamp.get("inconclusive"):
                code = EXIT_INCONCLUSIVE
        manifest["complete"] = True
    finally:
        manifest["written"] = time.strftime("%Y-%m-%dT%H:%M:%S")
        write_json(ctx.out / "manifest.json", manifest)
    return code


# --------------------------------------------------------------------------- plots

def cmd_export_plots(manifest_path: Path) -> dict:
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise ValidationError(f"manifest {manifest_path} not found; run the pipeline first")
    root = manifest_path.parent
    data = json.loads(manifest_path.read_text())
    stages = data.get("stages", {})
    out = root / "plots"
    out.mkdir(exist_ok=True)
    plots, skipped = [], []

    def have(stage, rel):
        if stage not in stages:
            skipped.append({"plot": rel, "reason": f"stage {stage} not in manifest"})
            return False
        if not (root / stage / rel).exists():
            skipped.append({"plot": rel, "reason": f"{stage}/{rel} missing"})
            return False
        return True

    if have("verify-kernels", "kernels.json"):
        audits = json.loads((root / "verify-kernels" / "kernels.json").read_text())["audits"]
        write_csv(out / "kernel_audit.dat", ["index", "lemma", "d", "p", "regime", "max_ratio"],
                  ((i, a["lemma"], a["d"], a["p"], a["regime"], a["max_ratio"])
                   for i, a in enumerate(audits)))
        plots.append({"file": "kernel_audit.dat", "kind": "bar", "title": "kernel envelope audit",
                      "x": {"column": "index", "label": "audit (variant, d, p)"},
                      "series": [{"column": "max_ratio", "label": "max ratio"}],
                      "y": {"label": "kernel norm / envelope", "scale": "log"}})
    if have("twin", "history.csv"):
        h = np.loadtxt(root / "twin" / "history.csv", delimiter=",", skiprows=1, ndmin=2)
        with np.errstate(divide="ignore"):
            write_csv(out / "twin_separation.dat", ["t", "log_sup_w", "log_lattice_w"],
                      zip(h[:, 0], np.log(h[:, 1]), np.log(h[:, 2])))
        plots.append({"file": "twin_separation.dat", "kind": "line", "title": "twin separation",
                      "x": {"column": "t", "label": "t"},
                      "series": [{"column": "log_sup_w", "label": "log sup |w|"},
                                 {"column": "log_lattice_w", "label": "log lattice norm of w"}],
                      "y": {"label": "log separation", "scale": "linear"}})
    if have("entropy", "entropy.json"):
        rep = json.loads((root / "entropy" / "entropy.json").read_text())
        write_csv(out / "entropy_slopes.dat", ["log_epsilon", "slope", "k2"],
                  zip(np.log(rep["epsilons"]), rep["slopes"], rep["k2"]))
        plots.append({"file": "entropy_slopes.dat", "kind": "line", "title": "correlation entropy",
                      "x": {"column": "log_epsilon", "label": "log epsilon"},
                      "series": [{"column": "slope", "label": "-d log C / dn"}],
                      "y": {"label": "slope", "scale": "linear"}})
    if have("entropy", "correlation.csv"):
        rows = np.genfromtxt(root / "entropy" / "correlation.csv", delimiter=",", names=True)
        write_csv(out / "log_c.dat", ["epsilon", "n", "log_C"],
                  zip(rows["epsilon"], rows["n"].astype(int), rows["log_C"]))
        plots.append({"file": "log_c.dat", "kind": "line", "title": "log C against n",
                      "x": {"column": "n", "label": "n"}, "group_by": "epsilon",
                      "series": [{"column": "log_C", "label": "log C"}],
                      "y": {"label": "log C", "scale": "linear"}})
    if have("simulate", "snapshots.entv"):
        cfg = RunConfig.load(root / "config.ini") if (root / "config.ini").exists() else RunConfig()
        res = cfg.resolved()
        fields = load_snapshots(root / "simulate" / "snapshots.entv")
        f0 = fields[0]
        idx = lattice_indices(f0.grid_points, f0.domain_length, res.scales.delta_star, res.lam)
        xc = (f0.x[idx] + f0.domain_length / 2) % f0.domain_length - f0.domain_length / 2
        stride = max(1, int(round(res.scales.tau_star / res.snapshot_every)))
        rows = ((f.time, x, float(np.hypot(f.components[0, i], f.components[1, i])))
                for f in fields[::stride] for x, i in zip(xc, idx))
        write_csv(out / "lattice_samples.dat", ["t", "x", "modulus"], rows)
        plots.append({"file": "lattice_samples.dat", "kind": "heatmap",
                      "title": "field sampled on the space-time lattice",
                      "x": {"column": "x", "label": "x"}, "y": {"column": "t", "label": "t"},
                      "series": [{"column": "modulus", "label": "|v|"}]})
    desc = {"plots": plots, "skipped": skipped, "format": "csv with header row"}
    write_json(out / "plots.json", desc)
    return desc


# --------------------------------------------------------------------------- argument parsing

def _global_flags(defaults: bool) -> argparse.ArgumentParser:
    kw = {} if defaults else {"default": argparse.SUPPRESS}
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", help="run configuration file", **kw)
    p.add_argument("--out-dir", help="output directory (overrides output.directory)", **kw)
    p.add_argument("--threads", type=int, help="worker threads for FFTs and pair counting", **kw)
    p.add_argument("--seed", type=int, help="random seed (overrides simulation.seed)", **kw)
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="entvol", parents=[_global_flags(True)],
                                     description="Entropy-per-volume experiments for the CGL equation.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    g = [_global_flags(False)]

    sub.add_parser("scales", parents=g, help="derive and print the natural scales")

    p = sub.add_parser("simulate", parents=g, help="run the chaotic simulation and store snapshots")
    p.add_argument("--t-final", type=float, help="recorded duration after the transient")
    p.add_argument("--dt", type=float, help="time step")
    p.add_argument("--snapshot-every", type=float, help="snapshot interval")

    p = sub.add_parser("twin", parents=g, help="perturb the final snapshot and track the separation")
    p.add_argument("--eps0", type=float, help="initial perturbation size")
    p.add_argument("--support", choices=("everywhere", "lattice-only"),
                   help="perturb everywhere or only near lattice points")

    sub.add_parser("verify-kernels", parents=g, help="audit kernel envelopes, write CSV")

    p = sub.add_parser("verify-sampling", parents=g, help="dissipative, forward or sampling experiment")
    p.add_argument("--epsilon", type=float, help="lattice agreement level (sampling mode)")
    p.add_argument("--k-star-prefactor", type=float, help="cutoff prefactor for the frequency split")
    p.add_argument("--ell", type=float, help="how far the output window shrinks (dissipative mode)")
    p.add_argument("--l-inner", type=float, help="half-width of the certified inner region")
    p.add_argument("--mode", choices=("dissipative", "forward", "sampling"), help="experiment to run")

    p = sub.add_parser("entropy", parents=g, help="correlation sums and K2 from a snapshot record")
    p.add_argument("--record", type=Path, help="snapshot file (default: the simulate stage output)")
    p.add_argument("--norm", choices=("grid", "lattice"), help="window distance: all grid points or lattice samples")
    p.add_argument("--n-max", type=int, help="longest embedding length in snapshots")
    p.add_argument("--eps-decades", type=float, nargs=2, metavar=("LO", "HI"),
                   help="epsilon range as base-10 exponents")
    p.add_argument("--fit-range", type=int, nargs=2, metavar=("N_LO", "N_HI"),
                   help="embedding lengths used for the slope fit")
    p.add_argument("--out", type=Path, help="copy the correlation CSV here as well")

    p = sub.add_parser("pipeline", parents=g, help="run stages in order with resumption")
    p.add_argument("--stages", nargs="*", default=list(STAGES), metavar="STAGE",
                   help=f"subset of {', '.join(STAGES)} (default: all)")

    p = sub.add_parser("export-plots", parents=g, help="write plot-ready data files")
    p.add_argument("--manifest", type=Path, help="manifest to read (default: OUT_DIR/manifest.json)")
    return parser


def _apply_overrides(cfg: RunConfig, args) -> None:
    s, e = cfg.simulation, cfg.experiment
    pairs = [
        ("seed", s, "seed"), ("t_final", s, "t_final"), ("dt", s, "dt"),
        ("snapshot_every", s, "snapshot_every"), ("eps0", e, "eps0"), ("support", e, "support"),
        ("epsilon", e, "epsilon"), ("ell", e, "ell"), ("l_inner", e, "l_inner"),
        ("mode", e, "mode"), ("norm", e, "norm"), ("n_max", e, "n_max"),
    ]
    for arg, sec, key in pairs:
        v = getattr(args, arg, None)
        if v is not None:
            setattr(sec, key, v)
    if getattr(args, "k_star_prefactor", None) is not None:
        cfg.scales.k_star_prefactor = args.k_star_prefactor
    if getattr(args, "eps_decades", None):
        e.eps_lo, e.eps_hi = (10.0 ** v for v in args.eps_decades)
    if getattr(args, "fit_range", None):
        e.fit_lo, e.fit_hi = args.fit_range
    cfg.check_static()


def _print_scales(cfg: RunConfig) -> dict:
    sc = cfg.derived_scales()
    data = sc.as_dict()
    width = max(len(k) for k in data)
    for k, v in data.items():
        print(f"{k:<{width}}  {v:.10g}")
    return data


def run(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    _apply_overrides(cfg, args)
    out = Path(args.out_dir if args.out_dir else cfg.output.directory)
    threads = set_threads(args.threads or 1)
    ctx = Context(cfg, out, threads)

    if args.command == "scales":
        data = _print_scales(cfg)
        out.mkdir(parents=True, exist_ok=True)
        write_json(out / "scales.json", data)
        return EXIT_OK

    with OutputLock(out):
        if args.command == "pipeline":
            return cmd_pipeline(ctx, args.stages)
        if args.command == "export-plots":
            desc = cmd_export_plots(args.manifest or out / "manifest.json")
            for s in desc["skipped"]:
                print(f"skipped {s['plot']}: {s['reason']}")
            print(f"wrote {len(desc['plots'])} plot data file(s) to {out / 'plots'}")
            return EXIT_OK
        cfg.resolved()  # field-level validation before any work
        kwargs = {}
        if args.command == "entropy" and args.record is not None:
            kwargs["record"] = args.record
        stamp = run_stage(ctx, args.command, **kwargs)
        if args.command == "entropy" and args.out is not None:
            src = out / "entropy" / "correlation.csv"
            Path(args.out).write_bytes(src.read_bytes())
        for rel in stamp["files"]:
            print(out / rel)
        return EXIT_INCONCLUSIVE if stamp["inconclusive"] else EXIT_OK


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        return run(argv)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (DivergenceError, QuadratureError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())

"""Experiment harness: workflow timings, speedups and convergence studies."""
from __future__ import annotations

import hashlib
import json
import logging
import math
import platform
import socket
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .pde_fom import fom_solve
from .pod import SPACETIME as ST_SNAPSHOTS, SPATIAL, pod_basis, rrf_basis, snapshots_from_trajectories
from .rom import build_space_rom, build_st_rom
from .uq_mc import FOMSolver, MomentEstimate, ROMSolver, mc_propagate, sample_parameters
from .uq_sg import (build_poly_basis, gauss_quadrature, pce_moments, sg_space_solve,
                    sg_spacetime_solve)

log = logging.getLogger(__name__)


@dataclass
class TimingReport:
    method: str
    n_samples: int
    find_trial_subspace_s: float = 0.0
    build_rom_s: float = 0.0
    solve_rom_s: float = 0.0
    offline_fom_s: float = 0.0
    empty: bool = False

    @property
    def total_s(self):
        return self.find_trial_subspace_s + self.build_rom_s + self.solve_rom_s


@dataclass
class ErrorReport:
    method: str
    propagation: str
    grid: list
    rel_mean_error: list
    rel_var_error: list
    repetitions: int = 1
    error_field: str = "final"
    per_repetition: tuple = None


@dataclass
class SpeedupReport:
    method: str
    grid: list
    fom_s: list
    rom_s: list
    speedup: list = field(default_factory=list)
    flags: list = field(default_factory=list)


@dataclass
class TrainedModel:
    """A ready-to-solve handle plus the offline stage timings that produced it."""

    method: str
    solver: object
    model: object = None
    find_trial_subspace_s: float = 0.0
    build_rom_s: float = 0.0


def train(cfg, ivp=None):
    """Offline FOM training solves at ``n_train`` sampled parameters."""
    ivp = ivp or cfg.build_problem()
    mus = sample_parameters(cfg.build_distribution(), cfg.n_train, cfg.train_seed)
    t0 = time.perf_counter()
    trajs = [fom_solve(ivp, mu) for mu in mus]
    return trajs, time.perf_counter() - t0


def build_method(cfg, ivp, trajs, method=None):
    """Find the trial subspace and build the ROM for ``method``; stages are timed separately."""
    method = method or cfg.method
    if method == "fom":
        return TrainedModel(method, FOMSolver(ivp))
    t0 = time.perf_counter()
    if method == "st-rom":
        basis = pod_basis(snapshots_from_trajectories(trajs, ST_SNAPSHOTS), cfg.e_tol)
    elif method == "space-rom":
        basis = pod_basis(snapshots_from_trajectories(trajs, SPATIAL), cfg.e_tol)
    elif method == "space-rom-rrf":
        if cfg.rrf_k_hat is None:
            raise ValueError("space-rom-rrf needs rrf_k_hat")
        basis = rrf_basis(snapshots_from_trajectories(trajs, SPATIAL), cfg.rrf_k_hat, cfg.rrf_seed)
    else:
        raise ValueError(f"unknown method {method!r}")
    t1 = time.perf_counter()
    model = build_st_rom(ivp, basis) if method == "st-rom" else build_space_rom(ivp, basis)
    t2 = time.perf_counter()
    return TrainedModel(method, ROMSolver(model, method), model, t1 - t0, t2 - t1)


def run_timing(cfg, n_samples=None, method=None, ivp=None, trained=None):
    """Three-stage wall times; offline FOM training is reported but not counted."""
    method = method or cfg.method
    ivp = ivp or cfg.build_problem()
    if n_samples is None:
        n_samples = max(getattr(cfg.propagation, "n_samples", [0]) or [0])
    offline = 0.0
    if method != "fom" and trained is None:
        trained_trajs, offline = train(cfg, ivp)
        trained = build_method(cfg, ivp, trained_trajs, method)
    elif trained is None:
        trained = build_method(cfg, ivp, [], method)
    report = TimingReport(method, int(n_samples), trained.find_trial_subspace_s, trained.build_rom_s,
                          0.0, offline, empty=n_samples == 0)
    if n_samples > 0:
        seed = getattr(cfg.propagation, "seed", 0)
        dist = cfg.build_distribution()
        # single worker so stage times are comparable across methods
        report.solve_rom_s = _timed_ensemble(trained.solver, dist, n_samples, seed, cfg.error_field)
    return report


def _timed_ensemble(solver, dist, n, seed, which):
    if n == 1:
        # moments need two samples; time the single solve directly
        mu = sample_parameters(dist, 1, seed)[0]
        t0 = time.perf_counter()
        solver.field(mu, which)
        return time.perf_counter() - t0
    return mc_propagate(solver, dist, n, seed, which=which, workers=1).solve_seconds


def run_speedup(fom_cfg, rom_cfg, grid=None):
    """FOM time over ROM time (subspace + build + solve) at each sample count."""
    grid = list(grid or rom_cfg.propagation.n_samples)
    ivp = rom_cfg.build_problem()
    trajs, _ = train(rom_cfg, ivp)
    trained = build_method(rom_cfg, ivp, trajs)
    fom = build_method(fom_cfg, ivp, [], "fom")
    dist = rom_cfg.build_distribution()
    seed = rom_cfg.propagation.seed
    rep = SpeedupReport(rom_cfg.method, grid, [], [])
    for n in grid:
        t_fom = _timed_ensemble(fom.solver, dist, n, seed, rom_cfg.error_field) if n else 0.0
        t_rom = trained.find_trial_subspace_s + trained.build_rom_s
        t_rom += _timed_ensemble(trained.solver, dist, n, seed, rom_cfg.error_field) if n else 0.0
        rep.fom_s.append(t_fom)
        rep.rom_s.append(t_rom)
        if t_rom <= 0:
            rep.speedup.append(math.inf)
            rep.flags.append("zero_rom_time")
        else:
            rep.speedup.append(t_fom / t_rom)
            rep.flags.append("")
    return rep


def relative_errors(ref, approx):
    """``||E_ref - mean|| / ||E_ref||`` and the same for the variance."""
    em = np.linalg.norm(ref.mean - approx.mean) / np.linalg.norm(ref.mean)
    ev = np.linalg.norm(ref.variance - approx.variance) / np.linalg.norm(ref.variance)
    return float(em), float(ev)


def _reference_key(cfg):
    keep = {k: v for k, v in cfg.to_dict().items()
            if k in ("problem", "mesh", "dt", "T", "source", "distribution", "error_field")}
    keep["reference"] = {"n_samples": cfg.reference.n_samples, "seed": cfg.reference.seed}
    return hashlib.sha256(json.dumps(keep, sort_keys=True).encode()).hexdigest()


def reference_moments(cfg, ivp=None, path=None):
    """High-fidelity FOM Monte Carlo moments, cached on disk by config fingerprint."""
    path = Path(path or cfg.reference.path)
    key = _reference_key(cfg)
    if path.is_file():
        with np.load(path, allow_pickle=False) as data:
            if str(data["key"]) == key:
                return MomentEstimate(data["mean"], data["variance"], int(data["n_samples"]))
        log.info("reference cache %s belongs to another configuration; regenerating", path)
    ivp = ivp or cfg.build_problem()
    log.info("computing reference moments: %d FOM samples, seed %d", cfg.reference.n_samples,
             cfg.reference.seed)
    mom = mc_propagate(FOMSolver(ivp), cfg.build_distribution(), cfg.reference.n_samples,
                       cfg.reference.seed, which=cfg.error_field, workers=cfg.workers)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez(path, mean=mom.mean, variance=mom.variance, n_samples=mom.n_samples, key=key)
    return mom


def _sg_moments(cfg, ivp, trained, degree, which):
    dist = cfg.build_distribution()
    basis = build_poly_basis(dist, degree)
    npa = cfg.propagation.nodes_per_axis or degree + 1
    quad = gauss_quadrature(dist, npa)
    method = trained.method
    if method == "st-rom":
        coeffs = sg_spacetime_solve(trained.model, basis, quad)
        Phi = trained.model.final_rows if which == "final" else trained.model.basis.columns
        return pce_moments(coeffs, Phi)
    target = ivp if method == "fom" else trained.model
    Phi = None if method == "fom" else trained.model.basis.columns
    steps = sg_space_solve(target, basis, quad)
    if which == "final":
        return pce_moments(steps[-1], Phi)
    per_step = [pce_moments(c, Phi) for c in steps]
    return MomentEstimate(np.concatenate([m.mean for m in per_step]),
                          np.concatenate([m.variance for m in per_step]), 0)


def run_convergence(cfg, ivp=None, reference=None):
    """Relative moment errors over the MC sample-count grid or the SG degree grid."""
    ivp = ivp or cfg.build_problem()
    ref = reference or reference_moments(cfg, ivp)
    which = cfg.error_field
    if cfg.method == "fom":
        trained = build_method(cfg, ivp, [], "fom")
    else:
        trajs, _ = train(cfg, ivp)
        trained = build_method(cfg, ivp, trajs)
    prop = cfg.propagation
    if prop.kind == "sg":
        em, ev = [], []
        for p in prop.degrees:
            mom = _sg_moments(cfg, ivp, trained, p, which)
            if mom.mean.shape != ref.mean.shape:
                raise ValueError(f"moment shape {mom.mean.shape} does not match reference {ref.mean.shape}")
            a, b = relative_errors(ref, mom)
            em.append(a)
            ev.append(b)
        return ErrorReport(cfg.method, "sg", list(prop.degrees), em, ev, 1, which)

    dist = cfg.build_distribution()
    grid = list(prop.n_samples)
    em = np.zeros((prop.repetitions, len(grid)))
    ev = np.zeros_like(em)
    for r in range(prop.repetitions):
        for j, n in enumerate(grid):
            mom = mc_propagate(trained.solver, dist, n, prop.seed + r, which=which, workers=cfg.workers)
            if mom.mean.shape != ref.mean.shape:
                raise ValueError(f"moment shape {mom.mean.shape} does not match reference {ref.mean.shape}")
            em[r, j], ev[r, j] = relative_errors(ref, mom)
    return ErrorReport(cfg.method, "mc", grid, em.mean(axis=0).tolist(), ev.mean(axis=0).tolist(),
                       prop.repetitions, which, (em, ev))


def _fmt(x):
    return "inf" if x == math.inf else f"{x:.17g}"


def emit_results(report, out_dir, cfg=None, seeds=None, name=None):
    """Write ``<name>.csv`` and ``manifest.json``; returns the written paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if isinstance(report, ErrorReport):
        name = name or "convergence"
        header = "grid_point,rel_mean_error,rel_var_error"
        rows = [f"{g},{_fmt(a)},{_fmt(b)}" for g, a, b in
                zip(report.grid, report.rel_mean_error, report.rel_var_error)]
    elif isinstance(report, SpeedupReport):
        name = name or "speedup"
        header = "grid_point,fom_s,rom_s,speedup,flag"
        rows = [f"{g},{_fmt(a)},{_fmt(b)},{_fmt(s)},{f}" for g, a, b, s, f in
                zip(report.grid, report.fom_s, report.rom_s, report.speedup, report.flags)]
    else:
        reports = report if isinstance(report, (list, tuple)) else [report]
        name = name or "timing"
        header = ("grid_point,method,find_trial_subspace_s,build_rom_s,solve_rom_s,total_s,"
                  "offline_fom_s,empty")
        rows = [f"{r.n_samples},{r.method},{_fmt(r.find_trial_subspace_s)},{_fmt(r.build_rom_s)},"
                f"{_fmt(r.solve_rom_s)},{_fmt(r.total_s)},{_fmt(r.offline_fom_s)},{int(r.empty)}"
                for r in reports]
    csv_path = out / f"{name}.csv"
    csv_path.write_text("\n".join([header] + rows) + "\n")
    extra = {}
    if isinstance(report, ErrorReport):
        extra = {"error_field": report.error_field, "repetitions": report.repetitions}
    return emit_manifest(out, cfg, seeds, [csv_path], extra)


def emit_manifest(out_dir, cfg, seeds, files, extra=None):
    """Provenance record next to the outputs; its ``config`` block re-parses to ``cfg``."""
    out = Path(out_dir)
    manifest = {
        "kind": "strom-manifest",
        "config": cfg.to_dict() if cfg is not None else None,
        "seeds": seeds or {},
        "software_version": __version__,
        "python": platform.python_version(),
        "hostname": socket.gethostname(),
        "outputs": [Path(f).name for f in files],
    }
    manifest.update(extra or {})
    man_path = out / "manifest.json"
    man_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return [*files, man_path]


def config_seeds(cfg):
    seeds = {"train_seed": cfg.train_seed, "rrf_seed": cfg.rrf_seed, "reference_seed": cfg.reference.seed}
    if cfg.propagation.kind == "mc":
        seeds["mc_seeds"] = [cfg.propagation.seed + r for r in range(cfg.propagation.repetitions)]
    return seeds


def timing_as_dict(report):
    d = asdict(report)
    d["total_s"] = report.total_s
    return d

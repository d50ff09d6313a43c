"""Command-line entry point: ``strom <subcommand> --config run.yaml --out results/``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import bench
from .config import ConfigError, parse_config, validate_config
from .pde_fom import SolverError, fom_solve
from .rom import reconstruct, rom_solve
from .uq_mc import mc_propagate, sample_parameters
from .uq_sg import build_poly_basis, gauss_quadrature, sg_space_solve, sg_spacetime_solve

log = logging.getLogger("strom")

SUBCOMMANDS = ("fom", "train", "rom", "mc", "sg", "bench-timing", "bench-speedup", "bench-convergence")


def _load(args):
    cfg = parse_config(args.config, desk=args.desk) if args.config else validate_config({}, desk=args.desk)
    if args.seed is not None and cfg.propagation.kind == "mc":
        prop = cfg.propagation.model_dump()
        prop["seed"] = args.seed
        cfg = cfg.replace(propagation=prop)
    return cfg


def _out(args, cfg):
    return Path(args.out or cfg.output)


def _parameter(args, cfg):
    dist = cfg.build_distribution()
    if args.seed is None:
        return dist.mean
    return sample_parameters(dist, 1, args.seed)[0]


def cmd_fom(args, cfg):
    ivp = cfg.build_problem()
    mu = _parameter(args, cfg)
    out = _out(args, cfg)
    out.mkdir(parents=True, exist_ok=True)
    fom_solve(ivp, mu).to_csv(out / "trajectory.csv")
    return [out / "trajectory.csv"], {"parameter": mu.tolist()}


def cmd_train(args, cfg):
    ivp = cfg.build_problem()
    trajs, offline = bench.train(cfg, ivp)
    method = cfg.method if cfg.method != "fom" else "space-rom"
    trained = bench.build_method(cfg, ivp, trajs, method)
    out = _out(args, cfg)
    out.mkdir(parents=True, exist_ok=True)
    basis = trained.model.basis
    basis.to_csv(out / "basis.csv")
    np.savetxt(out / "singular_values.csv", basis.singular_values, fmt="%.17g")
    return [out / "basis.csv", out / "singular_values.csv"], {
        "method": method, "K": basis.K, "energy_captured": basis.energy_captured, "offline_fom_s": offline}


def cmd_rom(args, cfg):
    ivp = cfg.build_problem()
    method = cfg.method if cfg.method != "fom" else "st-rom"
    trajs, _ = bench.train(cfg, ivp)
    trained = bench.build_method(cfg, ivp, trajs, method)
    mu = _parameter(args, cfg)
    traj = reconstruct(trained.model, rom_solve(trained.model, mu))
    out = _out(args, cfg)
    out.mkdir(parents=True, exist_ok=True)
    traj.to_csv(out / "trajectory.csv")
    return [out / "trajectory.csv"], {"method": method, "K": trained.model.K, "parameter": mu.tolist()}


def cmd_mc(args, cfg):
    if cfg.propagation.kind != "mc":
        raise ConfigError(["propagation.kind: mc subcommand needs kind 'mc'"])
    ivp = cfg.build_problem()
    trajs, _ = bench.train(cfg, ivp) if cfg.method != "fom" else ([], 0.0)
    trained = bench.build_method(cfg, ivp, trajs)
    n = max(cfg.propagation.n_samples)
    mom = mc_propagate(trained.solver, cfg.build_distribution(), n, cfg.propagation.seed,
                       which=cfg.error_field, workers=cfg.workers)
    out = _out(args, cfg)
    out.mkdir(parents=True, exist_ok=True)
    mom.to_csv(out / "moments.csv")
    return [out / "moments.csv"], {"n_samples": n}


def cmd_sg(args, cfg):
    if cfg.propagation.kind != "sg":
        raise ConfigError(["propagation.kind: sg subcommand needs kind 'sg'"])
    ivp = cfg.build_problem()
    trajs, _ = bench.train(cfg, ivp) if cfg.method != "fom" else ([], 0.0)
    trained = bench.build_method(cfg, ivp, trajs)
    degree = max(cfg.propagation.degrees)
    mom = bench._sg_moments(cfg, ivp, trained, degree, cfg.error_field)
    dist = cfg.build_distribution()
    basis = build_poly_basis(dist, degree)
    quad = gauss_quadrature(dist, cfg.propagation.nodes_per_axis or degree + 1)
    if cfg.method == "st-rom":
        coeffs = sg_spacetime_solve(trained.model, basis, quad)
    else:
        coeffs = sg_space_solve(ivp if cfg.method == "fom" else trained.model, basis, quad)[-1]
    out = _out(args, cfg)
    out.mkdir(parents=True, exist_ok=True)
    mom.to_csv(out / "moments.csv")
    coeffs.to_csv(out / "pce_coefficients.csv")
    return [out / "moments.csv", out / "pce_coefficients.csv"], {"degree": degree}


def cmd_bench_timing(args, cfg):
    ivp = cfg.build_problem()
    methods = args.methods or [cfg.method]
    trajs, offline = bench.train(cfg, ivp)
    reports = []
    for m in methods:
        trained = bench.build_method(cfg, ivp, trajs, m)
        rep = bench.run_timing(cfg, method=m, ivp=ivp, trained=trained)
        rep.offline_fom_s = offline if m != "fom" else 0.0
        reports.append(rep)
        log.info("%s: %s", m, bench.timing_as_dict(rep))
    return reports


def cmd_bench_speedup(args, cfg):
    rom_cfg = cfg if cfg.method != "fom" else cfg.replace(method="st-rom")
    return bench.run_speedup(cfg.replace(method="fom"), rom_cfg)


def cmd_bench_convergence(args, cfg):
    return bench.run_convergence(cfg)


def build_parser():
    parser = argparse.ArgumentParser(prog="strom", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="YAML run configuration")
        p.add_argument("--out", help="output directory (defaults to the config's output)")
        p.add_argument("--seed", type=int, help="override the Monte Carlo seed / pick a sampled parameter")
        p.add_argument("--desk", action="store_true", help="desk-scale 1D preset (N_s=63, N_t=100)")
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "bench-timing":
            p.add_argument("--methods", nargs="+", choices=["fom", "space-rom", "space-rom-rrf", "st-rom"])
    return parser


def _error_record(exc):
    rec = {"error": type(exc).__name__, "message": str(exc)}
    if isinstance(exc, ConfigError):
        rec["violations"] = exc.errors
    if isinstance(exc, SolverError):
        rec["step"], rec["sample"] = exc.step, exc.sample
    return rec


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _load(args)
        out = _out(args, cfg)
        seeds = bench.config_seeds(cfg)
        if args.command.startswith("bench-"):
            handler = {"bench-timing": cmd_bench_timing, "bench-speedup": cmd_bench_speedup,
                       "bench-convergence": cmd_bench_convergence}[args.command]
            report = handler(args, cfg)
            written = bench.emit_results(report, out, cfg, seeds)
        else:
            handler = {"fom": cmd_fom, "train": cmd_train, "rom": cmd_rom, "mc": cmd_mc, "sg": cmd_sg}
            files, extra = handler[args.command](args, cfg)
            written = bench.emit_manifest(out, cfg, seeds, files, extra)
    except (ConfigError, SolverError, ValueError, OSError) as exc:
        json.dump(_error_record(exc), sys.stderr)
        sys.stderr.write("\n")
        return 2
    for path in written:
        print(path)
    return 0


if __name__ == "__main__":
    sys.exit(main())

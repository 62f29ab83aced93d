"""Command-line front end: simulations, theory solves, and comparison reports.

Exit codes are a stable contract: 0 success, 1 tolerance failure in a
comparison, 2 usage or configuration error.  All randomness flows from the
config seed; plotting is out of scope, every artifact is JSON or CSV.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import detequiv, generror, simulate, spectrum
from .cache import FixedPointCache, RunManifest
from .model import ConfigError, ExperimentConfig, validate_config

DEFAULT_KS_TOL = 0.03
DEFAULT_GENERROR_TOL = 0.05

EXIT_OK = 0
EXIT_TOLERANCE = 1
EXIT_USAGE = 2


class UsageError(Exception):
    pass


def _load_config(path: str, for_theory: bool) -> ExperimentConfig:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"config file not found: {p}")
    try:
        config = ExperimentConfig.from_file(p)
    except (ConfigError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise UsageError(f"invalid config {p}: {exc}") from exc
    report = validate_config(config, for_theory=for_theory)
    for w in report.warnings:
        print(f"warning: {w}", file=sys.stderr)
    if not report.valid:
        raise UsageError("config failed validation:\n  " + "\n  ".join(report.errors))
    return config


def _parse_grid(spec: str):
    try:
        lo, hi, pts = spec.split(":")
        lo, hi, pts = float(lo), float(hi), int(pts)
    except ValueError as exc:
        raise UsageError(f"bad grid spec {spec!r}; expected min:max:points") from exc
    if hi <= lo or pts < 2:
        raise UsageError(f"bad grid spec {spec!r}; need max > min and points >= 2")
    return lo, hi, pts


def _parse_sweep(spec: str) -> np.ndarray:
    try:
        lo, hi, count = spec.split(":")
        lo, hi, count = float(lo), float(hi), int(count)
    except ValueError as exc:
        raise UsageError(f"bad sweep spec {spec!r}; expected start:stop:count") from exc
    if count < 1 or hi < lo:
        raise UsageError(f"bad sweep spec {spec!r}")
    return np.linspace(lo, hi, count)


def _default_jobs() -> int:
    return max(1, int(os.environ.get("SPIKEDRF_JOBS", "1")))


# --------------------------------------------------------------------------- #
# simulate
# --------------------------------------------------------------------------- #


def _simulate_one(args):
    config_dict, seed_index, compute_spectrum, n_test = args
    config = ExperimentConfig.from_dict(config_dict)
    res = simulate.run_experiment(
        config,
        seed_index=seed_index,
        compute_spectrum=compute_spectrum,
        compute_spike_deviation=True,
        n_test=n_test,
    )
    return {
        "seed_index": seed_index,
        "config_hash": config.config_hash(),
        "config": config.to_dict(),
        "gen_error": {"mean": res.gen_error, "stderr": res.gen_error_stderr},
        "tau": {
            "tau0": res.tau.tau0.tolist(),
            "tau1": res.tau.tau1.tolist(),
            "tau2": res.tau.tau2,
            "tau3": res.tau.tau3,
        },
        "spike_deviation": res.spike_dev,
        "eigenvalues": res.eigenvalues.tolist() if res.eigenvalues is not None else None,
    }


def _run_seeds(config: ExperimentConfig, seeds: int, compute_spectrum: bool, jobs: int, n_test: int = 10_000):
    tasks = [(config.to_dict(), i, compute_spectrum, n_test) for i in range(seeds)]
    if jobs > 1 and seeds > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_simulate_one, tasks))
    else:
        results = [_simulate_one(t) for t in tasks]
    results.sort(key=lambda r: r["seed_index"])  # deterministic output ordering
    return results


def cmd_simulate(args) -> int:
    config = _load_config(args.config, for_theory=False)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    results = _run_seeds(config, args.seeds, args.spectrum, args.jobs or _default_jobs())
    manifest = RunManifest(config_hash=config.config_hash(), command="simulate")
    for res in results:
        path = out / f"run_seed{res['seed_index']:03d}.json"
        path.write_text(json.dumps(res, indent=2) + "\n")
        manifest.outputs.append(path)
        if args.eig_csv and res["eigenvalues"] is not None:
            csv_path = out / f"eigenvalues_seed{res['seed_index']:03d}.csv"
            csv_path.write_text("\n".join(f"{v!r}" for v in res["eigenvalues"]) + "\n")
            manifest.outputs.append(csv_path)
    errs = np.array([r["gen_error"]["mean"] for r in results])
    pooled = [v for r in results if r["eigenvalues"] for v in r["eigenvalues"]]
    aggregate = {
        "config_hash": config.config_hash(),
        "seeds": args.seeds,
        "gen_error": {
            "mean": float(errs.mean()),
            "stderr": float(errs.std(ddof=1) / np.sqrt(len(errs))) if len(errs) > 1 else 0.0,
        },
        "spike_deviation_mean": float(np.mean([r["spike_deviation"] for r in results])),
        "pooled_eigenvalue_count": len(pooled),
    }
    agg_path = out / "aggregate.json"
    agg_path.write_text(json.dumps(aggregate, indent=2) + "\n")
    manifest.outputs.append(agg_path)
    manifest.write(out / "manifest.json")
    print(f"wrote {len(results)} run artifacts to {out}")
    return EXIT_OK


# --------------------------------------------------------------------------- #
# theory
# --------------------------------------------------------------------------- #


def _spectrum_csv(path: Path, curve: spectrum.DensityCurve, config_hash: str) -> None:
    header = json.dumps({"config_hash": config_hash, "eps_schedule": list(curve.eps_schedule), "atom_mass": curve.atom_mass})
    lines = [f"# {header}", "lambda,density,eps_used,converged"]
    eps_used = float(curve.eps_schedule[-1])
    for lam, rho, conv in zip(curve.grid, curve.density, curve.converged):
        lines.append(f"{float(lam)!r},{float(rho)!r},{eps_used!r},{int(conv)}")
    path.write_text("\n".join(lines) + "\n")


def cmd_theory_spectrum(args) -> int:
    config = _load_config(args.config, for_theory=True)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    lo, hi, pts = _parse_grid(args.grid)
    problem = detequiv.problem_from_config(config)
    cache = FixedPointCache(args.cache, config.config_hash()) if args.cache else None
    curve = spectrum.density_grid(
        problem,
        lo,
        hi,
        pts,
        cache_get=cache.get if cache else None,
        cache_put=cache.put if cache else None,
    )
    csv_path = out / "theory_spectrum.csv"
    _spectrum_csv(csv_path, curve, config.config_hash())
    manifest = RunManifest(config_hash=config.config_hash(), command="theory-spectrum", outputs=[csv_path])
    if cache:
        manifest.extra["cache_hits"] = cache.hits
        manifest.extra["cache_misses"] = cache.misses
    manifest.write(out / "manifest.json")
    print(f"wrote {csv_path} ({pts} rows); bulk mass {curve.mass:.4f} + atom {curve.atom_mass:.4f}")
    return EXIT_OK


def _sweep_csv(path: Path, rows: list, k: int, config_hash: str) -> None:
    tau0_cols = ",".join(f"tau0_{q+1}" for q in range(k))
    tau1_cols = ",".join(f"tau1_{q+1}" for q in range(k))
    lines = [
        f"# {json.dumps({'config_hash': config_hash})}",
        f"alpha,gen_error_theory,gen_error_sim_mean,gen_error_sim_stderr,{tau0_cols},{tau1_cols},tau2,tau3",
    ]
    for row in rows:
        sim_mean = "" if row.get("sim_mean") is None else repr(float(row["sim_mean"]))
        sim_err = "" if row.get("sim_stderr") is None else repr(float(row["sim_stderr"]))
        cells = [repr(float(row["alpha"])), repr(float(row["theory"])), sim_mean, sim_err]
        cells += [repr(float(v)) for v in row["tau0"]] + [repr(float(v)) for v in row["tau1"]]
        cells += [repr(float(row["tau2"])), repr(float(row["tau3"]))]
        lines.append(",".join(cells))
    path.write_text("\n".join(lines) + "\n")


def _theory_row(config: ExperimentConfig, alpha: float) -> dict:
    problem = detequiv.problem_from_config(config).with_alpha(alpha)
    tau = generror.asymptotic_tau(problem, config.lam)
    return {
        "alpha": float(alpha),
        "theory": generror.expected_lambda(tau, problem),
        "tau0": tau.tau0.tolist(),
        "tau1": tau.tau1.tolist(),
        "tau2": tau.tau2,
        "tau3": tau.tau3,
    }


def cmd_theory_generror(args) -> int:
    config = _load_config(args.config, for_theory=True)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    alphas = _parse_sweep(args.alpha_sweep) if args.alpha_sweep else np.array([config.alpha])
    rows = [_theory_row(config, a) for a in alphas]
    csv_path = out / "theory_generror.csv"
    _sweep_csv(csv_path, rows, config.vocab.k, config.config_hash())
    RunManifest(config_hash=config.config_hash(), command="theory-generror", outputs=[csv_path]).write(out / "manifest.json")
    print(f"wrote {csv_path} ({len(rows)} rows)")
    return EXIT_OK


# --------------------------------------------------------------------------- #
# compare
# --------------------------------------------------------------------------- #


def cmd_compare(args) -> int:
    config = _load_config(args.config, for_theory=True)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    checks = []
    manifest = RunManifest(config_hash=config.config_hash(), command="compare")

    sim_results = None
    try:
        sim_results = _run_seeds(config, args.seeds, compute_spectrum=True, jobs=args.jobs or _default_jobs())
        pooled = np.array([v for r in sim_results for v in r["eigenvalues"]])
        eig_path = out / "eigenvalues.csv"
        eig_path.write_text("\n".join(f"{v!r}" for v in pooled) + "\n")
        manifest.outputs.append(eig_path)
    except Exception as exc:  # keep the theory half alive
        checks.append({"name": "simulation", "error": str(exc), "passed": False})

    problem = detequiv.problem_from_config(config)
    if sim_results is not None:
        try:
            lo, hi, pts = _parse_grid(args.grid) if args.grid else spectrum.auto_grid(pooled)
            curve = spectrum.density_grid(problem, lo, hi, pts)
            _spectrum_csv(out / "theory_spectrum.csv", curve, config.config_hash())
            manifest.outputs.append(out / "theory_spectrum.csv")
            ks = spectrum.ks_distance(pooled, curve)
            checks.append({"name": "spectrum_ks", "value": ks, "tol": args.tol_ks, "passed": bool(ks < args.tol_ks)})
        except Exception as exc:
            checks.append({"name": "spectrum_ks", "error": str(exc), "passed": False})

        try:
            row = _theory_row(config, config.alpha)
            errs = np.array([r["gen_error"]["mean"] for r in sim_results])
            row["sim_mean"] = float(errs.mean())
            row["sim_stderr"] = float(errs.std(ddof=1) / np.sqrt(len(errs))) if len(errs) > 1 else 0.0
            _sweep_csv(out / "generror_compare.csv", [row], config.vocab.k, config.config_hash())
            manifest.outputs.append(out / "generror_compare.csv")
            gap = abs(row["theory"] - row["sim_mean"]) / row["sim_mean"]
            checks.append(
                {"name": "generror_rel_gap", "value": gap, "tol": args.tol_generror, "passed": bool(gap < args.tol_generror)}
            )
        except Exception as exc:
            checks.append({"name": "generror_rel_gap", "error": str(exc), "passed": False})

    passed = bool(checks) and all(c["passed"] for c in checks)
    summary = {"config_hash": config.config_hash(), "passed": passed, "checks": checks}
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    manifest.outputs.append(out / "summary.json")
    manifest.write(out / "manifest.json")
    for c in checks:
        tail = f"value={c.get('value', float('nan')):.5g} tol={c.get('tol')}" if "value" in c else c.get("error", "")
        print(f"{'PASS' if c['passed'] else 'FAIL'} {c['name']} {tail}")
    return EXIT_OK if passed else EXIT_TOLERANCE


# --------------------------------------------------------------------------- #
# entry point
# --------------------------------------------------------------------------- #


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spikedrf", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="Monte Carlo of the two-step pipeline")
    sim.add_argument("config")
    sim.add_argument("--seeds", type=int, default=1)
    sim.add_argument("--out", default="out")
    sim.add_argument("--spectrum", action="store_true", help="also record bulk eigenvalues")
    sim.add_argument("--eig-csv", action="store_true", help="stream eigenvalues as CSV, one per line")
    sim.add_argument("--jobs", type=int, default=None)
    sim.set_defaults(func=cmd_simulate)

    ts = sub.add_parser("theory-spectrum", help="deterministic bulk density on a grid")
    ts.add_argument("config")
    ts.add_argument("--grid", required=True, help="min:max:points")
    ts.add_argument("--out", default="out")
    ts.add_argument("--cache", default=None, help="fixed-point cache path (JSONL)")
    ts.set_defaults(func=cmd_theory_spectrum)

    tg = sub.add_parser("theory-generror", help="asymptotic test error (optionally over an alpha sweep)")
    tg.add_argument("config")
    tg.add_argument("--alpha-sweep", default=None, help="start:stop:count")
    tg.add_argument("--out", default="out")
    tg.set_defaults(func=cmd_theory_generror)

    cp = sub.add_parser("compare", help="simulation vs theory with pass/fail tolerances")
    cp.add_argument("config")
    cp.add_argument("--seeds", type=int, default=3)
    cp.add_argument("--out", default="out")
    cp.add_argument("--grid", default=None, help="density grid min:max:points (default: auto from eigenvalues)")
    cp.add_argument("--tol-ks", type=float, default=DEFAULT_KS_TOL)
    cp.add_argument("--tol-generror", type=float, default=DEFAULT_GENERROR_TOL)
    cp.add_argument("--jobs", type=int, default=None)
    cp.set_defaults(func=cmd_compare)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())

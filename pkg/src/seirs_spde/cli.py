"""Command line entry point: ``seirs-spde <mode> --config FILE``.

Every run writes its CSV outputs plus ``manifest.json`` into the output
directory (``--out``, else ``$SEIRS_SPDE_OUT``, else ``run.output``).
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import FUNCTIONALS, check_mass_bound, run_ensemble
from .config import MODES, ConfigError, RunConfig, parse_config, replace_run
from .integrator import (ContractionError, DivergenceError, PicardConfig, SchemeConfig,
                         convergence_study, integrate_batch, picard_solve, simulate_path)
from .model import COMPARTMENTS, compute_thresholds
from .noise import BrownianDriver, RngStream
from .spectral import build_basis

log = logging.getLogger("seirs_spde")

OUT_ENV = "SEIRS_SPDE_OUT"

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGENCE = 3
EXIT_CONTRACTION = 4
EXIT_ALL_ABORTED = 5

TRAJECTORY_COLUMNS = (["t"] + [f"{c}_{s}" for c in COMPARTMENTS for s in ("min", "max", "mean")]
                      + list(FUNCTIONALS) + ["clamped_fraction", "clamped_mass"])
ENSEMBLE_COLUMNS = (["t"] + [f"{f}_{s}" for f in FUNCTIONALS for s in ("mean", "se", "lo", "hi")]
                    + ["permanence_stat", "permanence_running_avg", "clamped_fraction_mean",
                       "mass_envelope", "mass_printed_bound"])
CONVERGENCE_COLUMNS = ["kind", "level", "error", "standard_error"]
PICARD_COLUMNS = ["iteration", "sup_difference", "ratio"]
SUMMARY_COLUMNS = ["quantity", "value"]
THRESHOLD_COLUMNS = SUMMARY_COLUMNS


def fmt(value) -> str:
    """Floats to 15 significant digits (exact for any decimal input of that length)."""
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return format(float(value), ".15g")
    return str(value)


def write_csv(path: Path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) for v in row])
    return path


def _trajectory_rows(traj, grid):
    for k, t in enumerate(traj.times):
        s = traj.states[k]
        row = [t]
        for j in range(4):
            row += [s[j].min(), s[j].max(), grid.integrate(s[j])]
        row += [float(fn(s, grid)) for fn in FUNCTIONALS.values()]
        row += [traj.clamped_fraction[k], traj.clamped_mass[k]]
        yield row


def run_simulate(cfg: RunConfig, out: Path, summary: dict, threads=None):
    coeffs = cfg.coefficient_set()
    try:
        traj = simulate_path(cfg.initial_state(), coeffs, cfg.noise_spec(), cfg.scheme_config(),
                             RngStream(cfg.run.seed, 0))
    except DivergenceError as err:
        partial = getattr(err, "partial", None)
        if partial is not None:
            write_csv(out / "trajectory.csv", TRAJECTORY_COLUMNS, _trajectory_rows(partial, coeffs.grid))
        raise
    summary["records"] = len(traj.times)
    return [write_csv(out / "trajectory.csv", TRAJECTORY_COLUMNS, _trajectory_rows(traj, coeffs.grid))]


def run_ensemble_mode(cfg: RunConfig, out: Path, summary: dict, threads=None):
    coeffs = cfg.coefficient_set()
    e = cfg.ensemble
    res = run_ensemble(cfg.initial_state(), coeffs, cfg.noise_spec(), cfg.scheme_config(),
                       cfg.run.paths, cfg.run.seed, threads=threads, batch_size=e.batch_size,
                       floor=e.floor, fit_window=e.fit_window, plateau_rtol=e.plateau_rtol)
    st = res.stats
    mb = check_mass_bound(st.times, st.mean["total_mass"], coeffs, st.se["total_mass"])
    nan = np.full(len(st.times), np.nan)
    env = nan if mb.skipped else mb.envelope
    printed = nan if mb.skipped else mb.printed_bound

    def rows():
        for r, t in enumerate(st.times):
            row = [t]
            for f in FUNCTIONALS:
                row += [st.mean[f][r], st.se[f][r], st.lo[f][r], st.hi[f][r]]
            row += [res.permanence_stat[r], res.permanence_avg[r], res.clamped_fraction[r],
                    env[r], printed[r]]
            yield row

    verdict_rows = res.summary_rows() + [
        ("mass_bound_skipped", int(mb.skipped)),
        ("mass_bound_holds", int(mb.holds)),
        ("printed_mass_bound_holds", int(mb.printed_holds)),
    ]
    summary.update({k: v for k, v in verdict_rows})
    if res.mismatch:
        print(f"WARNING: predicted regime {res.thresholds.predicted_regime} "
              f"but observed {res.verdict}", file=sys.stderr)
    files = [write_csv(out / "ensemble_stats.csv", ENSEMBLE_COLUMNS, rows()),
             write_csv(out / "verdict.csv", THRESHOLD_COLUMNS, verdict_rows)]
    return files


def run_thresholds(cfg: RunConfig, out: Path, summary: dict, threads=None):
    report = compute_thresholds(cfg.coefficient_set(), cfg.noise_spec())
    summary.update(dict(report.rows()))
    return [write_csv(out / "thresholds.csv", THRESHOLD_COLUMNS, report.rows())]


def run_convergence(cfg: RunConfig, out: Path, summary: dict, threads=None):
    c = cfg.convergence
    table = convergence_study(cfg.initial_state(), cfg.coefficient_set(), cfg.noise_spec(),
                              kind=c.kind, levels=c.levels, T=c.time, paths=c.paths,
                              seed=cfg.run.seed, dt=c.dt, clamp_policy=cfg.scheme.clamp)
    summary["observed_order"] = table.observed_order
    rows = [(table.kind, lv, e, s) for lv, e, s in table.rows()]
    return [write_csv(out / "convergence.csv", CONVERGENCE_COLUMNS, rows)]


def _picard_rows(differences, ratios):
    return [(m, d, ratios[m - 1] if m > 0 else np.nan) for m, d in enumerate(differences)]


def run_picard(cfg: RunConfig, out: Path, summary: dict, threads=None):
    p = cfg.picard
    pc = PicardConfig(p.horizon, p.substeps, p.max_iter, p.tol)
    ratio = pc.dt / p.reference_dt
    if abs(ratio - round(ratio)) > 1e-9:
        raise ConfigError("picard.reference_dt", "horizon/substeps must be a multiple of reference_dt")
    r = int(round(ratio))
    coeffs, noise, v0 = cfg.coefficient_set(), cfg.noise_spec(), cfg.initial_state()
    basis = build_basis(coeffs.grid, max(noise.n, 1))
    stream = RngStream(cfg.run.seed, 0)
    driver = BrownianDriver([stream], noise, p.reference_dt)
    dB = np.array([driver.increments(k)[0] for k in range(p.substeps * r)])
    dB = dB.reshape((p.substeps, r) + dB.shape[1:])
    try:
        res = picard_solve(v0, coeffs, noise, dB, pc, basis)
    except ContractionError as err:
        write_csv(out / "picard.csv", PICARD_COLUMNS, _picard_rows(err.differences, err.ratios))
        raise
    rows = _picard_rows(res.differences, res.ratios)

    fine = SchemeConfig(p.reference_dt, p.horizon, record_every=r)
    snaps = []
    integrate_batch(v0, coeffs, noise, fine, [stream], basis,
                    on_record=lambda k, t, s, f, m: snaps.append(s[0].copy()))
    info = [("converged", int(res.converged)), ("iterations", res.iterations),
            ("max_ratio", max(res.ratios, default=np.nan)), ("reference_dt", p.reference_dt),
            ("reference_sup_error", float(np.abs(np.array(snaps) - res.solution).max()))]
    summary.update(dict(info))
    return [write_csv(out / "picard.csv", PICARD_COLUMNS, rows),
            write_csv(out / "picard_summary.csv", SUMMARY_COLUMNS, info)]


RUNNERS = {
    "simulate": run_simulate,
    "ensemble": run_ensemble_mode,
    "thresholds": run_thresholds,
    "convergence": run_convergence,
    "picard": run_picard,
}


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def execute(cfg: RunConfig, out: Path, threads=None) -> int:
    """Run ``cfg`` writing into ``out``; returns the exit status."""
    out.mkdir(parents=True, exist_ok=True)
    started = time.time()
    summary, status, error = {}, EXIT_OK, None
    files = []
    try:
        files = RUNNERS[cfg.run.mode](cfg, out, summary, threads)
    except DivergenceError as err:
        status, error = EXIT_DIVERGENCE, str(err)
    except ContractionError as err:
        status, error = EXIT_CONTRACTION, str(err)
    except RuntimeError as err:
        if "aborted" not in str(err):
            raise
        status, error = EXIT_ALL_ABORTED, str(err)
    written = sorted(p.name for p in out.glob("*.csv"))
    manifest = {
        "artifact": "seirs-spde",
        "version": __version__,
        "mode": cfg.run.mode,
        "seed": cfg.run.seed,
        "config": cfg.to_dict(),
        "wall_clock_seconds": time.time() - started,
        "exit_status": status,
        "error": error,
        "summary": {k: (v.item() if isinstance(v, np.generic) else v) for k, v in summary.items()},
        "outputs": {name: _sha256(out / name) for name in written},
    }
    with open(out / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, allow_nan=True)
        fh.write("\n")
    if error:
        print(f"error: {error}", file=sys.stderr)
    return status


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="seirs-spde",
                                 description="Stochastic SEIRS reaction-diffusion simulator")
    ap.add_argument("mode", choices=MODES)
    ap.add_argument("--config", required=True, help="YAML run configuration")
    ap.add_argument("--out", help=f"output directory (default: ${OUT_ENV} or run.output)")
    ap.add_argument("--threads", type=int, default=os.cpu_count() or 1,
                    help="worker threads for ensemble path blocks")
    ap.add_argument("--seed", type=int, help="override run.seed (unsigned 64-bit)")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = parse_config(Path(args.config).read_text(encoding="utf-8"))
        changes = {"mode": args.mode}
        if args.seed is not None:
            if not 0 <= args.seed < 2 ** 64:
                raise ConfigError("--seed", "must fit in an unsigned 64-bit integer")
            changes["seed"] = args.seed
        cfg = replace_run(cfg, **changes)
        out = Path(args.out or os.environ.get(OUT_ENV) or cfg.run.output)
        if args.threads < 1:
            raise ConfigError("--threads", "must be >= 1")
    except (ConfigError, OSError) as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        status = execute(cfg, out, args.threads)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    for name in sorted(p.name for p in out.glob("*.csv")):
        print(out / name)
    return status


if __name__ == "__main__":
    sys.exit(main())

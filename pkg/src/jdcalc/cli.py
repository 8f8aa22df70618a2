"""Batch experiment runner behind the ``jdcalc`` command.

``jdcalc run <config>`` executes one named verification suite from a flat
``key = value`` config file and writes two CSV files into the output
directory: ``report.csv`` (one row per seed / resolution / preset) and
``summary.csv`` (aggregates and the verdict).  All floats are rendered with
17 significant digits and rows are assembled in a fixed order, so repeated
runs (at any worker count) produce byte-identical files.

Exit codes: 0 all thresholds met, 1 threshold violation, 2 configuration
error, 3 numerical failure.  The worker count for seed fan-out comes from
the ``JDCALC_WORKERS`` environment variable (default 1).
"""

from __future__ import annotations

import argparse
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import invariantkernel, itowentzell, mollifier
from .errors import ConfigurationError, JdcalcError, NumericalError
from .fields import catalog_lookup, catalog_names, kernel_preset_names
from .invariantkernel import (gaussian_density_grid, run_density,
                              sample_truncated_gaussian, stable_time_grid,
                              verify_duality, write_density_csv, TEST_FUNCTIONS)
from .noise import TimeGrid, refine_wiener, sample_jumps, sample_wiener

SUITES = {
    "iw-verify": "per-seed residual of the composite-differential identity",
    "iw-converge": "residual decay across nested grids (fitted log2 slope)",
    "ito-classic": "reduction to a closed-form oracle plus strong-order decay",
    "kernel-mass": "mass conservation of the density solver over a full run",
    "kernel-duality": "grid quadrature vs particle average on common noise",
    "mollifier-bound": "Gaussian smoothing error against the Lipschitz bound",
}

SLOPE_THRESHOLD = 0.4
DUALITY_GAP_THRESHOLD = 0.05
MASS_THRESHOLD = invariantkernel.MASS_TOLERANCE
STEP_DRIFT_THRESHOLD = 1e-14
JUMP_FLOOR = itowentzell.JUMP_EXACT_FLOOR
MOLLIFIER_SLOPE_BAND = (0.85, 1.15)

MOLLIFIER_FUNCTIONS = {
    # name -> (callable, declared Lipschitz constant, true description)
    "abs-lipschitz": (np.abs, 1.0, "f(y) = |y|, Lipschitz with L = 1"),
    "sqrt-negative-control": (lambda y: np.sqrt(np.abs(y)), 1.0,
                              "f(y) = sqrt|y|: not Lipschitz; the bound must fail"),
}


@dataclass
class ExperimentConfig:
    suite: str
    output_dir: str
    preset: str = ""
    t_end: float = 1.0
    n_steps: int = 64
    n_list: tuple = (64, 128, 256, 512, 1024, 2048, 4096)
    seeds: int = 64
    base_seed: int = 0
    n_cells: int = 1024
    particles: int = 10000
    levels: int = 2
    f_test: str = "square"
    epsilons: tuple = (0.1, 0.01, 0.001)
    function: str = "abs-lipschitz"
    grid_points: int = 1001
    grid_halfwidth: float = 1.0
    mollifier_nodes: int = 64
    density_times: tuple = ()


def _parse_int_list(s):
    return tuple(int(v) for v in s.split(",") if v.strip())


def _parse_float_list(s):
    return tuple(float(v) for v in s.split(",") if v.strip())


_PARSERS = {
    "suite": str, "output_dir": str, "preset": str, "f_test": str, "function": str,
    "t_end": float, "grid_halfwidth": float,
    "n_steps": int, "seeds": int, "base_seed": int, "n_cells": int,
    "particles": int, "levels": int, "grid_points": int, "mollifier_nodes": int,
    "n_list": _parse_int_list, "epsilons": _parse_float_list,
    "density_times": _parse_float_list,
}


def parse_config(path) -> ExperimentConfig:
    """Read a flat ``key = value`` file (lines starting with # are comments)."""
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"config file {path} does not exist")
    values = {}
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigurationError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, _, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if key not in _PARSERS:
            raise ConfigurationError(f"{path}:{lineno}: unknown key {key!r}")
        try:
            values[key] = _PARSERS[key](val)
        except ValueError as exc:
            raise ConfigurationError(f"{path}:{lineno}: bad value for {key}: {exc}") from None
    if "suite" not in values:
        raise ConfigurationError(f"{path}: missing required key 'suite'")
    if "output_dir" not in values:
        raise ConfigurationError(f"{path}: missing required key 'output_dir'")
    cfg = ExperimentConfig(**values)
    _validate_config(cfg)
    return cfg


def _validate_config(cfg: ExperimentConfig):
    if cfg.suite not in SUITES:
        raise ConfigurationError(
            f"unknown suite {cfg.suite!r}; available: {', '.join(sorted(SUITES))}")
    for name in ("t_end", "n_steps", "seeds", "n_cells", "particles", "levels",
                 "grid_points", "grid_halfwidth", "mollifier_nodes"):
        if getattr(cfg, name) <= 0:
            raise ConfigurationError(f"{name} must be positive")
    if cfg.base_seed < 0:
        raise ConfigurationError("base_seed must be non-negative")
    if any(e <= 0 for e in cfg.epsilons):
        raise ConfigurationError("epsilons must be positive")
    needs_preset = cfg.suite in ("iw-verify", "iw-converge", "ito-classic",
                                 "kernel-duality")
    if needs_preset:
        if not cfg.preset:
            raise ConfigurationError(f"suite {cfg.suite!r} requires a preset")
        catalog_lookup(cfg.preset)
    if cfg.suite == "kernel-mass" and cfg.preset and cfg.preset != "all-kernel":
        catalog_lookup(cfg.preset)
    if cfg.suite == "mollifier-bound" and cfg.function not in MOLLIFIER_FUNCTIONS:
        raise ConfigurationError(
            f"unknown mollifier function {cfg.function!r}; "
            f"available: {', '.join(sorted(MOLLIFIER_FUNCTIONS))}")
    if cfg.suite == "kernel-duality" and cfg.f_test not in TEST_FUNCTIONS:
        raise ConfigurationError(
            f"unknown f_test {cfg.f_test!r}; available: {', '.join(sorted(TEST_FUNCTIONS))}")


@dataclass
class VerificationReport:
    suite: str
    preset: str
    columns: List[str]
    rows: List[dict]
    summary_columns: List[str]
    summary_rows: List[dict]
    verdict: bool
    wall_time: float = 0.0

    @property
    def exit_code(self) -> int:
        return 0 if self.verdict else 1


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.17g}"
    return str(v)


def _write_csv(path: Path, columns, rows):
    with open(path, "w", newline="") as fh:
        fh.write(",".join(columns) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(row[c]) for c in columns) + "\n")


def _worker_count() -> int:
    raw = os.environ.get("JDCALC_WORKERS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigurationError(f"JDCALC_WORKERS must be an integer, got {raw!r}")
    return max(1, n)


def _parallel_map(fn, items):
    """Order-preserving map over a worker pool; worker count never affects
    the result, only the wall time."""
    items = list(items)
    workers = _worker_count()
    if workers == 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ProcessPoolExecutor(max_workers=min(workers, len(items))) as pool:
        return list(pool.map(fn, items))


# --------------------------------------------------------------------------
# per-seed worker tasks (module level so they pickle under process pools)
# --------------------------------------------------------------------------

def _task_verify(args):
    preset_name, t_end, n_steps, seed = args
    preset = catalog_lookup(preset_name)
    rep = itowentzell.verify_identity(preset, TimeGrid(t_end, n_steps), seed)
    return {"seed": seed, "n_steps": n_steps, "n_events": rep.n_events,
            "residual": rep.residual, "rhs_total": rep.rhs_total,
            "direct_delta": rep.direct_delta}


def _task_ladder(args):
    preset_name, t_end, n_list, seed = args
    preset = catalog_lookup(preset_name)
    return itowentzell.residual_ladder(preset, n_list, seed, t_end)


def _task_classic(args):
    preset_name, t_end, n_list, seed = args
    preset = catalog_lookup(preset_name)
    return itowentzell.classic_ladder(preset, n_list, seed, t_end)


def _task_mass(args):
    preset_name, t_end, n_cells, seed, density_times = args
    preset = catalog_lookup(preset_name)
    grid = stable_time_grid(preset, n_cells, t_end)
    wiener = sample_wiener(grid, preset.coeffs.dim_w, seed)
    jumps = sample_jumps(grid, preset.mark_measure, seed)
    mean, std = preset.rho0
    density = gaussian_density_grid(*preset.box, n_cells, mean, std)
    final, trace, snaps = run_density(preset, density, grid, wiener, jumps,
                                      snapshot_times=list(density_times))
    row = {"preset": preset_name, "n_cells": n_cells, "n_steps": grid.n_steps,
           "n_events": len(jumps), "max_mass_error": trace.max_mass_error,
           "max_step_drift": trace.max_step_drift, "max_clip": trace.max_clip,
           "max_jump_defect": max(trace.jump_defects, default=0.0),
           "boundary_ratio": trace.boundary_ratio}
    return row, snaps


# --------------------------------------------------------------------------
# suites
# --------------------------------------------------------------------------

def _run_iw_verify(cfg: ExperimentConfig) -> VerificationReport:
    preset = catalog_lookup(cfg.preset)
    seeds = [cfg.base_seed + i for i in range(cfg.seeds)]
    rows = _parallel_map(_task_verify,
                         [(cfg.preset, cfg.t_end, cfg.n_steps, s) for s in seeds])
    res = np.array([r["residual"] for r in rows])
    exact_regime = preset.jump_only or preset.name == "zero"
    threshold = JUMP_FLOOR if exact_regime else float("inf")
    verdict = bool(np.all(np.isfinite(res)) and res.max() <= threshold)
    summary = [{"preset": cfg.preset, "seeds": cfg.seeds, "n_steps": cfg.n_steps,
                "mean_residual": res.mean(), "max_residual": res.max(),
                "stderr_residual": res.std(ddof=1) / np.sqrt(len(res)) if len(res) > 1 else 0.0,
                "threshold": threshold, "verdict": verdict}]
    return VerificationReport(
        cfg.suite, cfg.preset,
        ["seed", "n_steps", "n_events", "residual", "rhs_total", "direct_delta"], rows,
        list(summary[0]), summary, verdict)


def _run_iw_converge(cfg: ExperimentConfig) -> VerificationReport:
    catalog_lookup(cfg.preset)
    seeds = [cfg.base_seed + i for i in range(cfg.seeds)]
    ladders = np.array(_parallel_map(
        _task_ladder, [(cfg.preset, cfg.t_end, cfg.n_list, s) for s in seeds]))
    rows = [{"seed": s, "n_steps": n, "residual": ladders[i, j]}
            for i, s in enumerate(seeds) for j, n in enumerate(cfg.n_list)]
    means = ladders.mean(axis=0)
    stderr = (ladders.std(axis=0, ddof=1) / np.sqrt(len(seeds))
              if len(seeds) > 1 else np.zeros_like(means))
    exact = bool(np.all(means <= JUMP_FLOOR))
    if exact:
        slope, verdict = float("inf"), True
    else:
        slope = float(-np.polyfit(np.log2(cfg.n_list),
                                  np.log2(np.maximum(means, 1e-300)), 1)[0])
        verdict = slope >= SLOPE_THRESHOLD and means[-1] < means[0]
    summary = [{"n_steps": n, "mean_residual": m, "stderr": se,
                "slope": "exact" if exact else slope,
                "slope_threshold": SLOPE_THRESHOLD, "verdict": verdict}
               for n, m, se in zip(cfg.n_list, means, stderr)]
    return VerificationReport(
        cfg.suite, cfg.preset, ["seed", "n_steps", "residual"], rows,
        ["n_steps", "mean_residual", "stderr", "slope", "slope_threshold", "verdict"],
        summary, verdict)


def _run_ito_classic(cfg: ExperimentConfig) -> VerificationReport:
    preset = catalog_lookup(cfg.preset)
    if preset.state_oracle is None:
        raise ConfigurationError(
            f"suite ito-classic needs a preset with a closed-form oracle; "
            f"{preset.name!r} has none")
    seeds = [cfg.base_seed + i for i in range(cfg.seeds)]
    data = _parallel_map(_task_classic,
                         [(cfg.preset, cfg.t_end, cfg.n_list, s) for s in seeds])
    rows = [{"seed": s, "n_steps": lv[0], "match_err": lv[1],
             "residual": lv[2], "strong_err": lv[3]}
            for s, ladder in zip(seeds, data) for lv in ladder]
    arr = np.array([[lv[1:] for lv in ladder] for ladder in data])  # (S, L, 3)
    mean_match = arr[:, :, 0].mean(axis=0)
    mean_resid = arr[:, :, 1].mean(axis=0)
    mean_strong = arr[:, :, 2].mean(axis=0)
    slope = float(-np.polyfit(np.log2(cfg.n_list),
                              np.log2(np.maximum(mean_resid, 1e-300)), 1)[0])
    match_ok = bool(np.all(mean_match <= 3.0 * mean_strong))
    verdict = match_ok and slope >= SLOPE_THRESHOLD
    summary = [{"n_steps": n, "mean_match_err": mm, "mean_residual": mr,
                "mean_strong_err": ms, "slope": slope,
                "slope_threshold": SLOPE_THRESHOLD, "verdict": verdict}
               for n, mm, mr, ms in zip(cfg.n_list, mean_match, mean_resid, mean_strong)]
    return VerificationReport(
        cfg.suite, cfg.preset,
        ["seed", "n_steps", "match_err", "residual", "strong_err"], rows,
        ["n_steps", "mean_match_err", "mean_residual", "mean_strong_err",
         "slope", "slope_threshold", "verdict"], summary, verdict)


def _run_kernel_mass(cfg: ExperimentConfig, outdir: Path) -> VerificationReport:
    names = kernel_preset_names() if cfg.preset in ("", "all-kernel") else [cfg.preset]
    for name in names:
        if not catalog_lookup(name).kernel_ok:
            raise ConfigurationError(f"preset {name!r} is not flagged for kernel runs")
    results = _parallel_map(
        _task_mass, [(n, cfg.t_end, cfg.n_cells, cfg.base_seed, cfg.density_times)
                     for n in names])
    rows = [row for row, _ in results]
    for (row, snaps) in results:
        for t_req, dens in snaps:
            write_density_csv(dens, outdir / f"density_{row['preset']}_t{_fmt(float(t_req))}.csv")
    verdict = all(r["max_mass_error"] <= MASS_THRESHOLD
                  and r["max_step_drift"] <= STEP_DRIFT_THRESHOLD for r in rows)
    summary = [{"preset": r["preset"], "max_mass_error": r["max_mass_error"],
                "mass_threshold": MASS_THRESHOLD,
                "max_step_drift": r["max_step_drift"],
                "drift_threshold": STEP_DRIFT_THRESHOLD,
                "verdict": (r["max_mass_error"] <= MASS_THRESHOLD
                            and r["max_step_drift"] <= STEP_DRIFT_THRESHOLD)}
               for r in rows]
    return VerificationReport(
        cfg.suite, cfg.preset or "all-kernel",
        ["preset", "n_cells", "n_steps", "n_events", "max_mass_error",
         "max_step_drift", "max_clip", "max_jump_defect", "boundary_ratio"], rows,
        ["preset", "max_mass_error", "mass_threshold", "max_step_drift",
         "drift_threshold", "verdict"], summary, verdict)


def _run_kernel_duality(cfg: ExperimentConfig) -> VerificationReport:
    preset = catalog_lookup(cfg.preset)
    if not preset.kernel_ok:
        raise ConfigurationError(f"preset {cfg.preset!r} is not flagged for kernel runs")
    rows = []
    wiener = None
    jumps = None
    grid = None
    for level in range(cfg.levels):
        cells = cfg.n_cells * (2 ** level)
        parts = cfg.particles * (4 ** level)
        lgrid = stable_time_grid(preset, cells, cfg.t_end)
        if wiener is None:
            grid = lgrid
            wiener = sample_wiener(grid, preset.coeffs.dim_w, cfg.base_seed)
            jumps = sample_jumps(grid, preset.mark_measure, cfg.base_seed)
        elif lgrid.n_steps > grid.n_steps:
            factor = lgrid.n_steps // grid.n_steps
            wiener = refine_wiener(wiener, factor, cfg.base_seed, lane=level)
            grid = wiener.grid
        rep = verify_duality(preset, None, cfg.f_test, grid, parts,
                             cfg.base_seed, cells, wiener=wiener, jumps=jumps)
        rows.append({"level": level, "n_cells": cells, "particles": parts,
                     "n_steps": grid.n_steps, "lhs": rep.lhs, "rhs": rep.rhs,
                     "rel_gap": rep.rel_gap, "mc_stderr": rep.mc_stderr,
                     "mass_error": rep.mass_error})
    gaps = [r["rel_gap"] for r in rows]
    verdict = gaps[0] <= DUALITY_GAP_THRESHOLD and all(
        b < a for a, b in zip(gaps, gaps[1:]))
    summary = [{"preset": cfg.preset, "f_test": cfg.f_test,
                "first_gap": gaps[0], "last_gap": gaps[-1],
                "gap_threshold": DUALITY_GAP_THRESHOLD,
                "gaps_decreasing": all(b < a for a, b in zip(gaps, gaps[1:])),
                "verdict": verdict}]
    return VerificationReport(
        cfg.suite, cfg.preset,
        ["level", "n_cells", "particles", "n_steps", "lhs", "rhs",
         "rel_gap", "mc_stderr", "mass_error"], rows,
        list(summary[0]), summary, verdict)


def _run_mollifier_bound(cfg: ExperimentConfig) -> VerificationReport:
    fn, lipschitz, _ = MOLLIFIER_FUNCTIONS[cfg.function]
    grid = np.linspace(-cfg.grid_halfwidth, cfg.grid_halfwidth, cfg.grid_points)
    reports, slope = mollifier.bound_study(fn, lipschitz, cfg.epsilons, grid,
                                           nodes=cfg.mollifier_nodes)
    rows = [{"epsilon": r.epsilon, "sup_error": r.sup_error, "bound": r.bound,
             "worst_x": r.worst_x, "within": bool(r.within)} for r in reports]
    all_within = all(r.within for r in reports)
    slope_ok = MOLLIFIER_SLOPE_BAND[0] <= slope <= MOLLIFIER_SLOPE_BAND[1]
    verdict = all_within and slope_ok
    summary = [{"function": cfg.function, "all_within": all_within,
                "slope": slope, "slope_lo": MOLLIFIER_SLOPE_BAND[0],
                "slope_hi": MOLLIFIER_SLOPE_BAND[1], "verdict": verdict}]
    return VerificationReport(
        cfg.suite, cfg.function,
        ["epsilon", "sup_error", "bound", "worst_x", "within"], rows,
        list(summary[0]), summary, verdict)


def run(cfg: ExperimentConfig) -> VerificationReport:
    """Execute a suite, write report.csv / summary.csv, return the report."""
    outdir = Path(cfg.output_dir)
    outdir.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    if cfg.suite == "iw-verify":
        report = _run_iw_verify(cfg)
    elif cfg.suite == "iw-converge":
        report = _run_iw_converge(cfg)
    elif cfg.suite == "ito-classic":
        report = _run_ito_classic(cfg)
    elif cfg.suite == "kernel-mass":
        report = _run_kernel_mass(cfg, outdir)
    elif cfg.suite == "kernel-duality":
        report = _run_kernel_duality(cfg)
    elif cfg.suite == "mollifier-bound":
        report = _run_mollifier_bound(cfg)
    else:  # unreachable after validation
        raise ConfigurationError(f"unknown suite {cfg.suite!r}")
    report.wall_time = time.perf_counter() - start
    _write_csv(outdir / "report.csv", report.columns, report.rows)
    _write_csv(outdir / "summary.csv", report.summary_columns, report.summary_rows)
    return report


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="jdcalc",
        description="batch verification suites for jump-diffusion calculus")
    sub = parser.add_subparsers(dest="command", required=True)
    run_p = sub.add_parser("run", help="execute a suite from a config file")
    run_p.add_argument("config", help="path to a flat key = value config")
    sub.add_parser("list-presets", help="show the preset catalog")
    sub.add_parser("list-suites", help="show available suites")
    args = parser.parse_args(argv)

    if args.command == "list-presets":
        for name in catalog_names():
            p = catalog_lookup(name)
            tags = []
            if p.kernel_ok:
                tags.append("kernel")
            if p.jump_only:
                tags.append("jump-only")
            if p.state_oracle is not None:
                tags.append("oracle")
            suffix = f"  [{', '.join(tags)}]" if tags else ""
            print(f"{name:22s} {p.description}{suffix}")
        return 0
    if args.command == "list-suites":
        for name, desc in sorted(SUITES.items()):
            print(f"{name:18s} {desc}")
        return 0

    try:
        cfg = parse_config(args.config)
        report = run(cfg)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except JdcalcError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    status = "PASS" if report.verdict else "FAIL"
    print(f"{status} suite={report.suite} preset={report.preset} "
          f"rows={len(report.rows)} wall={report.wall_time:.2f}s")
    return report.exit_code


def entry():
    raise SystemExit(main())


if __name__ == "__main__":
    entry()

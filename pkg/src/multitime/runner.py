"""Scenario orchestration, on-disk artifacts and the run manifest.

A run directory holds ``manifest.json``, ``residuals.tsv`` (one row per
report, every number also present in the manifest), state snapshots as
``state_*.tsv`` and expectation series under ``series/<name>.json``.
"""
from __future__ import annotations

import datetime as _dt
import json
import logging
import os
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import __version__
from .config import CheckSpec, ConfigError, ScenarioConfig, build_initial_state, build_model, load_config
from .evolution import PropagationError, multi_time_evaluate
from .krylov import KrylovConvergenceError
from .verification import (
    QuadratureError,
    QuadratureSpec,
    ResidualReport,
    consistency_residual,
    ehrenfest_convergence,
    ehrenfest_residual,
    field_expectation_series,
    lightcone_leakage,
    multitime_pde_residual_grid,
    refine_sweep,
    uniqueness_crosscheck,
)

log = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = "MULTITIME_OUTPUT_ROOT"

EXIT_OK, EXIT_CHECK_FAILED, EXIT_CONFIG, EXIT_NUMERICAL = 0, 1, 2, 3


def resolve_output_dir(cfg: ScenarioConfig, root_override: str | None = None) -> Path:
    """Command-line root beats the environment variable, which beats ``output.root``."""
    root = root_override or os.environ.get(OUTPUT_ROOT_ENV) or cfg.output.root
    d = Path(cfg.output.directory)
    if root is None:
        return d
    return Path(root) / (d.name if d.is_absolute() else d)


class _Timer:
    def __init__(self):
        self.phases: dict = {}

    @contextmanager
    def phase(self, name):
        t0 = time.perf_counter()
        try:
            yield
        finally:
            self.phases[name] = self.phases.get(name, 0.0) + time.perf_counter() - t0


# -- serialisation ------------------------------------------------------------


def write_state_snapshot(path: Path, state) -> None:
    """Amplitudes as text: one row per flat index with real and imaginary parts."""
    flat = state.amplitudes.ravel()
    with open(path, "w") as fh:
        fh.write(f"# times={list(state.times)} shape={list(state.amplitudes.shape)}\n")
        fh.write("# index\treal\timag\n")
        for i, v in enumerate(flat):
            fh.write(f"{i}\t{float(v.real)!r}\t{float(v.imag)!r}\n")


def write_series(run_dir: Path, name: str, t, x, values, units: str, params: dict) -> None:
    sdir = run_dir / "series"
    sdir.mkdir(parents=True, exist_ok=True)
    doc = {"name": name, "units": units, "params": params, "t": [float(v) for v in t],
           "x": [float(v) for v in x], "values": [[float(v) for v in row] for row in np.asarray(values)]}
    (sdir / f"{name}.json").write_text(json.dumps(doc))


def export_expectation_series(run_dir, observable: str, out_path=None) -> Path:
    """Tab-separated ``t  x  value`` rows, t-major then x, under a ``#`` header."""
    run_dir = Path(run_dir)
    src = run_dir / "series" / f"{observable}.json"
    if not src.exists():
        available = sorted(p.stem for p in (run_dir / "series").glob("*.json")) if (run_dir / "series").exists() else []
        raise FileNotFoundError(f"run has no series '{observable}' (available: {available})")
    doc = json.loads(src.read_text())
    out = Path(out_path) if out_path is not None else run_dir / f"{observable}.tsv"
    params = " ".join(f"{k}={v}" for k, v in sorted(doc["params"].items()))
    with open(out, "w") as fh:
        fh.write(f"# observable={doc['name']} units={doc['units']} {params}\n")
        fh.write("# t\tx\tvalue\n")
        for t, row in zip(doc["t"], doc["values"]):
            for x, v in zip(doc["x"], row):
                fh.write(f"{t!r}\t{x!r}\t{v!r}\n")
    return out


def read_series_table(path) -> dict:
    """Parse an exported table back into ``{'t', 'x', 'values'}`` arrays."""
    data = np.loadtxt(path, comments="#", delimiter="\t", ndmin=2)
    t = np.unique(data[:, 0])
    x = data[: len(data) // len(t), 1]
    return {"t": t, "x": x, "values": data[:, 2].reshape(len(t), len(x))}


def write_residual_table(path: Path, reports) -> None:
    with open(path, "w") as fh:
        fh.write("# name\tresidual\ttolerance\tpass\tconvergence_slope\n")
        for r in reports:
            slope = "" if r.convergence_slope is None else repr(float(r.convergence_slope))
            fh.write(f"{r.name}\t{r.residual!r}\t{r.tolerance!r}\t{int(r.passed)}\t{slope}\n")


# -- scenarios ------------------------------------------------------------------


def _param(check, key, default):
    extra = check.model_extra or {}
    return extra.get(key, default)


def _check_list(cfg, default_name):
    """Configured checks, or one check with default parameters."""
    return cfg.checks or [CheckSpec(name=default_name)]


def _series_to_disk(run_dir, series, model, cfg):
    params = {"n_sites": model.lattice.n_sites, "spacing": model.lattice.spacing, "coupling": model.coupling,
              "n_modes": model.grid.n_modes, "field_mass": model.grid.field_mass}
    write_series(run_dir, "phi", series["t"], series["x"], series["phi"], "field amplitude (natural units)", params)
    write_series(run_dir, "source", series["t"], series["x"], series["rhs"], "band-limited source", params)
    write_series(run_dir, "source_autocorrelation", series["t"], series["x"], series["rhs_autocorrelation"],
                 "autocorrelation source", params)


def _run_propagate(cfg, model, psi0, plan, run_dir, timer, outputs):
    reports = []
    times = cfg.time_values() or [0.0] * model.lattice.n_particles
    with timer.phase("propagate"):
        state = multi_time_evaluate(model, times, psi0, plan)
    with timer.phase("write"):
        path = run_dir / "state_final.tsv"
        write_state_snapshot(path, state)
        outputs.append(path.name)
    for check in cfg.checks:
        if check.name == "norm":
            tol = _param(check, "tolerance", 1e-9)
            reports.append(ResidualReport("norm", abs(state.norm() - psi0.norm()), tol,
                                          {"times": list(times)}))
        elif check.name == "series":
            grid = _param(check, "t_grid", None)
            if grid is None:
                raise ConfigError([f"checks.{check.name}: t_grid required"])
            t_grid = [grid["start"] + i * grid["step"] for i in range(grid["num"])]
            with timer.phase("series"):
                series = field_expectation_series(model, psi0, t_grid, plan)
            _series_to_disk(run_dir, series, model, cfg)
            outputs.extend(["series/phi.json", "series/source.json", "series/source_autocorrelation.json"])
        else:
            raise ConfigError([f"checks: unknown check '{check.name}' for scenario propagate"])
    return reports


def _run_consistency(cfg, model, psi0, plan, run_dir, timer, outputs):
    reports = []
    n = model.lattice.n_particles
    for check in _check_list(cfg, "consistency"):
        A = tuple(_param(check, "A", [0]))
        B = tuple(_param(check, "B", [j for j in range(n) if j not in A]))
        tA = float(_param(check, "t_A", 0.5))
        tB = float(_param(check, "t_B", 0.0))
        # default margin: two spacings plus a two-site buffer
        thr = float(_param(check, "margin_threshold", 4 * model.lattice.spacing))
        tol = _param(check, "tolerance", None)
        state_times = _param(check, "state_times", None)
        psi = psi0 if state_times is None else multi_time_evaluate(model, state_times, psi0, plan)
        with timer.phase("consistency"):
            reports.append(consistency_residual(model, A, B, tA, tB, psi, thr, tol))
    return reports


def _run_lightcone(cfg, model, psi0, plan, run_dir, timer, outputs):
    reports = []
    for check in _check_list(cfg, cfg.scenario):
        p = lambda k, d, c=check: _param(c, k, d)
        A = tuple(p("A", list(range(model.lattice.n_particles))))
        t = float(p("t", 8 * model.lattice.spacing))
        with timer.phase("lightcone"):
            reports.append(lightcone_leakage(model, psi0, A, t, plan, int(p("buffer_sites", 2)),
                                             float(p("tolerance", 1e-6))))
    return reports


def _run_pde(cfg, model, psi0, plan, run_dir, timer, outputs):
    reports = []
    for check in _check_list(cfg, cfg.scenario):
        p = lambda k, d, c=check: _param(c, k, d)
        times = p("times", cfg.time_values())
        if not times:
            raise ConfigError(["times: verify-pde needs evaluation times"])
        with timer.phase("pde"):
            reports.append(multitime_pde_residual_grid(
                model, psi0, times, float(p("dt", 0.04)), plan, float(p("margin_threshold", 0.0)),
                int(p("n_levels", 3)), float(p("slope_target", 2.0)), float(p("slope_band", 0.2)),
                bool(p("exclude_split_ties", True)),
            ))
    return reports


def _run_uniqueness(cfg, model, psi0, plan, run_dir, timer, outputs):
    reports = []
    for check in _check_list(cfg, cfg.scenario):
        p = lambda k, d, c=check: _param(c, k, d)
        times = p("times", cfg.time_values())
        if not times:
            raise ConfigError(["times: verify-uniqueness needs evaluation times"])
        with timer.phase("uniqueness"):
            reports.append(uniqueness_crosscheck(model, psi0, times, plan, float(p("margin_threshold", 0.0)),
                                                 p("tolerance", None)))
    return reports


def _run_ehrenfest(cfg, model, psi0, plan, run_dir, timer, outputs):
    reports = []
    for check in _check_list(cfg, cfg.scenario):
        p = lambda k, d, c=check: _param(c, k, d)
        dt = float(p("dt", 0.04))
        t_center = float(p("t_center", 0.5))
        levels = int(p("levels", 1))
        t_grid = t_center + dt * np.arange(-2, 3)
        with timer.phase("ehrenfest"):
            series = field_expectation_series(model, psi0, t_grid, plan)
            reports.append(ehrenfest_residual(model, psi0, t_grid, plan, rel_tolerance=float(p("rel_tolerance", 0.05)),
                                              series=series))
            if levels > 1:
                def build(level):
                    m = build_model(cfg, refine=level)
                    return m, build_initial_state(cfg, m)

                reports.append(ehrenfest_convergence(build, levels, dt, t_center, plan,
                                                     slope_band=float(p("slope_band", 0.3))))
        _series_to_disk(run_dir, series, model, cfg)
        outputs.extend(["series/phi.json", "series/source.json", "series/source_autocorrelation.json"])
    return reports


def _run_refine(cfg, model, psi0, plan, run_dir, timer, outputs):
    reports = []
    lat = cfg.lattice
    for check in _check_list(cfg, cfg.scenario):
        p = lambda k, d, c=check: _param(c, k, d)
        modes = p("n_modes", [4, 8, 16, 32])
        quad = QuadratureSpec() if p("quadrature", True) else None
        with timer.phase("refine-sweep"):
            rep = refine_sweep(modes, int(p("n_sites", lat.n_sites)), float(p("spacing", lat.spacing)),
                               cfg.cutoff.delta, cfg.field.field_mass, float(p("dt", 1.0)),
                               float(p("margin_threshold", 0.0)), lat.spatial_dim, float(p("noise_band", 0.1)), quad)
        reports.append(rep)
        with open(run_dir / "refine_sweep.tsv", "w") as fh:
            fh.write("# n_modes\ttail\ttail_pairs_only\n")
            for row in rep.details["rows"]:
                fh.write(f"{row['n_modes']}\t{row['tail']!r}\t{row['tail_pairs_only']!r}\n")
        outputs.append("refine_sweep.tsv")
    return reports


SCENARIO_RUNNERS = {
    "propagate": _run_propagate,
    "verify-consistency": _run_consistency,
    "verify-lightcone": _run_lightcone,
    "verify-pde": _run_pde,
    "verify-ehrenfest": _run_ehrenfest,
    "verify-uniqueness": _run_uniqueness,
    "refine-sweep": _run_refine,
}


def execute(cfg: ScenarioConfig, raw: dict, run_dir: Path) -> dict:
    """Run the scenario and write all artifacts; returns the manifest."""
    run_dir.mkdir(parents=True, exist_ok=True)
    timer = _Timer()
    outputs: list = []
    with timer.phase("setup"):
        model = build_model(cfg)
        psi0 = build_initial_state(cfg, model)
    plan = cfg.plan.build()
    reports = SCENARIO_RUNNERS[cfg.scenario](cfg, model, psi0, plan, run_dir, timer, outputs)
    write_residual_table(run_dir / "residuals.tsv", reports)
    outputs.append("residuals.tsv")
    manifest = {
        "artifact": "multitime",
        "version": __version__,
        "timestamp": _dt.datetime.now(_dt.timezone.utc).isoformat(),
        "scenario": cfg.scenario,
        "config": raw,
        "validated_config": cfg.model_dump(mode="json"),
        "seed": {"value": cfg.seed, "used_for": "random Fock fibers (numpy default_rng)"},
        "reports": [r.to_dict() for r in reports],
        "all_passed": all(r.passed for r in reports),
        "timings": timer.phases,
        "outputs": outputs,
    }
    (run_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, default=str))
    return manifest


def run_scenario(config_path, root_override: str | None = None) -> tuple[int, dict | None, str]:
    """Load, validate and run; returns ``(exit_code, manifest, message)``."""
    try:
        cfg, raw = load_config(config_path)
    except ConfigError as exc:
        return EXIT_CONFIG, None, "config error:\n  " + "\n  ".join(exc.errors)
    run_dir = resolve_output_dir(cfg, root_override)
    try:
        manifest = execute(cfg, raw, run_dir)
    except ConfigError as exc:
        return EXIT_CONFIG, None, "config error:\n  " + "\n  ".join(exc.errors)
    except (PropagationError, KrylovConvergenceError, QuadratureError, FloatingPointError) as exc:
        return EXIT_NUMERICAL, None, f"numerical failure: {exc}"
    except ValueError as exc:
        return EXIT_CONFIG, None, f"config error:\n  {exc}"
    failed = [r for r in manifest["reports"] if not r["pass"]]
    if failed:
        lines = [f"{r['name']}: residual={r['residual']:.3e} > tolerance={r['tolerance']:.3e}" for r in failed]
        return EXIT_CHECK_FAILED, manifest, "check failed:\n  " + "\n  ".join(lines)
    return EXIT_OK, manifest, f"ok: {len(manifest['reports'])} check(s) passed; artifacts in {run_dir}"


def manifest_numbers(manifest: dict) -> list:
    """Flatten every number in the report section (used by the determinism check)."""
    out = []

    def walk(v):
        if isinstance(v, bool) or v is None:
            return
        if isinstance(v, (int, float)):
            out.append(float(v))
        elif isinstance(v, dict):
            for k in sorted(v):
                walk(v[k])
        elif isinstance(v, list):
            for x in v:
                walk(x)

    walk(manifest["reports"])
    return out

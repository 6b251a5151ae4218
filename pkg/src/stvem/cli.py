"""Experiment runner: patch test, h-convergence, p-version and the 2+1D study.

Usage::

    stvem --experiment smooth-1d --p 1,2 --levels 5 --out smooth.csv
    stvem --config run.cfg --p 3

The config file holds ``key = value`` lines using the long flag names
(``ic-mode`` or ``ic_mode`` both work); ``#`` starts a comment. Flags given on
the command line override the file.

Exit codes: 0 all checks passed, 1 a check failed, 2 usage or config error,
3 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import io
import logging
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .analysis import ErrorReport, ExactSolution, compute_errors, eoc_table
from .element import PhysicalCoefficients
from .mesh import MeshError, SpaceTimeMesh, build_cartesian_1d, build_quad_2d, build_time_partition
from .problems import get_problem
from .system import IC_MODES, Discretization, SolverError, march

log = logging.getLogger("stvem")

EXPERIMENTS = ("patch", "smooth-1d", "singular", "incompatible", "pversion", "smooth-2d")
DEFAULT_LEVELS = {"patch": 4, "smooth-1d": 5, "singular": 5, "incompatible": 4, "pversion": 1, "smooth-2d": 3}
DEFAULT_P = {"patch": (1, 2, 3, 4, 5), "pversion": (1, 2, 3, 4), "smooth-2d": (1, 2)}
CSV_HEADER = ["level", "h", "hx", "ht", "ndofs", "EY", "EN", "EU", "EL", "eocY", "eocN", "eocU", "eocL"]
PATCH_TOL = 1e-8
PERTURB_2D = 0.2

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2, 3


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    experiment: str = "smooth-1d"
    p: tuple = (1,)
    levels: int | None = None
    alpha: float = 0.75
    ic_mode: str = "weak"
    quad_bump: int = 0
    out: str | None = None
    seed: int = 0
    threads: int = 1
    dim: int = field(init=False, default=1)

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"unknown experiment {self.experiment!r}; choose from {', '.join(EXPERIMENTS)}")
        if self.levels is None:
            self.levels = DEFAULT_LEVELS[self.experiment]
        if self.levels < 1:
            raise ConfigError("levels must be >= 1")
        if not self.p or min(self.p) < 1:
            raise ConfigError("p must be >= 1")
        if self.ic_mode not in IC_MODES:
            raise ConfigError(f"ic-mode must be one of {IC_MODES}")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        if self.quad_bump < 0:
            raise ConfigError("quad-bump must be >= 0")
        if self.experiment == "singular" and not self.alpha > -0.5:
            raise ConfigError("alpha must exceed -1/2")
        if self.experiment == "patch" and max(self.p) > 5:
            raise ConfigError("the patch experiment covers p = 1..5")
        self.dim = 2 if self.experiment == "smooth-2d" else 1


def parse_p(text: str) -> tuple:
    """``"2"``, ``"1,3"`` or ``"1-4"``."""
    out = []
    for part in str(text).split(","):
        part = part.strip()
        if "-" in part:
            lo, hi = part.split("-", 1)
            out.extend(range(int(lo), int(hi) + 1))
        elif part:
            out.append(int(part))
    return tuple(out)


def read_config_file(path) -> dict:
    values = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key.replace("-", "_")] = value
    return values


_CONVERTERS = {
    "experiment": str, "p": parse_p, "levels": int, "alpha": float, "ic_mode": str,
    "quad_bump": int, "out": str, "seed": int, "threads": int,
}


def config_from_mapping(values: dict) -> ExperimentConfig:
    kwargs = {}
    for key, value in values.items():
        if key not in _CONVERTERS:
            raise ConfigError(f"unknown config key {key!r}")
        try:
            kwargs[key] = _CONVERTERS[key](value)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {value!r}") from exc
    if "p" not in kwargs:
        kwargs["p"] = DEFAULT_P.get(kwargs.get("experiment", "smooth-1d"), (1,))
    return ExperimentConfig(**kwargs)


# meshes --------------------------------------------------------------------

def level_mesh(config: ExperimentConfig, level: int) -> SpaceTimeMesh:
    """Mesh of refinement ``level`` (1-based) for the configured experiment."""
    exp = config.experiment
    if exp == "smooth-2d":
        n = 8 * 2 ** (level - 1)
        sm = build_quad_2d(n, n, perturb=PERTURB_2D, seed=config.seed + level)
        slabs = math.ceil(1.0 / sm.cell_diameters.max() - 1e-12)
        return SpaceTimeMesh(sm, build_time_partition(slabs, 1.0))
    if exp in ("smooth-1d",):
        n = 10 * 2 ** (level - 1)  # h = 0.2 * 2**-level
    elif exp == "pversion":
        n = 10  # h = 0.1
    else:
        n = 20 * 2 ** (level - 1)  # h = 5e-2 / 2**(level - 1)
    return SpaceTimeMesh(build_cartesian_1d(n), build_time_partition(n, 1.0))


def problem_for(config: ExperimentConfig, p: int) -> ExactSolution:
    exp = config.experiment
    if exp == "patch":
        return get_problem(f"patch-{p}")
    if exp == "singular":
        return get_problem("singular", alpha=config.alpha)
    if exp == "pversion":
        return get_problem("smooth-1d")
    return get_problem(exp)


def run_level(config: ExperimentConfig, p: int, level: int, mesh: SpaceTimeMesh | None = None,
              coeffs: PhysicalCoefficients | None = None) -> ErrorReport:
    mesh = mesh or level_mesh(config, level)
    exact = problem_for(config, p)
    disc = Discretization(mesh, p, coeffs, quad_bump=config.quad_bump, threads=config.threads)
    sol = march(disc, exact.data(), config.ic_mode)
    report = compute_errors(disc, sol, exact, level=level)
    log.info("p=%d %s", p, report)
    return report


def run_patch(config: ExperimentConfig) -> dict:
    return {p: [run_level(config, p, i) for i in range(1, config.levels + 1)] for p in config.p}


def run_convergence(config: ExperimentConfig) -> dict:
    out = {}
    for p in config.p:
        reports = [run_level(config, p, i) for i in range(1, config.levels + 1)]
        if len(reports) >= 2:
            eoc_table(reports)
        out[p] = reports
    return out


def run_pversion(config: ExperimentConfig) -> dict:
    """Fixed mesh, increasing degree; reports are indexed by ``p`` in the level column."""
    mesh = level_mesh(config, 1)
    reports = []
    for p in config.p:
        rep = run_level(config, p, 1, mesh=mesh)
        rep.level = p
        reports.append(rep)
    return {"pversion": reports}


# checks --------------------------------------------------------------------

def expected_rates(config: ExperimentConfig, p: int) -> dict:
    """Target finest-pair EOC and tolerance per error; missing keys are not checked."""
    exp = config.experiment
    if exp == "smooth-1d":
        return {"EY": (p, 0.2), "EU": (p + 0.5, 0.2), "EN": (p + 1, 0.2), "EL": (p + 1, 0.2)}
    if exp == "singular":
        a = config.alpha
        return {"EY": (min(p, a + 0.5), 0.2), "EN": (a - 0.5, 0.2), "EU": (a, 0.2), "EL": (a + 0.5, 0.2)}
    if exp == "incompatible":
        return {"EY": (0.25, 0.1)}
    if exp == "smooth-2d":
        return {"EY": (p, 0.25)}
    return {}


def check_patch(reports: list[ErrorReport], tol: float = PATCH_TOL) -> list[str]:
    return [
        f"level {r.level}: {k} = {v:.3e} > {tol:g}"
        for r in reports for k, v in r.errors.items() if not v <= tol
    ]


def check_rates(reports: list[ErrorReport], targets: dict) -> list[str]:
    if len(reports) < 2:
        return []
    rates = reports[-1].eoc
    fails = []
    for key, (target, tol) in targets.items():
        got = rates.get(key)
        if got is None or not abs(got - target) <= tol:
            fails.append(f"EOC({key}) = {got} not within {target:g} +/- {tol:g}")
    return fails


def loglinear_fit(x, y) -> tuple[float, float]:
    """Slope and R^2 of ``log(y)`` against ``x``."""
    x, ly = np.asarray(x, float), np.log(np.asarray(y, float))
    slope, icpt = np.polyfit(x, ly, 1)
    resid = ly - (slope * x + icpt)
    ss_tot = float(np.sum((ly - ly.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid**2)) / ss_tot if ss_tot > 0 else 1.0
    return float(slope), r2


def check_pversion(reports: list[ErrorReport], min_r2: float = 0.95) -> list[str]:
    fails = []
    x = np.sqrt([r.ndofs for r in reports])
    for key in ("EY", "EN", "EU", "EL"):
        e = [getattr(r, key) for r in reports]
        if any(not b < a for a, b in zip(e, e[1:])):
            fails.append(f"{key} does not decrease strictly: {e}")
            continue
        if len(e) >= 2:
            slope, r2 = loglinear_fit(x, e)
            if not (slope < 0 and r2 >= min_r2):
                fails.append(f"{key}: log-linear slope {slope:.3g}, R^2 {r2:.3f}")
    return fails


def run_experiment(config: ExperimentConfig) -> tuple[dict, dict]:
    """Run and check; returns ``(reports by key, failures by key)``."""
    exp = config.experiment
    if exp == "patch":
        results = run_patch(config)
        return results, {p: check_patch(r) for p, r in results.items()}
    if exp == "pversion":
        results = run_pversion(config)
        return results, {k: check_pversion(r) for k, r in results.items()}
    results = run_convergence(config)
    return results, {p: check_rates(r, expected_rates(config, p)) for p, r in results.items()}


# output --------------------------------------------------------------------

def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def csv_text(reports: list[ErrorReport]) -> str:
    if not reports:
        raise ValueError("no reports to write")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in reports:
        e = r.eoc or {}
        w.writerow([_fmt(x) for x in (
            r.level, r.h, r.hx, r.ht, r.ndofs, r.EY, r.EN, r.EU, r.EL,
            e.get("EY"), e.get("EN"), e.get("EU"), e.get("EL"),
        )])
    return buf.getvalue()


def emit_csv(reports: list[ErrorReport], path) -> Path:
    path = Path(path)
    text = csv_text(reports)
    path.write_text(text)
    return path


def output_paths(out: str, keys) -> dict:
    keys = list(keys)
    if len(keys) == 1:
        return {keys[0]: Path(out)}
    base = Path(out)
    return {k: base.with_name(f"{base.stem}-p{k}{base.suffix}") for k in keys}


# entry point ---------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="stvem", description="Space-time virtual elements for the heat equation")
    ap.add_argument("--config", help="key = value config file (flags override it)")
    ap.add_argument("--experiment", choices=EXPERIMENTS)
    ap.add_argument("--p", help="degree(s): 2, 1,3 or 1-4")
    ap.add_argument("--levels", type=int)
    ap.add_argument("--alpha", type=float, help="exponent of the singular solution")
    ap.add_argument("--ic-mode", choices=IC_MODES)
    ap.add_argument("--out", help="CSV output path")
    ap.add_argument("--threads", type=int)
    ap.add_argument("--quad-bump", type=int, help="extra quadrature degree")
    ap.add_argument("--seed", type=int, help="seed for 2D mesh perturbation")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def config_from_args(args: argparse.Namespace) -> ExperimentConfig:
    values = read_config_file(args.config) if args.config else {}
    for key in _CONVERTERS:
        val = getattr(args, key, None)
        if val is not None:
            values[key] = val
    return config_from_mapping({k: v for k, v in values.items()})


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        config = config_from_args(args)
    except ConfigError as exc:
        print(f"stvem: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        results, failures = run_experiment(config)
    except (SolverError, FloatingPointError, MeshError, np.linalg.LinAlgError) as exc:
        print(f"stvem: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    if config.out:
        try:
            for key, path in output_paths(config.out, results).items():
                emit_csv(results[key], path)
        except OSError as exc:
            print(f"stvem: cannot write output: {exc}", file=sys.stderr)
            return EXIT_USAGE
    status = EXIT_OK
    for key, reports in results.items():
        label = f"p={key}" if key != "pversion" else "p-version"
        fails = failures.get(key, [])
        print(f"[{'PASS' if not fails else 'FAIL'}] {config.experiment} {label}")
        if fails:
            status = EXIT_FAIL
            for r in reports:
                print(f"    {r}")
            for msg in fails:
                print(f"    - {msg}")
    return status


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())

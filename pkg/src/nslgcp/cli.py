"""Command-line interface: ``nslgcp simulate | fit | gof | study``.

Every command reads one YAML configuration.  Relative paths inside a
configuration are resolved against the configuration file's directory.
Outputs go to ``--out``; files are written to a scratch directory first and
moved into place only when the command succeeds.  Artifacts are JSON with
sorted keys and no timings, so identical inputs and seeds give
byte-identical files.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numerical failure.

Configuration keys
------------------
Geometry and covariates, either a built-in synthetic scenario::

    scenario: fish            # fish | dispersal
    series: 1                 # row of the simulation table (optional)
    truth: {gamma0: 1.3}      # overrides of the true parameters (optional)

or explicit inputs::

    window: {rectangle: [[0, 916], [0, 10]]}   # or {polygon: [[x, y], ...]}
    covariates: {depth: depth.asc}             # ESRI ASCII rasters
    simulate:                                  # model to simulate from
      intensity: {beta: [-2.0, -0.02], covariates: [depth]}
      field: {std: {kind: constant, sigma: 1.0}, correlation: {rate: 0.5}}
      count_range: [200, 1000]                 # optional

Estimation (``fit``)::

    data: pattern.csv         # CSV with header x,y (or the DATA argument)
    model: {preset: fish, K: 5, ...}           # preset plus ModelSpec fields

Studies (``study``)::

    study: series             # series | gamma1 | rmsle | bootstrap
    scenario: fish
    series: [1, 5]
    replicates: 100
    seed: 1
    levels: [0.01, 0.05, 0.10]                 # gamma1 only
    fit: fit/fit.json                          # bootstrap only
    B: 100                                     # bootstrap only
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import os
import shutil
import sys
import tempfile
from pathlib import Path
from typing import Mapping, Optional

import numpy as np
import yaml

from .coxsim import LGCPSimulator, LogLinearIntensity, SimulationError, simulate_conditional_poisson
from .geometry import (DataFormatError, GeometryError, PointPattern, Window, partition_by_covariate,
                       read_ascii_grid, read_points_csv, write_points_csv)
from .gof import GofError, default_r_grid, envelope_test, make_statistic
from .intensity import EstimationError, kernel_intensity
from .parallel import default_workers
from .pipeline import FitResult, ModelSpec, PipelineError, _plain, fit
from .randomfield import FieldModel, ModelError, make_rng
from .scenarios import DISPERSAL_SERIES, FISH_SERIES, make_scenario
from .study import (StudyError, gamma1_test_study, parametric_bootstrap, rmsle_compare, run_series,
                    table_csv)

logger = logging.getLogger("nslgcp")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field path."""


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


def load_config(path) -> tuple[dict, Path]:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        cfg = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML ({exc})") from None
    if cfg is None:
        cfg = {}
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return cfg, path.resolve().parent


def _resolve(base: Path, p) -> Path:
    p = Path(p)
    return p if p.is_absolute() else base / p


def _require(cfg: Mapping, key: str, where: str = ""):
    if key not in cfg:
        raise ConfigError(f"{where}{key}: required field is missing")
    return cfg[key]


class Setting:
    """Window, covariates and (optionally) a model to simulate, resolved from a configuration."""

    def __init__(self, cfg: Mapping, base: Path):
        self.cfg, self.base = cfg, base
        self.scenario = None
        if "scenario" in cfg:
            series = cfg.get("series")
            if isinstance(series, list):
                raise ConfigError("series: give a single series number here")
            table = {"fish": FISH_SERIES, "dispersal": DISPERSAL_SERIES}.get(cfg["scenario"])
            if table is None:
                raise ConfigError(f"scenario: unknown scenario {cfg['scenario']!r} (expected 'fish' or 'dispersal')")
            if series is not None and series not in table:
                raise ConfigError(f"series: {series!r} is not one of {sorted(table)}")
            truth = dict(cfg.get("truth") or {})
            try:
                self.scenario = make_scenario(cfg["scenario"], series, **truth)
            except TypeError as exc:
                raise ConfigError(f"truth: {exc}") from None
            except ModelError as exc:
                raise ConfigError(f"truth: {exc}") from None
            self.window = self.scenario.window
            self.covariates = dict(self.scenario.covariates)
        else:
            try:
                self.window = Window.from_dict(_require(cfg, "window"))
            except (TypeError, ValueError, KeyError) as exc:
                raise ConfigError(f"window: {exc}") from None
            self.covariates = {}
            for name, p in (cfg.get("covariates") or {}).items():
                self.covariates[name] = read_ascii_grid(_resolve(base, p), self.window, name)

    def simulator(self):
        """``(simulate(rng) -> PointPattern, resolved model block)``."""
        if self.scenario is not None:
            sc = self.scenario
            return sc.simulate, {"scenario": sc.name, "series": sc.meta.get("series"), "truth": dict(sc.truth),
                                 "count_range": list(sc.count_range) if sc.count_range else None}
        block = _require(self.cfg, "simulate")
        ib = _require(block, "intensity", "simulate.")
        names = list(ib.get("covariates", []))
        missing = [n for n in names if n not in self.covariates]
        if missing:
            raise ConfigError(f"simulate.intensity.covariates: unknown covariate(s) {missing}")
        try:
            intensity = LogLinearIntensity(np.asarray(_require(ib, "beta", "simulate.intensity."), float),
                                           [self.covariates[n] for n in names])
        except ValueError as exc:
            raise ConfigError(f"simulate.intensity.beta: {exc}") from None
        count_range = block.get("count_range")
        resolved = {"intensity": {"beta": [float(b) for b in intensity.beta], "covariates": names},
                    "count_range": list(count_range) if count_range else None}
        if block.get("field") is None:
            def sim(rng):
                return simulate_conditional_poisson(intensity, self.window, rng)
            resolved["field"] = None
            return sim, resolved
        try:
            fm = FieldModel.from_dict(block["field"], self.covariates)
        except KeyError as exc:
            raise ConfigError(f"simulate.field: missing {exc}") from None
        resolved["field"] = fm.to_dict()
        lg = LGCPSimulator(intensity, fm, self.window)

        def sim(rng):
            if count_range:
                return lg.simulate_constrained(rng, tuple(count_range))
            return lg.simulate(rng)
        return sim, resolved


def model_spec(cfg: Mapping, setting: Optional[Setting] = None) -> ModelSpec:
    block = dict(cfg.get("model") or {})
    preset = block.pop("preset", None)
    if preset is None and setting is not None and setting.scenario is not None:
        preset = setting.scenario.name
    try:
        if preset == "fish":
            return ModelSpec.fish(**block)
        if preset == "dispersal":
            return ModelSpec.dispersal(**block)
        if preset is not None:
            raise ConfigError(f"model.preset: unknown preset {preset!r} (expected 'fish' or 'dispersal')")
        return ModelSpec.from_dict(block)
    except TypeError as exc:
        raise ConfigError(f"model: {exc}") from None


# ---------------------------------------------------------------------------
# Output handling
# ---------------------------------------------------------------------------


def dump_json(obj) -> str:
    return json.dumps(_plain(obj), sort_keys=True, indent=2, allow_nan=True) + "\n"


class Staging:
    """Collect outputs in a scratch directory; publish into ``out`` only on success."""

    def __init__(self, out):
        self.out = Path(out)

    def __enter__(self):
        self.out.mkdir(parents=True, exist_ok=True)
        self.tmp = Path(tempfile.mkdtemp(prefix=".staging-", dir=self.out))
        return self.tmp

    def __exit__(self, exc_type, exc, tb):
        try:
            if exc_type is None:
                for f in sorted(self.tmp.iterdir()):
                    os.replace(f, self.out / f.name)
        finally:
            shutil.rmtree(self.tmp, ignore_errors=True)
        return False


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_simulate(args) -> int:
    cfg, base = load_config(args.config)
    setting = Setting(cfg, base)
    sim, resolved = setting.simulator()
    seed = int(args.seed if args.seed is not None else cfg.get("seed", 0))
    pattern = sim(make_rng(seed))
    echo = dict(cfg)
    echo["seed"] = seed
    echo["resolved"] = resolved
    with Staging(args.out) as tmp:
        write_points_csv(tmp / "pattern.csv", pattern)
        (tmp / "config.yaml").write_text(yaml.safe_dump(_plain(echo), sort_keys=True))
        (tmp / "simulation.json").write_text(dump_json({
            "command": "simulate", "seed": seed, "n_points": pattern.n, "window": setting.window.to_dict(),
            "model": resolved, "config": echo}))
    print(f"simulated {pattern.n} points -> {Path(args.out) / 'pattern.csv'}")
    return EXIT_OK


def _read_data(path: Path, window: Window) -> PointPattern:
    pattern = read_points_csv(path, window)
    inside = window.contains(pattern.points) if pattern.n else np.ones(0, bool)
    if not inside.all():
        raise DataFormatError(f"{path}: {int((~inside).sum())} point(s) lie outside the window")
    return pattern


def cmd_fit(args) -> int:
    cfg, base = load_config(args.config)
    setting = Setting(cfg, base)
    spec = model_spec(cfg, setting)
    data_path = Path(args.data) if args.data else _resolve(base, _require(cfg, "data"))
    pattern = _read_data(data_path, setting.window)
    result = fit(pattern, setting.covariates, spec, args.method)
    echo = dict(cfg)
    echo["model"] = dict(spec.to_dict())
    artifact = result.to_dict()
    artifact.update(command="fit", config=echo, window=setting.window.to_dict(),
                    data={"path": str(data_path), "sha256": _sha256(data_path), "n_points": pattern.n},
                    config_dir=str(base))
    with Staging(args.out) as tmp:
        (tmp / "fit.json").write_text(dump_json(artifact))
    shown = {k: round(v, 4) for k, v in sorted(result.estimates.items())}
    print(f"{args.method} fit of {pattern.n} points: {shown}")
    return EXIT_OK


def load_fit(path) -> tuple[dict, FitResult, Setting]:
    """Rebuild a fitted model (with live intensity and covariates) from a fit artifact."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"fit artifact not found: {path}")
    try:
        art = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not a JSON fit artifact ({exc})") from None
    for key in ("config", "window", "data", "estimates", "spec"):
        if key not in art:
            raise ConfigError(f"{path}: fit artifact lacks {key!r}")
    setting = Setting(art["config"], Path(art.get("config_dir", path.parent)))
    return art, FitResult.from_dict(art), setting


def _live_fit(art: dict, result: FitResult, setting: Setting, pattern: PointPattern) -> FitResult:
    if not setting.window.same_as(Window.from_dict(art["window"])):
        raise GofError("window of the fit artifact does not match the configured window")
    spec = result.spec
    result.covariates = setting.covariates
    if result.step1.get("kind") == "kernel":
        grid = None
        for name in (spec.split_covariate, spec.variance_covariate):
            if name and name in setting.covariates:
                grid = setting.covariates[name].grid
                break
        result.intensity = kernel_intensity(pattern, spec.bandwidth, grid)
    else:
        covs = [setting.covariates[c] for c in spec.intensity_covariates]
        result.intensity = LogLinearIntensity(np.asarray(result.step1["beta"], float), covs)
    if spec.split_covariate:
        result.partition = partition_by_covariate(pattern, setting.covariates[spec.split_covariate], spec.K)
    return result


def cmd_gof(args) -> int:
    art, result, setting = load_fit(args.fit)
    data_path = Path(args.data) if args.data else Path(art["data"]["path"])
    window = setting.window
    pattern = _read_data(data_path, window)
    if args.data is None and _sha256(data_path) != art["data"]["sha256"]:
        raise GofError(f"{data_path}: data changed since the fit (checksum mismatch)")
    result = _live_fit(art, result, setting, pattern)
    spec = result.spec
    part = result.partition
    f = setting.covariates.get(spec.split_covariate) if spec.split_covariate else None
    grid = part.grid if part is not None else (f.grid if f is not None else
                                                next(iter(setting.covariates.values())).grid)
    r = default_r_grid(window, part)
    stat = make_statistic(result.intensity, grid, r, part, f)
    count_range = None
    if setting.scenario is not None and setting.scenario.count_range:
        count_range = setting.scenario.count_range
    if args.null == "poisson" or spec.variant == "poisson":
        rho = result.intensity

        def simulate(rng):
            return simulate_conditional_poisson(rho, window, rng, grid=grid if rho.grid is None else None)
    else:
        sim = LGCPSimulator(result.intensity, result.field_model(), window)

        def simulate(rng):
            return sim.simulate_constrained(rng, count_range) if count_range else sim.simulate(rng)
    curves, env = envelope_test(pattern, stat, simulate, args.nsim, args.seed, args.level, args.workers)
    summary = env.summary()
    summary.update(command="gof", null=args.null, seed=args.seed, fit=str(args.fit), data=str(data_path),
                   K=stat.K, r_max=float(r[-1]), r_points=len(r))
    with Staging(args.out) as tmp:
        curves.to_csv(tmp / "curves.csv")
        (tmp / "gof.json").write_text(dump_json(summary))
        env_rows = ["segment,r,lower,upper,observed"]
        for seg, rr, lo, hi, ob in zip(curves.segments, curves.r, env.lower, env.upper, curves.observed):
            env_rows.append(",".join([str(int(seg)), repr(float(rr))] +
                                     [repr(float(v)) if math.isfinite(v) else "nan" for v in (lo, hi, ob)]))
        (tmp / "envelope.csv").write_text("\n".join(env_rows) + "\n")
    verdict = "rejected" if env.rejected else "not rejected"
    print(f"p-interval [{env.p_low:.4f}, {env.p_high:.4f}] at level {args.level}: {verdict}")
    return EXIT_OK


def _series_list(cfg) -> list:
    s = _require(cfg, "series")
    s = s if isinstance(s, list) else [s]
    if not s:
        raise ConfigError("series: empty series list")
    return s


def _scenario_for(cfg, series):
    name = _require(cfg, "scenario")
    table = {"fish": FISH_SERIES, "dispersal": DISPERSAL_SERIES}.get(name)
    if table is None:
        raise ConfigError(f"scenario: unknown scenario {name!r}")
    if series not in table:
        raise ConfigError(f"series: {series!r} is not one of {sorted(table)}")
    return make_scenario(name, series, **dict(cfg.get("truth") or {}))


def cmd_study(args) -> int:
    cfg, base = load_config(args.config)
    kind = _require(cfg, "study")
    seed = int(args.seed if args.seed is not None else cfg.get("seed", 0))
    n = int(cfg.get("replicates", 100))
    workers = args.workers
    out: dict = {"command": "study", "study": kind, "seed": seed, "config": dict(cfg)}
    files: dict[str, str] = {}
    if kind in ("series", "gamma1", "rmsle"):
        for s in _series_list(cfg):
            sc = _scenario_for(cfg, s)
            spec = model_spec(cfg, None) if cfg.get("model") else None
            if spec is None:
                spec = ModelSpec.fish() if sc.name == "fish" else ModelSpec.dispersal()
            key = f"series{s}"
            if kind == "series":
                res = run_series(sc, n, seed, spec, cfg.get("method", "three-step"), workers)
                out[key] = res.summary
                files[f"estimates_{key}.csv"] = res.table_csv()
            elif kind == "gamma1":
                levels = [float(x) for x in cfg.get("levels", [0.01, 0.05, 0.10])]
                res = gamma1_test_study(sc, n, seed, levels, spec, workers)
                reps = res.pop("replicates")
                out[key] = res
                files[f"estimates_{key}.csv"] = table_csv(reps, ("gamma0", "gamma1"))
            else:
                res = rmsle_compare(sc, n, seed, spec, workers=workers)
                reps = res.pop("replicates")
                out[key] = res
                names = sorted({k for r in reps if r.ok for k in r.estimates})
                files[f"estimates_{key}.csv"] = table_csv(reps, names)
    elif kind == "bootstrap":
        art, result, setting = load_fit(_resolve(base, _require(cfg, "fit")))
        pattern = _read_data(Path(art["data"]["path"]), setting.window)
        result = _live_fit(art, result, setting, pattern)
        B = int(_require(cfg, "B"))
        cr = setting.scenario.count_range if setting.scenario is not None else None
        res = parametric_bootstrap(result, setting.window, B, seed, workers, cr)
        out["bootstrap"] = res.summary
        files["estimates_bootstrap.csv"] = res.table_csv()
    else:
        raise ConfigError(f"study: unknown study kind {kind!r} (expected series, gamma1, rmsle or bootstrap)")
    with Staging(args.out) as tmp:
        (tmp / "summary.json").write_text(dump_json(out))
        for name, text in files.items():
            (tmp / name).write_text(text)
    print(f"{kind} study written to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nslgcp", description="Non-stationary log-Gaussian Cox process toolkit")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="simulate a point pattern")
    s.add_argument("config")
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("fit", help="fit a model to a point pattern")
    s.add_argument("data", nargs="?", help="point CSV (default: 'data' in the config)")
    s.add_argument("config")
    s.add_argument("--method", choices=("three-step", "two-step"), default="three-step")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_fit)

    s = sub.add_parser("gof", help="global rank envelope test of a fitted model")
    s.add_argument("fit", help="fit.json artifact")
    s.add_argument("--data", help="point CSV (default: the data recorded in the artifact)")
    s.add_argument("--nsim", type=int, default=199)
    s.add_argument("--level", type=float, default=0.05)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--null", choices=("fitted", "poisson"), default="fitted",
                   help="simulate the fitted LGCP or the fitted intensity without interaction")
    s.add_argument("--workers", type=int, default=None)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_gof)

    s = sub.add_parser("study", help="simulation studies and parametric bootstrap")
    s.add_argument("config")
    s.add_argument("--seed", type=int)
    s.add_argument("--workers", type=int, default=None)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_study)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if getattr(args, "workers", None) is None and hasattr(args, "workers"):
        args.workers = default_workers()
    try:
        return args.func(args)
    except (ConfigError, ModelError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataFormatError, GeometryError, GofError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (PipelineError, EstimationError, StudyError, SimulationError, np.linalg.LinAlgError,
            FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())

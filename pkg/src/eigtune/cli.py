"""Command-line front end: config files in, CSV/JSON studies out.

Subcommands
-----------
estimate     tune (unless a fixed setting is given) and run one estimator
tune         pilots + solver only; emit constants and the optimal setting
consistency  error-vs-TOL coverage study against the model's oracle
work-study   work and wall time vs TOL, with fitted log-log slopes
eig-curve    one tuned estimate per design grid point

Exit codes: 0 success, 2 config error, 3 infeasible tolerance,
4 numerical failure.

Config files are plain-text INI (sections of ``key = value`` lines); see
the README for the documented grammar and shipped example configs.
Outputs are byte-reproducible for a fixed config and seed: CSV floats are
written with 17 significant digits and JSON is key-sorted, with wall
times and timestamps confined to dedicated metadata fields.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import dataclasses
import json
import math
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import ExperimentSpec, NoiseModel, make_prior
from .estimators import EstimatorSetting, run_estimator
from .models import build_model, registry_names
from .oracles import QuadratureRule, linear_gaussian_eig, quadrature_eig
from .tuner import (
    OptimalSetting,
    PilotConstants,
    c_alpha,
    estimate_constants_dlmc,
    estimate_constants_dlmcis,
    estimate_constants_mcla,
    optimal_setting,
    verify_setting,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INFEASIBLE = 3
EXIT_NUMERICAL = 4

ESTIMATOR_NAMES = ("dlmc", "mcla", "dlmcis")


class ConfigError(ValueError):
    """Configuration problem, annotated with file/section/key."""


def derive_seed(root: int, *key: int) -> int:
    """Stable derived seed for a named sub-run (replicate, grid point, ...)."""
    ss = np.random.SeedSequence(entropy=int(root), spawn_key=tuple(int(k) for k in key))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


# ---------------------------------------------------------------------------
# Config parsing
# ---------------------------------------------------------------------------

@dataclass
class RunConfig:
    """Parsed run configuration (plain values only, safe to pickle)."""

    model_name: str
    model_params: dict = field(default_factory=dict)
    prior_spec: dict | None = None
    noise_kind: str = "model-default"
    noise_variances: list[float] | None = None
    xi: float | None = None
    xi_grid: tuple[float, float, int] | None = None
    n_e: int = 1
    estimator: str = "dlmcis"
    tols: list[float] = field(default_factory=lambda: [0.1])
    alpha: float = 0.05
    seed: int = 0
    replicates: int = 20
    jobs: int = 1
    pilot_n: int = 100
    pilot_m: int = 100
    bias_probe_n: int = 1000
    bias_probe_m: int = 256
    force_kappa1: bool = False
    fixed_n: int | None = None
    fixed_m: int | None = None
    fixed_h: float | str | None = None
    fixed_kappa: float | None = None
    out_dir: str = "out"
    config_path: str = ""


def _get(parser, section, key, conv, default=None, required=False, path=""):
    if not parser.has_section(section) or not parser.has_option(section, key):
        if required:
            raise ConfigError(f"{path}: missing required [{section}] {key}")
        return default
    raw = parser.get(section, key)
    try:
        return conv(raw)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{path}: [{section}] {key} = {raw!r}: {exc}") from exc


def _floats(raw: str) -> list[float]:
    return [float(tok) for tok in raw.replace(",", " ").split()]


def _bool(raw: str) -> bool:
    v = raw.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def _h_value(raw: str) -> float | str:
    v = raw.strip().lower()
    if v == "exact":
        return "exact"
    h = float(v)
    if h <= 0:
        raise ValueError("h must be positive or 'exact'")
    return h


def parse_config(path: str | Path) -> RunConfig:
    """Parse the line-oriented key-value config format (INI sections)."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        parser.read(path)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    p = str(path)

    name = _get(parser, "model", "name", str, required=True, path=p)
    if name not in registry_names():
        raise ConfigError(
            f"{p}: [model] name = {name!r} not registered; "
            f"available: {', '.join(registry_names())}"
        )
    model_params = {
        k: v for k, v in (parser.items("model") if parser.has_section("model") else [])
        if k != "name"
    }

    prior_spec = None
    if parser.has_section("prior"):
        kind = _get(parser, "prior", "kind", str, required=True, path=p)
        if kind == "normal":
            mean = _get(parser, "prior", "mean", _floats, required=True, path=p)
            var = _get(parser, "prior", "var", _floats, path=p)
            if var is None:
                raise ConfigError(f"{p}: [prior] normal prior needs 'var'")
            prior_spec = {"kind": "normal", "mean": mean, "cov": np.diag(var).tolist()}
        elif kind == "uniform":
            lower = _get(parser, "prior", "lower", _floats, required=True, path=p)
            upper = _get(parser, "prior", "upper", _floats, required=True, path=p)
            prior_spec = {"kind": "uniform", "lower": lower, "upper": upper}
        else:
            raise ConfigError(f"{p}: [prior] kind = {kind!r} (normal|uniform)")

    noise_kind = _get(parser, "noise", "kind", str, default="model-default", path=p)
    if noise_kind not in ("model-default", "constant"):
        raise ConfigError(f"{p}: [noise] kind = {noise_kind!r} (model-default|constant)")
    noise_variances = _get(parser, "noise", "variances", _floats, path=p)
    if noise_kind == "constant" and noise_variances is None:
        raise ConfigError(f"{p}: [noise] kind = constant needs 'variances'")

    xi = _get(parser, "design", "xi", float, path=p)
    grid_raw = _get(parser, "design", "xi_grid", _floats, path=p)
    xi_grid = None
    if grid_raw is not None:
        if len(grid_raw) != 3 or int(grid_raw[2]) < 1:
            raise ConfigError(f"{p}: [design] xi_grid must be 'min max npoints'")
        if grid_raw[0] > grid_raw[1]:
            raise ConfigError(f"{p}: [design] xi_grid bounds out of order")
        xi_grid = (grid_raw[0], grid_raw[1], int(grid_raw[2]))
    if xi is None and xi_grid is None:
        raise ConfigError(f"{p}: [design] needs 'xi' or 'xi_grid'")

    tols = _get(parser, "run", "tol_list", _floats, path=p)
    if tols is None:
        single = _get(parser, "run", "tol", float, default=0.1, path=p)
        tols = [single]
    if any(t <= 0 for t in tols):
        raise ConfigError(f"{p}: [run] tolerances must be strictly positive")

    estimator = _get(parser, "run", "estimator", str, default="dlmcis", path=p)
    if estimator not in ESTIMATOR_NAMES:
        raise ConfigError(
            f"{p}: [run] estimator = {estimator!r} (one of {', '.join(ESTIMATOR_NAMES)})"
        )

    cfg = RunConfig(
        model_name=name,
        model_params=model_params,
        prior_spec=prior_spec,
        noise_kind=noise_kind,
        noise_variances=noise_variances,
        xi=xi,
        xi_grid=xi_grid,
        n_e=_get(parser, "design", "n_e", int, default=1, path=p),
        estimator=estimator,
        tols=tols,
        alpha=_get(parser, "run", "alpha", float, default=0.05, path=p),
        seed=_get(parser, "run", "seed", int, default=0, path=p),
        replicates=_get(parser, "run", "replicates", int, default=20, path=p),
        pilot_n=_get(parser, "run", "pilot_n", int, default=100, path=p),
        pilot_m=_get(parser, "run", "pilot_m", int, default=100, path=p),
        bias_probe_n=_get(parser, "run", "bias_probe_n", int, default=1000, path=p),
        bias_probe_m=_get(parser, "run", "bias_probe_m", int, default=256, path=p),
        force_kappa1=_get(parser, "run", "force_kappa1", _bool, default=False, path=p),
        fixed_n=_get(parser, "run", "n", int, path=p),
        fixed_m=_get(parser, "run", "m", int, path=p),
        fixed_h=_get(parser, "run", "h", _h_value, path=p),
        fixed_kappa=_get(parser, "run", "kappa", float, path=p),
        out_dir=_get(parser, "output", "dir", str, default="out", path=p),
        config_path=str(path),
    )
    if cfg.n_e < 1:
        raise ConfigError(f"{p}: [design] n_e must be >= 1")
    if not (0 < cfg.alpha < 1):
        raise ConfigError(f"{p}: [run] alpha must lie in (0, 1)")
    if cfg.replicates < 0:
        raise ConfigError(f"{p}: [run] replicates must be >= 0")
    return cfg


# ---------------------------------------------------------------------------
# Spec construction and references
# ---------------------------------------------------------------------------

def build_spec(cfg: RunConfig, xi: float) -> ExperimentSpec:
    bundle = build_model(cfg.model_name, cfg.model_params)
    prior = make_prior(cfg.prior_spec or bundle.default_prior)
    if cfg.noise_kind == "constant":
        variances = np.asarray(cfg.noise_variances, dtype=float)
    else:
        variances = bundle.default_noise_var(xi)
    return ExperimentSpec(
        model=bundle.model, prior=prior, noise=NoiseModel(variances), xi=xi, n_e=cfg.n_e
    )


def reference_eig(cfg: RunConfig, spec: ExperimentSpec) -> float | None:
    """Oracle EIG where one exists (exact-model value; h-bias counts as error)."""
    if spec.model.d != 1:
        return None
    if cfg.model_name == "linear-scalar" and spec.prior.kind == "normal":
        a = (1.0 + spec.xi) ** 2
        return linear_gaussian_eig(
            a,
            float(spec.prior.cov[0, 0]),
            float(spec.noise.variances[0]),
            spec.n_e,
        )
    return quadrature_eig(
        spec,
        QuadratureRule(n_points=80),
        QuadratureRule(n_points=500),
        n_noise=60_000,
    )


def estimate_constants(cfg: RunConfig, spec: ExperimentSpec, estimator: str, seed: int) -> PilotConstants:
    if estimator == "dlmc":
        return estimate_constants_dlmc(spec, cfg.pilot_n, cfg.pilot_m, seed=seed)
    if estimator == "dlmcis":
        return estimate_constants_dlmcis(spec, cfg.pilot_n, cfg.pilot_m, seed=seed)
    return estimate_constants_mcla(
        spec,
        pilot_n=max(cfg.pilot_n, 2),
        seed=seed,
        bias_n=0 if cfg.force_kappa1 else cfg.bias_probe_n,
        bias_m=cfg.bias_probe_m,
    )


def fixed_setting(cfg: RunConfig, tol: float) -> EstimatorSetting | None:
    if cfg.fixed_n is None:
        return None
    h = None if cfg.fixed_h in (None, "exact") else float(cfg.fixed_h)
    return EstimatorSetting(
        n=cfg.fixed_n,
        m=cfg.fixed_m if cfg.fixed_m is not None else 1,
        h=h,
        kappa=cfg.fixed_kappa if cfg.fixed_kappa is not None else 1.0,
        tol=tol,
        alpha=cfg.alpha,
    )


# ---------------------------------------------------------------------------
# Serialization helpers
# ---------------------------------------------------------------------------

def _jsonable(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, float) and math.isnan(obj):
        return None
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return {k: _jsonable(v) for k, v in dataclasses.asdict(obj).items()}
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def write_json(path: Path, payload: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(_jsonable(payload), fh, sort_keys=True, indent=2)
        fh.write("\n")


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        x = float(v)
        if math.isnan(x):
            return "nan"
        return format(x, ".17g")
    return str(v)


def write_csv(path: Path, header: list[str], rows: list[dict]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(row.get(col)) for col in header])


def _setting_dict(opt: OptimalSetting | None, setting: EstimatorSetting):
    return {
        "n_star": setting.n,
        "m_star": setting.m,
        "h_star": "exact" if setting.h is None else setting.h,
        "kappa_star": setting.kappa,
        "solver": opt.solver if opt is not None else "fixed",
        "predicted_work": opt.predicted_work if opt is not None else None,
    }


def estimate_payload(cfg, spec, estimator, tol, setting, opt, constants, est, seed, reference):
    ca = c_alpha(cfg.alpha)
    return {
        "command": "estimate",
        "estimator": estimator,
        "tol": tol,
        "alpha": cfg.alpha,
        "design": {"xi": spec.xi, "n_e": spec.n_e},
        "model": {"name": cfg.model_name, "params": cfg.model_params},
        "eig_estimate": {
            "value": est.value,
            "std_error": est.std_error,
            "confidence_half_width": ca * est.std_error,
            "underflow_count": est.underflow_count,
            "work_units": est.work_units,
            "n_evals": est.n_evals,
            "n_outer": est.n_outer,
            "n_excluded": est.n_excluded,
            "n_flagged": est.n_flagged,
        },
        "optimal_setting": _setting_dict(opt, setting),
        "pilot_constants": _jsonable(constants) if constants is not None else None,
        "reference": reference,
        "provenance": {
            "seed": seed,
            "root_seed": cfg.seed,
            "config": cfg.config_path,
            "package": "eigtune",
        },
        "metadata": {"timestamp": time.strftime("%Y-%m-%dT%H:%M:%S%z"), "wall_time_s": None},
    }


# ---------------------------------------------------------------------------
# Tuning orchestration
# ---------------------------------------------------------------------------

class InfeasibleToleranceError(RuntimeError):
    def __init__(self, opt: OptimalSetting):
        super().__init__(opt.infeasible_reason or "infeasible tolerance")
        self.opt = opt


def tune_one(cfg: RunConfig, spec: ExperimentSpec, estimator: str, tol: float,
             constants: PilotConstants | None = None):
    """Pilot (if needed) and solve; raises InfeasibleToleranceError on a wall."""
    if constants is None:
        constants = estimate_constants(cfg, spec, estimator, derive_seed(cfg.seed, 9000))
    opt = optimal_setting(constants, tol, cfg.alpha, force_kappa1=cfg.force_kappa1)
    if not opt.feasible:
        raise InfeasibleToleranceError(opt)
    return constants, opt


def _run_single(cfg: RunConfig, xi: float, estimator: str, setting: EstimatorSetting, seed: int):
    spec = build_spec(cfg, xi)
    t0 = time.perf_counter()
    est = run_estimator(estimator, spec, setting, seed)
    wall = time.perf_counter() - t0
    return est, wall


def _replicate_job(args):
    cfg, xi, estimator, setting, seed = args
    est, wall = _run_single(cfg, xi, estimator, setting, seed)
    return {
        "value": est.value,
        "std_error": est.std_error,
        "work_units": est.work_units,
        "n_evals": est.n_evals,
        "underflow_count": est.underflow_count,
        "wall_time": wall,
    }


def _run_replicates(cfg: RunConfig, jobs_args: list, jobs: int) -> list[dict]:
    if jobs <= 1 or len(jobs_args) <= 1:
        return [_replicate_job(a) for a in jobs_args]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_replicate_job, jobs_args))


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_estimate(cfg: RunConfig, out_dir: Path) -> int:
    xi = cfg.xi if cfg.xi is not None else cfg.xi_grid[0]
    spec = build_spec(cfg, xi)
    estimator = cfg.estimator
    tol = cfg.tols[0]
    setting = fixed_setting(cfg, tol)
    constants = opt = None
    if setting is None:
        try:
            constants, opt = tune_one(cfg, spec, estimator, tol)
        except InfeasibleToleranceError as exc:
            payload = {
                "command": "estimate",
                "estimator": estimator,
                "tol": tol,
                "feasible": False,
                "infeasible_reason": str(exc),
                "diagnostics": _jsonable(exc.opt.diagnostics),
            }
            write_json(out_dir / "estimate.json", payload)
            print(f"infeasible: {exc}", file=sys.stderr)
            return EXIT_INFEASIBLE
        setting = opt.setting
    seed = derive_seed(cfg.seed, 1)
    est, wall = _run_single(cfg, xi, estimator, setting, seed)
    reference = None
    if cfg.model_name == "linear-scalar":
        reference = reference_eig(cfg, spec)
    payload = estimate_payload(
        cfg, spec, estimator, tol, setting, opt, constants, est, seed, reference
    )
    payload["metadata"]["wall_time_s"] = wall
    write_json(out_dir / "estimate.json", payload)
    print(f"{estimator}: EIG = {est.value:.6g} +/- {est.std_error:.3g} "
          f"(work {est.work_units:.4g})")
    return EXIT_OK


def cmd_tune(cfg: RunConfig, out_dir: Path) -> int:
    xi = cfg.xi if cfg.xi is not None else cfg.xi_grid[0]
    spec = build_spec(cfg, xi)
    constants = estimate_constants(cfg, spec, cfg.estimator, derive_seed(cfg.seed, 9000))
    settings = []
    code = EXIT_OK
    for tol in cfg.tols:
        opt = optimal_setting(constants, tol, cfg.alpha, force_kappa1=cfg.force_kappa1)
        entry = {"tol": tol, "feasible": opt.feasible, "solver": opt.solver,
                 "predicted_work": opt.predicted_work,
                 "infeasible_reason": opt.infeasible_reason}
        if opt.feasible:
            entry.update(_setting_dict(opt, opt.setting))
        else:
            code = EXIT_INFEASIBLE
        settings.append(entry)
    payload = {
        "command": "tune",
        "estimator": cfg.estimator,
        "alpha": cfg.alpha,
        "pilot_constants": _jsonable(constants),
        "settings": settings,
        "provenance": {"root_seed": cfg.seed, "config": cfg.config_path},
        "metadata": {"timestamp": time.strftime("%Y-%m-%dT%H:%M:%S%z")},
    }
    write_json(out_dir / "tune.json", payload)
    for entry in settings:
        if entry["feasible"]:
            print(f"TOL={entry['tol']:g}: N*={entry['n_star']} M*={entry['m_star']} "
                  f"h*={entry['h_star']} kappa*={entry['kappa_star']:.4g} "
                  f"[{entry['solver']}]")
        else:
            print(f"TOL={entry['tol']:g}: infeasible ({entry['infeasible_reason']})")
    return code


CONSISTENCY_HEADER = [
    "tol", "replicate", "n_star", "m_star", "h_star", "kappa_star", "solver",
    "estimate", "std_error", "reference", "abs_error", "within_tol",
    "work_units", "wall_time", "underflow_count", "seed",
]


def cmd_consistency(cfg: RunConfig, out_dir: Path) -> int:
    xi = cfg.xi if cfg.xi is not None else cfg.xi_grid[0]
    spec = build_spec(cfg, xi)
    reference = reference_eig(cfg, spec)
    if reference is None:
        print("no oracle available for this model", file=sys.stderr)
        return EXIT_CONFIG
    constants = None
    rows: list[dict] = []
    summary = []
    for it, tol in enumerate(cfg.tols):
        try:
            constants, opt = tune_one(cfg, spec, cfg.estimator, tol, constants)
        except InfeasibleToleranceError as exc:
            print(f"TOL={tol:g} infeasible: {exc}", file=sys.stderr)
            return EXIT_INFEASIBLE
        _abort_unless_verified(constants, opt, tol, cfg)
        setting = opt.setting
        args = [
            (cfg, xi, cfg.estimator, setting, derive_seed(cfg.seed, it, rep))
            for rep in range(cfg.replicates)
        ]
        results = _run_replicates(cfg, args, cfg.jobs)
        n_cov = 0
        for rep, res in enumerate(results):
            err = abs(res["value"] - reference)
            ok = err <= tol
            n_cov += int(ok)
            rows.append({
                "tol": tol, "replicate": rep,
                **_setting_dict(opt, setting),
                "estimate": res["value"], "std_error": res["std_error"],
                "reference": reference, "abs_error": err, "within_tol": ok,
                "work_units": res["work_units"], "wall_time": res["wall_time"],
                "underflow_count": res["underflow_count"],
                "seed": args[rep][4],
            })
        coverage = n_cov / cfg.replicates if cfg.replicates else math.nan
        summary.append({"tol": tol, "coverage": coverage,
                        "target": 1.0 - cfg.alpha, "replicates": cfg.replicates})
        if cfg.replicates:
            print(f"TOL={tol:g}: coverage {n_cov}/{cfg.replicates} "
                  f"(target >= {1 - cfg.alpha:.3g})")
    write_csv(out_dir / "consistency.csv", CONSISTENCY_HEADER, rows)
    write_json(out_dir / "consistency_summary.json", {
        "command": "consistency",
        "estimator": cfg.estimator,
        "reference": reference,
        "summary": summary,
        "provenance": {"root_seed": cfg.seed, "config": cfg.config_path},
        "metadata": {"timestamp": time.strftime("%Y-%m-%dT%H:%M:%S%z")},
    })
    return EXIT_OK


WORK_HEADER = [
    "tol", "replicate", "n_star", "m_star", "h_star", "kappa_star", "solver",
    "estimate", "std_error", "work_units", "predicted_work", "wall_time",
    "underflow_count", "seed",
]


def cmd_work_study(cfg: RunConfig, out_dir: Path) -> int:
    xi = cfg.xi if cfg.xi is not None else cfg.xi_grid[0]
    spec = build_spec(cfg, xi)
    constants = None
    rows: list[dict] = []
    mean_work: dict[float, float] = {}
    mean_wall: dict[float, float] = {}
    reps = max(1, cfg.replicates)
    for it, tol in enumerate(cfg.tols):
        try:
            constants, opt = tune_one(cfg, spec, cfg.estimator, tol, constants)
        except InfeasibleToleranceError as exc:
            print(f"TOL={tol:g} infeasible: {exc} (skipped)", file=sys.stderr)
            continue
        _abort_unless_verified(constants, opt, tol, cfg)
        setting = opt.setting
        args = [
            (cfg, xi, cfg.estimator, setting, derive_seed(cfg.seed, it, rep))
            for rep in range(reps)
        ]
        results = _run_replicates(cfg, args, cfg.jobs)
        for rep, res in enumerate(results):
            rows.append({
                "tol": tol, "replicate": rep,
                **_setting_dict(opt, setting),
                "estimate": res["value"], "std_error": res["std_error"],
                "work_units": res["work_units"],
                "predicted_work": opt.predicted_work,
                "wall_time": res["wall_time"],
                "underflow_count": res["underflow_count"],
                "seed": args[rep][4],
            })
        mean_work[tol] = float(np.mean([r["work_units"] for r in results]))
        mean_wall[tol] = float(np.mean([r["wall_time"] for r in results]))
    write_csv(out_dir / "work_study.csv", WORK_HEADER, rows)
    slopes = {"work_slope": None, "wall_slope": None}
    if len(mean_work) >= 2:
        lt = np.log(np.array(sorted(mean_work)))
        lw = np.log(np.array([mean_work[t] for t in sorted(mean_work)]))
        lwall = np.log(np.array([max(mean_wall[t], 1e-9) for t in sorted(mean_work)]))
        slopes["work_slope"] = float(np.polyfit(lt, lw, 1)[0])
        slopes["wall_slope"] = float(np.polyfit(lt, lwall, 1)[0])
    write_json(out_dir / "work_slopes.json", {
        "command": "work-study",
        "estimator": cfg.estimator,
        "slopes": slopes,
        "mean_work": {f"{t:g}": mean_work[t] for t in mean_work},
        "provenance": {"root_seed": cfg.seed, "config": cfg.config_path},
        "metadata": {"timestamp": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
                     "mean_wall": {f"{t:g}": mean_wall[t] for t in mean_wall}},
    })
    if slopes["work_slope"] is not None:
        print(f"work slope: {slopes['work_slope']:.3f}")
    else:
        print("work slope: not-available (need >= 2 tolerances)")
    return EXIT_OK


CURVE_HEADER = [
    "xi", "estimate", "std_error", "half_width", "n_star", "m_star", "h_star",
    "kappa_star", "solver", "work_units", "underflow_count", "seed", "status",
]


def _curve_job(args):
    cfg, xi, idx = args
    tol = cfg.tols[0]
    try:
        spec = build_spec(cfg, xi)
        constants, opt = tune_one(cfg, spec, cfg.estimator, tol)
        _abort_unless_verified(constants, opt, tol, cfg)
        seed = derive_seed(cfg.seed, 5, idx)
        est, wall = _run_single(cfg, xi, cfg.estimator, opt.setting, seed)
        ca = c_alpha(cfg.alpha)
        return {
            "xi": xi, "estimate": est.value, "std_error": est.std_error,
            "half_width": ca * est.std_error,
            **_setting_dict(opt, opt.setting),
            "work_units": est.work_units,
            "underflow_count": est.underflow_count,
            "seed": seed, "status": "ok",
        }
    except InfeasibleToleranceError as exc:
        return {"xi": xi, "status": f"infeasible: {exc}"}
    except Exception as exc:  # per-point failures recorded, run continues
        return {"xi": xi, "status": f"error: {exc}"}


def cmd_eig_curve(cfg: RunConfig, out_dir: Path) -> int:
    if cfg.xi_grid is None:
        grid = [cfg.xi]
    else:
        lo, hi, k = cfg.xi_grid
        grid = list(np.linspace(lo, hi, k))
    args = [(cfg, float(xi), i) for i, xi in enumerate(grid)]
    if cfg.jobs > 1 and len(args) > 1:
        with ProcessPoolExecutor(max_workers=cfg.jobs) as pool:
            rows = list(pool.map(_curve_job, args))
    else:
        rows = [_curve_job(a) for a in args]
    write_csv(out_dir / "eig_curve.csv", CURVE_HEADER, rows)
    n_ok = sum(1 for r in rows if r.get("status") == "ok")
    print(f"eig-curve: {n_ok}/{len(rows)} points ok -> {out_dir / 'eig_curve.csv'}")
    return EXIT_OK


def _abort_unless_verified(constants, opt: OptimalSetting, tol: float, cfg: RunConfig):
    """Spec guard: emitted settings must satisfy the error-model constraints.

    The forced kappa=1 diagnostic mode deliberately omits the bias
    constraint, so only the statistical side is checked there.
    """
    if cfg.force_kappa1 and constants.variant == "mcla":
        ca = c_alpha(cfg.alpha)
        stat = constants.c1 / opt.setting.n
        if stat > (opt.setting.kappa * tol / ca) ** 2 * (1 + 1e-9):
            raise RuntimeError(
                f"tuned setting violates the statistical constraint at TOL={tol}"
            )
        return
    if not verify_setting(constants, opt.setting, tol, cfg.alpha):
        raise RuntimeError(
            f"tuned setting fails post-hoc constraint verification at TOL={tol}"
        )


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="eigtune",
        description="Expected-information-gain estimation with work-optimal tuning.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("estimate", "tune and run one estimator"),
        ("tune", "run pilots and solve for the optimal setting"),
        ("consistency", "error-vs-TOL coverage study against the oracle"),
        ("work-study", "work and wall time vs TOL with fitted slopes"),
        ("eig-curve", "tuned EIG estimate per design grid point"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="path to the run config file")
        p.add_argument("--seed", type=int, default=None, help="override [run] seed")
        p.add_argument("--out", default=None, help="override [output] dir")
        p.add_argument("--estimator", default=None, choices=ESTIMATOR_NAMES)
        p.add_argument("--force-kappa1", action="store_true",
                       help="MCLA diagnostic mode: enforce kappa = 1")
        p.add_argument("--replicates", type=int, default=None)
        p.add_argument("--jobs", type=int, default=1,
                       help="parallel workers across replicates/grid points")
    return parser


COMMANDS = {
    "estimate": cmd_estimate,
    "tune": cmd_tune,
    "consistency": cmd_consistency,
    "work-study": cmd_work_study,
    "eig-curve": cmd_eig_curve,
}


def main(argv: list[str] | None = None) -> int:
    args = make_parser().parse_args(argv)
    try:
        cfg = parse_config(args.config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out_dir = args.out
    if args.estimator is not None:
        cfg.estimator = args.estimator
    if args.force_kappa1:
        cfg.force_kappa1 = True
    if args.replicates is not None:
        cfg.replicates = args.replicates
    cfg.jobs = max(1, args.jobs)
    out_dir = Path(cfg.out_dir)
    try:
        return COMMANDS[args.command](cfg, out_dir)
    except InfeasibleToleranceError as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (ConfigError, KeyError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FloatingPointError, np.linalg.LinAlgError, RuntimeError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())

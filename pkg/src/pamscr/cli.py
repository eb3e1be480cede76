"""Command-line interface.

Commands: ``fit``, ``simulate``, ``scenarios``, ``bootstrap``, ``select``,
``check-buffer``, ``config-schema``.  All runs are driven by a JSON config
document; ``--seed`` overrides the config seed and ``--threads`` sets worker
counts for replicate-parallel commands.  Exit codes: 0 success, 2 config
error, 3 data error, 4 numerical failure.  Failures print a JSON error
report to stderr.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import estimation, io, simulation, uncertainty
from .buffer import DEFAULT_BUFFER_THRESHOLD, check_buffer
from .density import FormulaError
from .geometry import build_mesh
from .likelihood import LatentGrids
from .observation import SourceLevelGrid
from .params import ParamVector
from .validation import DataError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERICAL = 4


class ConfigError(ValueError):
    pass


CONFIG_SCHEMA = {
    "seed": {"default": 0, "doc": "base seed for all random streams"},
    "sensors": {"default": None, "doc": "sensor CSV path (easting,northing)"},
    "covariates": {"default": None, "doc": "covariate grid CSV path"},
    "mesh": {
        "inner_radius_m": {"default": 10_000.0, "doc": "fine-cell radius around sensors"},
        "inner_spacing_m": {"default": 2_500.0, "doc": "fine cell side"},
        "outer_radius_m": {"default": 50_000.0, "doc": "mesh truncation radius"},
        "outer_spacing_m": {"default": 5_000.0, "doc": "coarse cell side"},
    },
    "data": {
        "detections": {"default": None, "doc": "0/1 detection matrix CSV"},
        "bearings": {"default": None, "doc": "bearing matrix CSV, degrees"},
        "received": {"default": None, "doc": "received-level matrix CSV, dB"},
        "call_noise": {"default": None, "doc": "optional per-call noise CSV"},
        "noise_sample": {"default": None, "doc": "optional sampled-noise CSV"},
    },
    "t_r": {"default": 96.0, "doc": "received-level threshold, dB"},
    "m_min": {"default": 2, "doc": "minimum sensors per retained call"},
    "period": {"default": 1.0, "doc": "study period in density time units"},
    "sl_grid": {
        "lower": {"default": 100.0, "doc": "source-level grid lower bound, dB"},
        "upper": {"default": 220.0, "doc": "source-level grid upper bound, dB"},
        "step": {"default": 3.0, "doc": "source-level grid step, dB"},
    },
    "source_level_mode": {"default": "variable", "doc": "variable | fixed"},
    "bearing_mode": {"default": "mixture", "doc": "mixture | single | none"},
    "standardize": {"default": True, "doc": "standardize design columns"},
    "formula": {"default": "D ~ 1", "doc": "density formula for fit/bootstrap"},
    "formulas": {"default": [], "doc": "candidate formulas for select"},
    "optimizer": {
        "max_iterations": {"default": 500, "doc": "quasi-Newton iteration cap"},
        "loglik_tol": {"default": 1e-8, "doc": "relative log-likelihood tolerance"},
        "gradient_tol": {"default": 1e-4, "doc": "gradient infinity-norm tolerance"},
        "n_starts": {"default": 1, "doc": "multi-start count"},
        "jitter_sd": {"default": 0.5, "doc": "multi-start jitter (link scale)"},
    },
    "bootstrap": {
        "replicates": {"default": 999, "doc": "bootstrap resamples"},
        "start_from_base": {"default": True, "doc": "seed refits at the base optimum"},
    },
    "buffer": {
        "threshold": {"default": DEFAULT_BUFFER_THRESHOLD, "doc": "boundary probability limit"},
        "params": {"default": None, "doc": "real-scale observation parameters"},
    },
    "simulate": {
        "scenario": {"default": 1, "doc": "built-in scenario number (1 or 2)"},
        "replicates": {"default": 1, "doc": "datasets to generate"},
        "placement": {"default": "centroid", "doc": "centroid | uniform"},
        "period": {"default": None, "doc": "override the scenario study period"},
    },
    "scenarios": {
        "ids": {"default": ["1a"], "doc": "scenario/model ids, e.g. 1a, 2e"},
        "replicates": {"default": 30, "doc": "replicates per scenario"},
        "loglik_tol": {"default": 1e-7, "doc": "fit tolerance for the grid"},
    },
    "snr": {
        "enabled": {"default": False, "doc": "fit the SNR likelihood instead"},
        "theta_u": {"default": 0.6, "doc": "Janoschek asymptote start value"},
        "theta_r": {"default": 0.05, "doc": "Janoschek rate start value"},
        "theta_i": {"default": 2.0, "doc": "Janoschek shape start value"},
        "bearing_kappa": {"default": 1.0, "doc": "single-kappa start value"},
    },
}


def _defaults(schema: dict) -> dict:
    out = {}
    for key, value in schema.items():
        if isinstance(value, dict) and "default" in value:
            out[key] = value["default"]
        elif isinstance(value, dict):
            out[key] = _defaults(value)
    return out


def load_config(path) -> dict:
    try:
        with open(path) as fh:
            user = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}")
    if not isinstance(user, dict):
        raise ConfigError("config must be a JSON object")
    config = _defaults(CONFIG_SCHEMA)
    _merge(config, user)
    return config


def _merge(base: dict, user: dict, prefix: str = ""):
    for key, value in user.items():
        if key not in base:
            raise ConfigError(f"unknown config key {prefix + key!r}")
        if isinstance(base[key], dict) and isinstance(value, dict):
            _merge(base[key], value, prefix + key + ".")
        else:
            base[key] = value


def _require(config: dict, key: str):
    value = config.get(key)
    if value is None:
        raise ConfigError(f"config key {key!r} is required for this command")
    return value


def _build_mesh(config):
    sensors = io.load_sensors(_require(config, "sensors"))
    field = io.load_covariate_field(_require(config, "covariates"))
    m = config["mesh"]
    mesh = build_mesh(sensors, field, m["inner_radius_m"], m["inner_spacing_m"],
                      m["outer_radius_m"], m["outer_spacing_m"])
    return sensors, mesh


def _load_dataset(config):
    data_cfg = config["data"]
    raw = io.load_raw(_require(data_cfg, "detections"), _require(data_cfg, "bearings"),
                      _require(data_cfg, "received"),
                      call_noise_path=data_cfg.get("call_noise"))
    return io.load_and_truncate(raw, config["t_r"], config["m_min"], config["period"])


def _grids(config, mesh) -> LatentGrids:
    if config["source_level_mode"] == "variable":
        g = config["sl_grid"]
        return LatentGrids(mesh, SourceLevelGrid(g["lower"], g["upper"], g["step"]))
    return LatentGrids(mesh, None)


def _fit_config(config, start=None) -> estimation.FitConfig:
    opt = config["optimizer"]
    return estimation.FitConfig(
        max_iterations=int(opt["max_iterations"]), loglik_tol=float(opt["loglik_tol"]),
        gradient_tol=float(opt["gradient_tol"]), n_starts=int(opt["n_starts"]),
        jitter_sd=float(opt["jitter_sd"]), start_seed=int(config["seed"]), start=start)


def _param_vector(values: dict) -> ParamVector:
    values = dict(values)
    beta = np.asarray(values.pop("beta", [0.0]), dtype=float)
    return ParamVector(
        g0=values.pop("g0"), beta_r=values.pop("beta_r"), sigma_r=values.pop("sigma_r"),
        mu_s=values.pop("mu_s"), sigma_s=values.pop("sigma_s", None),
        kappa=values.pop("kappa", None), delta_kappa=values.pop("delta_kappa", None),
        psi_kappa=values.pop("psi_kappa", None), beta=beta)


def _run_fit(config, out: Path, threads: int) -> int:
    sensors, mesh = _build_mesh(config)
    dataset, report = _load_dataset(config)
    if config["snr"]["enabled"]:
        return _run_fit_snr(config, out, sensors, mesh, dataset, report)
    result = estimation.fit(
        dataset, sensors, config["formula"], _grids(config, mesh), config["t_r"],
        source_level_mode=config["source_level_mode"],
        bearing_mode=config["bearing_mode"], standardize=config["standardize"],
        config=_fit_config(config))
    document = io.fit_result_document(result)
    document["truncation"] = report.as_dict()
    io.write_json(out / "fit.json", document)
    io.write_mesh(out / "mesh.csv", mesh)
    io.write_density_surface(out / "density_surface.csv", mesh, result.design,
                             result.params.beta)
    return EXIT_OK


def _run_fit_snr(config, out: Path, sensors, mesh, dataset, report) -> int:
    from .density import build_design_matrix, parse_formula
    from .estimation import default_start
    from .snr import JanoschekParams, NoiseData, SnrModel, fit_snr

    data_cfg = config["data"]
    if data_cfg.get("call_noise") is None or data_cfg.get("noise_sample") is None:
        raise ConfigError("SNR fitting requires data.call_noise and data.noise_sample")
    noise = NoiseData(dataset.noise, io.load_matrix(data_cfg["noise_sample"]))
    grids = _grids(config, mesh)
    formula = parse_formula(config["formula"], known_covariates=list(mesh.covariates))
    design = build_design_matrix(formula, mesh, standardize=config["standardize"])
    use_bearings = config["bearing_mode"] != "none"
    probe = default_start(dataset, sensors, design, grids,
                          float(np.median(noise.call_noise)),
                          config["source_level_mode"],
                          "single" if use_bearings else "none", use_bearings)
    snr_cfg = config["snr"]
    start = SnrModel(
        JanoschekParams(snr_cfg["theta_u"], snr_cfg["theta_r"], snr_cfg["theta_i"]),
        probe.propagation(), probe.prior(),
        snr_cfg["bearing_kappa"] if use_bearings else None, probe.beta)
    opt = config["optimizer"]
    result = fit_snr(dataset, noise, sensors, design, grids, start,
                     max_iterations=int(opt["max_iterations"]),
                     loglik_tol=float(opt["loglik_tol"]), use_bearings=use_bearings)
    io.write_json(out / "fit.json", {
        "likelihood": "snr",
        "formula": str(formula),
        "n_free_parameters": result.n_free,
        "loglik": result.loglik,
        "aic": result.aic,
        "abundance": result.abundance,
        "converged": result.converged,
        "status": result.status,
        "n_iterations": result.n_iterations,
        "truncation": report.as_dict(),
        "estimates": {
            "theta_u": result.model.janoschek.theta_u,
            "theta_r": result.model.janoschek.theta_r,
            "theta_i": result.model.janoschek.theta_i,
            "beta_r": result.model.propagation.beta_r,
            "sigma_r": result.model.propagation.sigma_r,
            "mu_s": result.model.prior.mu_s,
            "sigma_s": result.model.prior.sigma_s,
            "kappa": result.model.kappa,
            "beta": result.model.beta.tolist(),
        },
    })
    io.write_mesh(out / "mesh.csv", mesh)
    io.write_density_surface(out / "density_surface.csv", mesh, design,
                             result.model.beta)
    return EXIT_OK


def _run_simulate(config, out: Path, threads: int) -> int:
    sim_cfg = config["simulate"]
    scenario = int(sim_cfg["scenario"])
    array, mesh = simulation.scenario_geometry(scenario)
    pv = simulation.SCENARIO_PARAMS[scenario]
    period = sim_cfg["period"]
    if period is None:
        period = simulation.SCENARIO_PERIODS[scenario]
    io.write_mesh(out / "mesh.csv", mesh)
    with open(out / "sensors.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["easting", "northing"])
        for e, n in array.positions:
            w.writerow([io._fmt(e), io._fmt(n)])
    from .density import total_abundance

    for rep in range(int(sim_cfg["replicates"])):
        rep_dir = out / f"rep_{rep:03d}"
        rep_dir.mkdir(parents=True, exist_ok=True)
        seed = simulation.replicate_seed(int(config["seed"]), scenario, rep)
        sim_config = simulation.SimConfig(
            params=pv, array=array, mesh=mesh, t_r=config["t_r"],
            m_min=config["m_min"], period=float(period), seed=seed,
            placement=sim_cfg["placement"])
        sim = simulation.simulate(sim_config)
        io.write_dataset(sim.dataset, rep_dir / "detections.csv",
                         rep_dir / "bearings.csv", rep_dir / "received.csv")
        io.write_json(rep_dir / "truth.json", {
            "seed": seed,
            "scenario": scenario,
            "period": float(period),
            "true_params": pv.as_dict(),
            "true_abundance_per_period_unit": total_abundance(
                pv.beta, sim_config.design(), mesh),
            "expected_emitted": sim.expected_emitted,
            "n_emitted": sim.n_emitted,
            "n_retained": sim.dataset.n_calls,
            "positions": sim.positions.tolist(),
            "cell_indices": sim.cell_indices.tolist(),
            "source_levels": sim.source_levels.tolist(),
        })
    return EXIT_OK


def _run_scenarios(config, out: Path, threads: int) -> int:
    sc = config["scenarios"]
    metrics = simulation.run_scenarios(
        sc["ids"], int(sc["replicates"]), base_seed=int(config["seed"]),
        fit_config=estimation.FitConfig(loglik_tol=float(sc["loglik_tol"])),
        n_workers=threads)
    with open(out / "metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["scenario", "true_n", "replicates", "converged", "failed",
                    "relative_bias", "cv"])
        for key in sorted(metrics):
            m = metrics[key]
            w.writerow([key, io._fmt(m.true_n), m.n_converged + m.n_failed,
                        m.n_converged, m.n_failed, io._fmt(m.relative_bias),
                        io._fmt(m.cv)])
    with open(out / "estimates.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["scenario", "estimate", "relative_error"])
        for key in sorted(metrics):
            m = metrics[key]
            for est, rel in zip(m.estimates, m.relative_errors):
                w.writerow([key, io._fmt(est), io._fmt(rel)])
    return EXIT_OK


def _run_bootstrap(config, out: Path, threads: int) -> int:
    sensors, mesh = _build_mesh(config)
    dataset, report = _load_dataset(config)
    grids = _grids(config, mesh)
    base = estimation.fit(
        dataset, sensors, config["formula"], grids, config["t_r"],
        source_level_mode=config["source_level_mode"],
        bearing_mode=config["bearing_mode"], standardize=config["standardize"],
        config=_fit_config(config))
    boot_cfg = config["bootstrap"]
    replicates = uncertainty.bootstrap(
        dataset, sensors, base, grids, config["t_r"], int(boot_cfg["replicates"]),
        int(config["seed"]), source_level_mode=config["source_level_mode"],
        bearing_mode=config["bearing_mode"], config=_fit_config(config),
        start_from_base=bool(boot_cfg["start_from_base"]), n_workers=threads)
    summary = uncertainty.summarize(replicates, base, mesh)
    with open(out / "replicates.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["replicate", "converged", "abundance"] + list(replicates.names))
        for i in range(replicates.n_replicates):
            w.writerow([i, int(replicates.converged[i]), io._fmt(replicates.abundance[i])]
                       + [io._fmt(v) for v in replicates.real[i]])
    io.write_json(out / "bootstrap_summary.json", {
        "abundance": summary.abundance,
        "abundance_se": summary.abundance_se,
        "abundance_cv_percent": summary.abundance_cv_percent,
        "abundance_ci": list(summary.abundance_ci),
        "n_converged": summary.n_converged,
        "n_failed": summary.n_failed,
        "parameters": {
            name: {
                "estimate_real": summary.point_real[i],
                "estimate_link": summary.point_transformed[i],
                "se_real": summary.se_real[i],
                "se_link": summary.se_transformed[i],
                "cv_percent": summary.cv_percent[i],
                "ci_real": summary.ci_real[i].tolist(),
                "ci_link": summary.ci_transformed[i].tolist(),
            }
            for i, name in enumerate(summary.names)
        },
    })
    io.write_qcd(out / "qcd.csv", mesh, summary.qcd)
    io.write_json(out / "fit.json", io.fit_result_document(base))
    return EXIT_OK


def _run_select(config, out: Path, threads: int) -> int:
    sensors, mesh = _build_mesh(config)
    dataset, _ = _load_dataset(config)
    formulas = config["formulas"] or [config["formula"]]
    ranked = estimation.model_select(
        dataset, sensors, formulas, _grids(config, mesh), config["t_r"],
        source_level_mode=config["source_level_mode"],
        bearing_mode=config["bearing_mode"], standardize=config["standardize"],
        config=_fit_config(config))
    with open(out / "selection.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["rank", "formula", "converged", "n_free", "abundance",
                    "aic", "delta_aic", "status"])
        for rank, row in enumerate(ranked, start=1):
            w.writerow([rank, row.formula, int(row.converged), row.n_free,
                        io._fmt(row.abundance), io._fmt(row.aic),
                        io._fmt(row.delta_aic), row.status])
    best = next((r for r in ranked if r.converged), None)
    if best is None:
        raise DataError("no candidate model converged")
    io.write_json(out / "best_fit.json", io.fit_result_document(best.fit))
    return EXIT_OK


def _run_check_buffer(config, out: Path, threads: int) -> int:
    sensors, mesh = _build_mesh(config)
    buffer_cfg = config["buffer"]
    params = buffer_cfg["params"]
    if params is None:
        raise ConfigError("config key 'buffer.params' is required for check-buffer")
    pv = _param_vector(params)
    sl_grid = None
    if config["source_level_mode"] == "variable" and pv.sigma_s is not None:
        g = config["sl_grid"]
        sl_grid = SourceLevelGrid(g["lower"], g["upper"], g["step"])
    report = check_buffer(mesh, sensors, pv, config["t_r"], sl_grid=sl_grid,
                          m_min=config["m_min"], threshold=buffer_cfg["threshold"])
    io.write_json(out / "buffer.json", {
        "threshold": report.threshold,
        "max_boundary_probability": report.max_boundary_probability,
        "passed": report.passed,
        "n_boundary_cells": int(len(report.cell_ids)),
    })
    with open(out / "buffer_cells.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["cell_id", "easting", "northing", "probability", "passed"])
        for cid, prob, ok in zip(report.cell_ids, report.probabilities, report.cell_passed):
            w.writerow([int(cid), io._fmt(mesh.centroids[cid, 0]),
                        io._fmt(mesh.centroids[cid, 1]), io._fmt(prob), int(ok)])
    # A failed buffer check is a reported diagnostic, not a command failure.
    return EXIT_OK


_COMMANDS = {
    "fit": _run_fit,
    "simulate": _run_simulate,
    "scenarios": _run_scenarios,
    "bootstrap": _run_bootstrap,
    "select": _run_select,
    "check-buffer": _run_check_buffer,
}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="pamscr",
        description="Spatial capture-recapture call density estimation "
                    "from multi-sensor passive acoustic detections.")
    parser.add_argument("command", choices=sorted(_COMMANDS) + ["config-schema"])
    parser.add_argument("--config", help="path to the JSON run configuration")
    parser.add_argument("--out", default=".", help="output directory")
    parser.add_argument("--threads", type=int, default=1, help="worker processes")
    parser.add_argument("--seed", type=int, default=None, help="override the config seed")
    args = parser.parse_args(argv)

    if args.command == "config-schema":
        json.dump(CONFIG_SCHEMA, sys.stdout, indent=2, sort_keys=True)
        sys.stdout.write("\n")
        return EXIT_OK

    try:
        if args.config is None:
            raise ConfigError("--config is required")
        config = load_config(args.config)
        if args.seed is not None:
            config["seed"] = args.seed
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        return _COMMANDS[args.command](config, out, max(args.threads, 1))
    except (ConfigError, FormulaError) as exc:
        _report_error(args.command, exc, EXIT_CONFIG)
        return EXIT_CONFIG
    except DataError as exc:
        code = EXIT_NUMERICAL if _looks_numerical(exc) else EXIT_DATA
        _report_error(args.command, exc, code)
        return code
    except (np.linalg.LinAlgError, FloatingPointError, OverflowError) as exc:
        _report_error(args.command, exc, EXIT_NUMERICAL)
        return EXIT_NUMERICAL


def _looks_numerical(exc: Exception) -> bool:
    text = str(exc).lower()
    return any(word in text for word in
               ("likelihood", "converge", "start value", "quadrature", "widen"))


def _report_error(command: str, exc: Exception, code: int):
    json.dump({"command": command, "error": str(exc), "exit_code": code},
              sys.stderr, sort_keys=True)
    sys.stderr.write("\n")


if __name__ == "__main__":
    sys.exit(main())

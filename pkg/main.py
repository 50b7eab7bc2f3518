"""Batch front end: scenario generation, motor map fits, closed-loop runs,
noise sweeps and report/plot-data emission.

Every subcommand writes plain CSV/JSON/INI into ``--out``. A run is
reproducible from the ``*_config.ini`` snapshot written next to it.
"""
import argparse
import itertools
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
from pydantic import ValidationError

from utils.baseline_metrics import (
    MetricError,
    SplitRatio,
    ablation_energy,
    baseline_run,
    compute_r_soc,
    summarize_pair,
)
from utils.battery import PowerExceedsBatteryLimit
from utils.export_manager import (
    RunExporter,
    atomic_write,
    load_run,
    operating_points_series,
    powertrain_series,
    soc_series,
    trajectory_series,
)
from utils.models import RunMode
from utils.mpc import CollisionError, RunLog, VehicleSystem, audit_run, run_closed_loop, summarize_run
from utils.powertrain import fit_power_polynomial, generate_motor_map
from utils.schemas import ConfigError, RunConfig, load_config
from utils.traffic import Scenario, ScenarioValidationError, generate_corridor_scenario, load_scenario, save_scenario
from utils.visualization import (
    create_operating_points_chart,
    create_powertrain_chart,
    create_speed_soc_chart,
    create_summary_table,
    create_trajectory_chart,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CONFIG = 2
EXIT_SCENARIO = 3
EXIT_RUN_ABORT = 4

SWEEP_COLUMNS = [
    "sigma", "mu", "P_s", "seed", "R_SOC", "final_soc_ego", "final_soc_preceding",
    "collisions", "red_crossings", "solve_time_mean", "status",
]


# --- configuration ---------------------------------------------------------------------

def _updated(cfg: RunConfig, **changes) -> RunConfig:
    """Validated copy of ``cfg``; nested changes are given as dicts."""
    data = cfg.model_dump(mode="json")
    for key, value in changes.items():
        if isinstance(value, dict):
            target = data[key]
            for sub, sub_value in value.items():
                if isinstance(sub_value, dict):
                    target[sub].update(sub_value)
                else:
                    target[sub] = sub_value
        else:
            data[key] = value
    try:
        return RunConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(f"{exc.errors()[0]['loc']}: {exc.errors()[0]['msg']}") from exc


def _load_run_config(args) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    changes: Dict = {}
    if getattr(args, "out", None):
        changes["out"] = str(args.out)
    if getattr(args, "mode", None):
        changes["mode"] = args.mode
    if getattr(args, "scenario", None):
        changes["scenario"] = str(args.scenario)
    mpc: Dict = {}
    noise: Dict = {}
    if getattr(args, "seed", None) is not None:
        mpc["seed"] = args.seed
    for flag, key in (("sigma", "sigma"), ("mu", "mu"), ("shift", "P_s")):
        value = getattr(args, flag, None)
        if value is not None and not isinstance(value, list):
            noise[key] = value
    if noise:
        mpc["noise"] = noise
    if mpc:
        changes["mpc"] = mpc
    return _updated(cfg, **changes) if changes else cfg


def _build_system(cfg: RunConfig) -> VehicleSystem:
    return VehicleSystem.build(cfg.vehicle, cfg.battery, cfg.front, cfg.rear)


def _resolve_scenario(cfg: RunConfig, out_dir: Path, seed: int) -> Tuple[Scenario, RunConfig]:
    """Load the configured scenario, or generate and save a corridor.

    The returned config always points at a scenario on disk.
    """
    if cfg.scenario:
        scenario = load_scenario(cfg.scenario, cfg.signals, cfg.grade, v_max=cfg.vehicle.v_max)
    else:
        generated = generate_corridor_scenario(seed, cfg.corridor)
        directory = save_scenario(generated, out_dir / generated.name)
        cfg = _updated(cfg, scenario=str(directory))
        scenario = load_scenario(directory, v_max=cfg.vehicle.v_max)
    if abs(scenario.dt - cfg.mpc.dt) > 1e-9:
        raise ConfigError(f"scenario step {scenario.dt} s differs from mpc.dt {cfg.mpc.dt} s")
    return scenario, cfg


# --- runs ------------------------------------------------------------------------------

def _split_ratio(cfg: RunConfig) -> SplitRatio:
    return SplitRatio(cfg.split_front, cfg.split_rear)


def execute_run(cfg: RunConfig, scenario: Scenario, system: VehicleSystem) -> Tuple[RunLog, Dict]:
    """One run in ``cfg.mode``; returns the log and its summary."""
    if cfg.mode == RunMode.BASELINE:
        log = baseline_run(scenario, system, _split_ratio(cfg), initial_soc=cfg.mpc.initial_soc,
                           power_fraction=cfg.ocp.battery_power_fraction)
        return log, summarize_run(log)

    log = run_closed_loop(scenario, cfg.mpc, system, cfg.ocp)
    audit = audit_run(log, scenario, system.vehicle, system.battery, system.powertrain, cfg.horizon_ocp())
    summary = summarize_run(log, audit)
    if cfg.mode == RunMode.ABLATION:
        summary.update(ablation_energy(log, system, _split_ratio(cfg)))
        summary["mode"] = RunMode.ABLATION.value
    return log, summary


def cmd_gen_scenario(args) -> int:
    cfg = load_config(args.config) if args.config else RunConfig()
    scenario = generate_corridor_scenario(args.seed, cfg.corridor)
    directory = save_scenario(scenario, args.out)
    print(directory)
    return EXIT_OK


def cmd_fit_maps(args) -> int:
    cfg = load_config(args.config) if args.config else RunConfig()
    exporter = RunExporter(args.out)
    rows = []
    for position, spec in (("front", cfg.front), ("rear", cfg.rear)):
        power_map = generate_motor_map(spec)
        poly = fit_power_polynomial(power_map)
        exporter.write(exporter.export_table(power_map.to_frame(), f"map_{position}.csv"))
        peak = float(np.max(np.abs(power_map.p_elec)))
        rows.append({
            "motor": f"{position}_{spec.kind.value}",
            "RMSE": poly.rmse,
            "RMSE %": 100.0 * poly.rmse / peak,
            "R²": poly.r2,
            "n_terms": len(poly.coeffs),
        })
    path = exporter.write(exporter.export_table(rows, "fit_report.csv"))
    print(path)
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = _load_run_config(args)
    out_dir = Path(cfg.out)
    scenario, cfg = _resolve_scenario(cfg, out_dir, cfg.mpc.seed)
    system = _build_system(cfg)
    log, summary = execute_run(cfg, scenario, system)
    exporter = RunExporter(out_dir)
    name = f"{scenario.name}_{cfg.mode.value}"
    paths = exporter.save_run(log, summary, cfg, name)
    logger.info("run %s: final SOC %.6f, energy %.1f kJ", name, summary["final_soc"], summary["energy_J"] / 1e3)
    print(paths["summary"])
    return EXIT_OK


def _sweep_task(task) -> Dict:
    cfg, scenario, system, soc_preceding, sigma, mu, P_s, seed = task
    row = {"sigma": sigma, "mu": mu, "P_s": P_s, "seed": seed,
           "final_soc_preceding": soc_preceding}
    run_cfg = _updated(cfg, mode=RunMode.OPTIMAL.value,
                       mpc={"noise": {"sigma": sigma, "mu": mu, "P_s": P_s, "seed": seed}})
    try:
        log, summary = execute_run(run_cfg, scenario, system)
    except CollisionError as exc:
        row.update({"R_SOC": np.nan, "final_soc_ego": np.nan, "collisions": 1, "red_crossings": np.nan,
                    "solve_time_mean": np.nan, "status": f"collision at t={exc.t:.1f}"})
        return row
    tag = f"s{sigma:g}_m{mu:g}_p{P_s:g}_seed{seed}"
    RunExporter(Path(cfg.out) / "sweep").save_run(log, summary, run_cfg, f"{scenario.name}_{tag}")
    row.update({
        "R_SOC": compute_r_soc(log.final_soc, soc_preceding, log.initial_soc),
        "final_soc_ego": log.final_soc,
        "collisions": summary["collisions"],
        "red_crossings": summary["red_crossings"],
        "solve_time_mean": summary.get("solve_time_mean", np.nan),
        "status": "ok",
    })
    return row


def sweep_noise(cfg: RunConfig, scenario: Scenario, system: VehicleSystem, sigmas: List[float],
                mus: List[float], shifts: List[float], seeds: List[int], workers: int = 1) -> pd.DataFrame:
    """Closed-loop runs over the noise grid; one row per (sigma, mu, P_s, seed)."""
    baseline = baseline_run(scenario, system, _split_ratio(cfg), initial_soc=cfg.mpc.initial_soc,
                            power_fraction=cfg.ocp.battery_power_fraction)
    tasks = [(cfg, scenario, system, baseline.final_soc, sigma, mu, P_s, seed)
             for sigma, mu, P_s, seed in itertools.product(sigmas, mus, shifts, seeds)]
    logger.info("noise sweep on %s: %d runs on %d workers", scenario.name, len(tasks), workers)
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_sweep_task, tasks))
    else:
        rows = [_sweep_task(task) for task in tasks]
    return pd.DataFrame(rows, columns=SWEEP_COLUMNS)


def cmd_sweep_noise(args) -> int:
    cfg = _load_run_config(args)
    out_dir = Path(cfg.out)
    scenario, cfg = _resolve_scenario(cfg, out_dir, args.scenario_seed)
    system = _build_system(cfg)
    table = sweep_noise(cfg, scenario, system, args.sigma, args.mu, args.shift, args.seeds, args.workers)
    exporter = RunExporter(out_dir)
    path = exporter.write(exporter.export_table(table, "noise_sweep.csv"))
    print(path)
    return EXIT_OK


# --- report ----------------------------------------------------------------------------

def build_report_table(summaries: List[Dict]) -> pd.DataFrame:
    """Pair optimal and baseline summaries per scenario into one row each."""
    by_mode: Dict[str, Dict[str, Dict]] = {}
    for summary in summaries:
        by_mode.setdefault(summary["scenario"], {})[summary["mode"]] = summary
    rows = []
    for scenario in sorted(by_mode):
        runs = by_mode[scenario]
        baseline = runs.get(RunMode.BASELINE.value)
        optimal = runs.get(RunMode.OPTIMAL.value) or runs.get(RunMode.ABLATION.value)
        if baseline is None or optimal is None:
            logger.warning("report: %s lacks an optimal/baseline pair, skipped", scenario)
            continue
        ablation = runs.get(RunMode.ABLATION.value, {})
        try:
            rows.append(summarize_pair(optimal, baseline, ablation.get("R_m")))
        except MetricError as exc:
            logger.warning("report: %s: %s", scenario, exc)
    return pd.DataFrame(rows, columns=["scenario", "R_SOC", "R_m", "solve_time_mean", "duration",
                                       "final_soc_ego", "final_soc_preceding", "clamped_steps_preceding"])


def cmd_report(args) -> int:
    exporter = RunExporter(args.out)
    summaries = exporter.load_summaries(args.runs)
    if not summaries:
        raise ConfigError(f"no run summaries found in {args.runs}")
    table = build_report_table(summaries)
    exporter.write(exporter.export_table(table, "table_summary.csv"))

    runs = {(s["scenario"], s["mode"]): s["run"] for s in summaries}
    for scenario_name in sorted({s["scenario"] for s in summaries}):
        opt_name = runs.get((scenario_name, RunMode.OPTIMAL.value)) or runs.get((scenario_name, RunMode.ABLATION.value))
        if opt_name is None:
            continue
        log, cfg, _ = load_run(args.runs, opt_name)
        scenario = load_scenario(cfg.scenario, cfg.signals, cfg.grade, v_max=cfg.vehicle.v_max)
        base = None
        if (scenario_name, RunMode.BASELINE.value) in runs:
            base, _, _ = load_run(args.runs, runs[(scenario_name, RunMode.BASELINE.value)])
        system = _build_system(cfg)
        series = {
            "trajectory": trajectory_series(log, scenario),
            "soc": soc_series(log, base),
            "powertrain": powertrain_series(log),
            "operating_points": operating_points_series(log, system),
        }
        series_dir = RunExporter(Path(args.out) / scenario_name)
        for key, frame in series.items():
            series_dir.write(series_dir.export_table(frame, f"series_{key}.csv"))
        if args.html:
            figures = {
                "trajectory": create_trajectory_chart(series["trajectory"], title=scenario_name),
                "speed_soc": create_speed_soc_chart(series["soc"]),
                "powertrain": create_powertrain_chart(series["powertrain"]),
                "operating_points_front": create_operating_points_chart(
                    series["operating_points"], system.powertrain.front_map, motor="T_f"),
                "operating_points_rear": create_operating_points_chart(
                    series["operating_points"], system.powertrain.rear_map, motor="T_r"),
            }
            for key, fig in figures.items():
                atomic_write(series_dir.out_dir / f"{key}.html", fig.to_html(include_plotlyjs="cdn"))
    if args.html and len(table):
        atomic_write(Path(args.out) / "table_summary.html",
                     create_summary_table(table.to_dict("records")).to_html(include_plotlyjs="cdn"))
    print(Path(args.out) / "table_summary.csv")
    return EXIT_OK


# --- entry points ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ecodrive", description="Dual-motor EV eco-driving MPC simulator")
    parser.add_argument("--verbose", "-v", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-scenario", help="generate a synthetic signalized corridor")
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--config")
    gen.add_argument("--out", required=True, help="scenario directory")
    gen.set_defaults(func=cmd_gen_scenario)

    fit = sub.add_parser("fit-maps", help="generate and fit both motor maps")
    fit.add_argument("--config")
    fit.add_argument("--out", default="out")
    fit.set_defaults(func=cmd_fit_maps)

    run = sub.add_parser("run", help="one closed-loop or baseline run")
    run.add_argument("--config")
    run.add_argument("--scenario", help="scenario directory or CSV; a corridor is generated when omitted")
    run.add_argument("--mode", choices=[m.value for m in RunMode])
    run.add_argument("--seed", type=int)
    run.add_argument("--sigma", type=float)
    run.add_argument("--mu", type=float)
    run.add_argument("--shift", type=float, help="phase-shift range P_s in seconds")
    run.add_argument("--out")
    run.set_defaults(func=cmd_run)

    sweep = sub.add_parser("sweep-noise", help="grid of noisy closed-loop runs")
    sweep.add_argument("--config")
    sweep.add_argument("--scenario")
    sweep.add_argument("--scenario-seed", type=int, default=0, help="corridor seed when no scenario is given")
    sweep.add_argument("--sigma", type=float, nargs="+", default=[0.0])
    sweep.add_argument("--mu", type=float, nargs="+", default=[0.0])
    sweep.add_argument("--shift", type=float, nargs="+", default=[0.0])
    sweep.add_argument("--seeds", type=int, nargs="+", default=[0])
    sweep.add_argument("--workers", type=int, default=1)
    sweep.add_argument("--out")
    sweep.set_defaults(func=cmd_sweep_noise)

    report = sub.add_parser("report", help="summary table and plot-ready series")
    report.add_argument("--runs", required=True, help="directory holding run artifacts")
    report.add_argument("--out", required=True)
    report.add_argument("--html", action="store_true", help="also write plotly HTML figures")
    report.set_defaults(func=cmd_report)
    return parser


def _fail(kind: str, exc: Exception, code: int) -> int:
    message = " ".join(str(exc).split())
    print(f"error:{kind}:{message}", file=sys.stderr)
    return code


def run_command(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except ConfigError as exc:
        return _fail("config", exc, EXIT_CONFIG)
    except ScenarioValidationError as exc:
        return _fail("scenario", exc, EXIT_SCENARIO)
    except (CollisionError, PowerExceedsBatteryLimit) as exc:
        return _fail("run", exc, EXIT_RUN_ABORT)
    except Exception as exc:
        logger.debug("unhandled error", exc_info=True)
        return _fail(type(exc).__name__, exc, EXIT_ERROR)


def main(argv: Optional[List[str]] = None) -> int:
    return run_command(argv)


if __name__ == "__main__":
    sys.exit(main())

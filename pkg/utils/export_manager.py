"""Run artifacts: logs, summaries, configuration snapshots and plot series."""
import json
import logging
import os
import tempfile
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Tuple, Union

import numpy as np
import pandas as pd

from utils.models import RunMode, VehicleState
from utils.mpc import RunLog, VehicleSystem
from utils.powertrain import efficiency_at
from utils.schemas import RunConfig, dump_config, load_config
from utils.traffic import Scenario

logger = logging.getLogger(__name__)


def _to_builtin(value):
    if isinstance(value, np.generic):
        return value.item()
    raise TypeError(f"cannot serialize {type(value).__name__}")


def atomic_write(path: Union[str, Path], content: str) -> Path:
    """Write ``content`` so readers see either the old file or the complete new one."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with tempfile.NamedTemporaryFile("w", dir=path.parent, suffix=".tmp", delete=False, newline="") as handle:
        handle.write(content)
        tmp = handle.name
    os.replace(tmp, path)
    return path


class RunExporter:
    """Writes run artifacts into one output directory."""

    def __init__(self, out_dir: Union[str, Path]):
        self.out_dir = Path(out_dir)

    @staticmethod
    def run_name(log: RunLog, tag: Optional[str] = None) -> str:
        name = f"{log.scenario}_{log.mode.value}"
        return f"{name}_{tag}" if tag else name

    def export_runlog(self, log: RunLog, name: str, format: str = "csv") -> Dict:
        """Export the per-step log in the specified format."""
        if format.lower() == "csv":
            return {
                "content": log.frame.to_csv(index=False),
                "filename": f"{name}_runlog.csv",
                "mimetype": "text/csv",
            }
        elif format.lower() == "json":
            return {
                "content": log.frame.to_json(orient="records"),
                "filename": f"{name}_runlog.json",
                "mimetype": "application/json",
            }
        else:
            raise ValueError(f"Unsupported format: {format}")

    def export_summary(self, summary: Dict, name: str) -> Dict:
        return {
            "content": json.dumps(summary, indent=2, sort_keys=True, default=_to_builtin),
            "filename": f"{name}_summary.json",
            "mimetype": "application/json",
        }

    def export_config(self, cfg: RunConfig, name: str) -> Dict:
        """Configuration snapshot that reproduces the run."""
        return {
            "content": dump_config(cfg),
            "filename": f"{name}_config.ini",
            "mimetype": "text/plain",
        }

    def export_table(self, rows: Union[pd.DataFrame, Iterable[Dict]], filename: str) -> Dict:
        frame = rows if isinstance(rows, pd.DataFrame) else pd.DataFrame(list(rows))
        return {"content": frame.to_csv(index=False), "filename": filename, "mimetype": "text/csv"}

    def write(self, artifact: Dict) -> Path:
        path = atomic_write(self.out_dir / artifact["filename"], artifact["content"])
        logger.debug("wrote %s", path)
        return path

    def save_run(self, log: RunLog, summary: Dict, cfg: RunConfig, name: Optional[str] = None) -> Dict[str, Path]:
        """Runlog CSV, summary JSON and config snapshot for one run."""
        name = name or self.run_name(log)
        summary = {**summary, "run": name}
        return {
            "runlog": self.write(self.export_runlog(log, name)),
            "summary": self.write(self.export_summary(summary, name)),
            "config": self.write(self.export_config(cfg, name)),
        }

    def load_summaries(self, directory: Optional[Union[str, Path]] = None) -> List[Dict]:
        directory = Path(directory) if directory else self.out_dir
        return [json.loads(p.read_text()) for p in sorted(directory.glob("*_summary.json"))]


def load_runlog_frame(path: Union[str, Path]) -> pd.DataFrame:
    frame = pd.read_csv(path, float_precision="round_trip", keep_default_na=False,
                        na_values={"solve_time": [""], "iterations": [""], "gap": [""]})
    return frame


def load_run(directory: Union[str, Path], name: str) -> Tuple[RunLog, RunConfig, Dict]:
    """Rebuild a saved run from its runlog, summary and config snapshot."""
    directory = Path(directory)
    summary = json.loads((directory / f"{name}_summary.json").read_text())
    cfg = load_config(directory / f"{name}_config.ini")
    frame = load_runlog_frame(directory / f"{name}_runlog.csv")
    final = VehicleState(summary["final_d"], summary["final_v"], summary["final_soc"])
    mode = RunMode.BASELINE if summary["mode"] == RunMode.BASELINE.value else RunMode.OPTIMAL
    log = RunLog(frame, final, summary["scenario"], mode, cfg.mpc.dt, summary["initial_soc"],
                 clamped_steps=int(summary.get("clamped_steps", 0)))
    return log, cfg, summary


# --- plot-ready series -----------------------------------------------------------------

def trajectory_series(log: RunLog, scenario: Scenario) -> pd.DataFrame:
    """Ego and preceding positions with the red/green state of each stop line."""
    f = log.frame
    out = pd.DataFrame({"t": f["t"], "d_ego": f["d"], "d_preceding": f["d_p"], "gap": f["gap"]})
    for inter in scenario.intersections:
        out[f"{inter.id}_d_sig"] = inter.d_sig
        out[f"{inter.id}_red"] = [int(inter.is_red(float(t))) for t in f["t"]]
    return out


def soc_series(optimal: RunLog, baseline: Optional[RunLog] = None) -> pd.DataFrame:
    out = pd.DataFrame({"t": optimal.frame["t"], "soc_ego": optimal.frame["soc"], "v_ego": optimal.frame["v"]})
    if baseline is not None:
        base = baseline.frame.set_index("t")
        out["soc_preceding"] = base["soc"].reindex(out["t"].round(9).to_numpy(), method="nearest").to_numpy()
        out["v_preceding"] = base["v"].reindex(out["t"].round(9).to_numpy(), method="nearest").to_numpy()
    return out


def powertrain_series(log: RunLog) -> pd.DataFrame:
    f = log.frame
    total = f["T_f"] + f["T_r"]
    return pd.DataFrame({
        "t": f["t"], "v": f["v"], "a": f["a"], "T_f": f["T_f"], "T_r": f["T_r"],
        "T_total": total, "P_bat": f["P_bat"], "F_b": f["F_b"],
        "front_share": f["T_f"] / total.where(total.abs() > 1e-9),
    })


def operating_points_series(log: RunLog, system: VehicleSystem) -> pd.DataFrame:
    """Motor speed, torques and fitted efficiencies at every applied step."""
    f = log.frame
    pt = system.powertrain
    omega = np.minimum(system.vehicle.n * f["v"].to_numpy(), pt.omega_max)
    return pd.DataFrame({
        "t": f["t"],
        "omega": omega,
        "T_f": f["T_f"],
        "T_r": f["T_r"],
        "eta_f": efficiency_at(pt.poly_f, omega, f["T_f"].to_numpy()),
        "eta_r": efficiency_at(pt.poly_r, omega, f["T_r"].to_numpy()),
    })

"""
CSV and JSON report recording for allocations, optimizations and experiments.
"""
import json
from pathlib import Path
from threading import Lock
from typing import Dict, Iterable, List, Optional, Union

import numpy as np
import pandas as pd
from loguru import logger

from engines.allocation import AllocationResult, roc
from engines.optimizer import OptimizationOutcome
from models.errors import OutputError
from models.portfolio import Portfolio

FLOAT_FORMAT = "%.10g"


class ReportWriter:
    """Writes report files into one output directory and remembers what it wrote"""

    def __init__(self, out_dir: Union[str, Path]):
        self.out_dir = Path(out_dir)
        self.write_lock = Lock()
        self.written: List[Path] = []
        try:
            self.out_dir.mkdir(parents=True, exist_ok=True)
        except OSError as e:
            raise OutputError(f"cannot create output directory {self.out_dir}: {e}") from e

    def _record(self, path: Path):
        with self.write_lock:
            if path not in self.written:
                self.written.append(path)

    def write_frame(self, name: str, frame: pd.DataFrame) -> Path:
        """Write one CSV table named <name>.csv"""
        path = self.out_dir / f"{name}.csv"
        try:
            frame.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
        except OSError as e:
            raise OutputError(f"cannot write {path}: {e}") from e
        logger.debug(f"💾 Wrote {path} ({len(frame)} rows)")
        self._record(path)
        return path

    def write_frames(self, frames: Dict[str, pd.DataFrame]) -> List[Path]:
        return [self.write_frame(name, frame) for name, frame in frames.items()]

    def write_manifest(self, experiments: Iterable[str], seed: int, samples: Optional[int]) -> Path:
        """manifest.json listing the files of this run; no timestamps so reruns are identical"""
        path = self.out_dir / "manifest.json"
        document = {
            "experiments": list(experiments),
            "seed": seed,
            "samples": samples,
            "files": [p.name for p in self.written if p != path],
        }
        try:
            path.write_text(json.dumps(document, indent=2, sort_keys=True) + "\n")
        except OSError as e:
            raise OutputError(f"cannot write {path}: {e}") from e
        self._record(path)
        return path


def summary_frame(values: Dict[str, object]) -> pd.DataFrame:
    return pd.DataFrame({"key": list(values.keys()), "value": list(values.values())})


def allocation_frames(portfolio: Portfolio, result: AllocationResult) -> Dict[str, pd.DataFrame]:
    """Per-unit allocation table and, when the method has exchange rates, a summary table"""
    method = result.allocation.method.value
    values = result.allocation.values
    table = pd.DataFrame({
        "unit_id": portfolio.ids,
        "rwa_capital": portfolio.rwa,
        "lbs_capital": portfolio.lbs,
        "revenue": portfolio.revenue,
        "allocation": values,
    })
    if result.allocation.stderr is not None:
        table["stderr"] = result.allocation.stderr
    table["roc"] = roc(portfolio.revenue, values)
    table["method"] = method

    frames = {f"allocation_{method}": table}
    summary = {"method": method, "total": result.allocation.total, "units": portfolio.n}
    if result.estimate is not None:
        summary["samples"] = result.estimate.samples
        summary["total_stderr"] = result.estimate.total_stderr
    if result.stats is not None:
        summary.update(mu_s=result.stats.mu_s, sigma_s=result.stats.sigma_s, p=result.stats.p)
    if result.rates is not None:
        summary["beta"] = result.rates.beta
        for label, weight in zip(result.rates.labels, result.rates.weights):
            summary[f"w_{label}"] = weight
    frames[f"allocation_{method}_summary"] = summary_frame(summary)
    return frames


def optimization_frames(outcome: OptimizationOutcome) -> Dict[str, pd.DataFrame]:
    """Component table (h, w, r, delta, new h, unit change) plus the solver summary"""
    problem, solution = outcome.problem, outcome.solution
    unit_change = np.repeat(outcome.unit_change, 2)
    table = pd.DataFrame({
        "component_id": outcome.component_ids,
        "h": problem.h,
        "w": problem.w,
        "r": problem.r,
        "delta": solution.delta,
        "new_h": problem.h + solution.delta,
        "threshold": outcome.thresholds,
        "unit_allocation_change": unit_change,
    })
    summary = summary_frame({
        "solver": solution.solver,
        "epsilon": problem.epsilon,
        "z": problem.z,
        "lambda": solution.lam,
        "capital_change": solution.capital_change,
        "allocation_change": float(outcome.unit_change.sum()),
        "kkt_stationarity": solution.kkt_stationarity,
        "constraint_residual": solution.constraint_residual,
        "mahalanobis": solution.mahalanobis,
        "flagged_units": ";".join(outcome.flagged),
    })
    return {"optimization": table, "optimization_summary": summary}

"""
Ablation Sweeps
===============

Runs a grid of config overrides, each cell over several seeds, as isolated
jobs (one process per job when workers > 1), then aggregates per-seed and
mean target mIoU / ECE into one comparison table.

Sweep spec (JSON):
    {
      "base_config": {... or "path/to/config.json"},
      "grid": {"dacal.use_mtn_ema": [true, false], "dacal.use_warmup": [true, false]},
      "seeds": [0, 1, 2],
      "dataset_seed": 0,
      "eval_mode": "auto"
    }
"""

import itertools
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Union

import pandas as pd

from config import ExperimentConfig, apply_overrides, load_config
from errors import ConfigurationError
from evaluation import EVAL_MODES, evaluate
from experiment_runner import DomainAdaptationRunner
from shift_shapes import make_benchmark

MIN_SEEDS = 3


@dataclass
class SweepSpec:
    base_config: Dict[str, Any]
    grid: Dict[str, List[Any]]
    seeds: List[int] = field(default_factory=lambda: [0, 1, 2])
    dataset_seed: int = 0
    eval_mode: str = "auto"

    def validate(self) -> "SweepSpec":
        if len(set(self.seeds)) < MIN_SEEDS:
            raise ConfigurationError(f"a sweep needs at least {MIN_SEEDS} distinct seeds, got {self.seeds}")
        if not self.grid or any(not values for values in self.grid.values()):
            raise ConfigurationError("every grid key needs at least one value")
        if self.eval_mode != "auto" and self.eval_mode not in EVAL_MODES:
            raise ConfigurationError(f"unknown eval_mode {self.eval_mode!r}")
        base = ExperimentConfig.from_dict(self.base_config)
        for cell in self.cells():
            apply_overrides(base, cell)
        return self

    def cells(self) -> List[Dict[str, Any]]:
        """Cross-product of the grid, in the order the keys were given"""
        keys = list(self.grid)
        return [dict(zip(keys, values)) for values in itertools.product(*(self.grid[k] for k in keys))]


def load_sweep(path) -> SweepSpec:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"sweep spec not found: {path}")
    with open(path, "r", encoding="utf-8") as f:
        data = json.load(f)
    base = data.get("base_config", {})
    if isinstance(base, str):
        base = load_config(str(path.parent / base)).to_dict()
    unknown = set(data) - {"base_config", "grid", "seeds", "dataset_seed", "eval_mode"}
    if unknown:
        raise ConfigurationError(f"unknown sweep keys {sorted(unknown)}")
    return SweepSpec(base_config=base, grid=data.get("grid", {}),
                     seeds=data.get("seeds", [0, 1, 2]), dataset_seed=data.get("dataset_seed", 0),
                     eval_mode=data.get("eval_mode", "auto")).validate()


def resolve_eval_mode(mode: str, variant: str) -> str:
    if mode != "auto":
        return mode
    return "dacal_ph" if variant == "PH" else "nocalib"


def create_sweep_jobs(spec: SweepSpec, out_dir) -> List[Dict[str, Any]]:
    """One job per (cell, seed)"""
    jobs = []
    for cell_index, overrides in enumerate(spec.cells()):
        for seed in spec.seeds:
            jobs.append({
                "job_id": f"cell{cell_index}_seed{seed}",
                "cell": cell_index,
                "overrides": overrides,
                "seed": seed,
                "base_config": spec.base_config,
                "dataset_seed": spec.dataset_seed,
                "eval_mode": spec.eval_mode,
                "run_dir": str(Path(out_dir) / f"cell{cell_index}_seed{seed}"),
                "status": "created",
                "created_at": datetime.now().isoformat(),
            })
    return jobs


def run_sweep_job(job: Dict[str, Any]) -> Dict[str, Any]:
    """Train and evaluate one (cell, seed); never raises, failures land in the status"""
    result = dict(job)
    result["started_at"] = datetime.now().isoformat()
    try:
        base = ExperimentConfig.from_dict(job["base_config"])
        config = apply_overrides(base, {**job["overrides"], "seed": job["seed"]})
        benchmark = make_benchmark(config.dataset, job["dataset_seed"])
        runner = DomainAdaptationRunner(config, benchmark, job["run_dir"], verbose=False)
        runner.run(resume=False)
        mode = resolve_eval_mode(job["eval_mode"], config.variant)
        evaluation = evaluate([runner.last_checkpoint], benchmark, mode=mode, out_dir=job["run_dir"])
        result.update({"status": "completed", "eval_mode": mode,
                       "miou": evaluation.report.miou, "ece": evaluation.report.macro["ece"]})
    except Exception as e:
        result.update({"status": "error", "error": f"{type(e).__name__}: {e}",
                       "miou": float("nan"), "ece": float("nan")})
    result["completed_at"] = datetime.now().isoformat()
    return result


def aggregate(spec: SweepSpec, results: List[Dict[str, Any]]) -> pd.DataFrame:
    """One row per grid cell: the cell's settings, per-seed mIoU/ECE, and their means"""
    frame = pd.DataFrame(results)
    rows = []
    for cell_index, overrides in enumerate(spec.cells()):
        members = frame[frame["cell"] == cell_index].set_index("seed")
        row: Dict[str, Any] = {"cell": cell_index, **overrides}
        for seed in spec.seeds:
            row[f"miou_seed{seed}"] = members.loc[seed, "miou"] if seed in members.index else float("nan")
            row[f"ece_seed{seed}"] = members.loc[seed, "ece"] if seed in members.index else float("nan")
        row["miou_mean"] = members["miou"].mean()
        row["ece_mean"] = members["ece"].mean()
        row["failed_runs"] = int((members["status"] != "completed").sum())
        rows.append(row)
    return pd.DataFrame(rows)


def run_sweep(spec: Union[SweepSpec, str, Path], out_dir, workers: int = 1, verbose: bool = True) -> pd.DataFrame:
    """Run every job, write jobs.csv and ablation_table.csv, return the table"""
    if not isinstance(spec, SweepSpec):
        spec = load_sweep(spec)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    jobs = create_sweep_jobs(spec, out_dir)

    if verbose:
        print(f"🚀 Ablation sweep: {len(spec.cells())} cells x {len(spec.seeds)} seeds = {len(jobs)} runs")
        print("=" * 70)

    results = []
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for result in pool.map(run_sweep_job, jobs):
                results.append(result)
                if verbose:
                    _report(result, len(results), len(jobs))
    else:
        for job in jobs:
            result = run_sweep_job(job)
            results.append(result)
            if verbose:
                _report(result, len(results), len(jobs))

    job_frame = pd.DataFrame(results).drop(columns=["base_config"])
    job_frame["overrides"] = job_frame["overrides"].map(lambda o: json.dumps(o, sort_keys=True))
    job_frame.to_csv(out_dir / "jobs.csv", index=False, float_format="%.10g")
    table = aggregate(spec, results)
    table_path = out_dir / "ablation_table.csv"
    table.to_csv(table_path, index=False, float_format="%.10g")
    if verbose:
        print(f"💾 Saved: {table_path}")
    return table


def _report(result: Dict[str, Any], done: int, total: int) -> None:
    if result["status"] == "completed":
        print(f"✅ [{done}/{total}] {result['job_id']}: mIoU {result['miou']:.4f}, ECE {result['ece']:.4f}")
    else:
        print(f"❌ [{done}/{total}] {result['job_id']}: {result.get('error')}")

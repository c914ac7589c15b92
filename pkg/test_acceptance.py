"""
Desk-scale adaptation runs on the default ShiftShapes benchmark

These take tens of minutes on a CPU; run them with `pytest -m slow`.
"""

from pathlib import Path

import numpy as np
import pytest
import torch

from config import apply_overrides, load_config
from evaluation import calibrated_probabilities, evaluate, load_run, predict_logits
from experiment_runner import DomainAdaptationRunner
from shift_shapes import make_benchmark

CONFIG_DIR = Path(__file__).parent / "configs"
SEEDS = (0, 1, 2)
RUNS = {
    "noadapt": ("desk_noadapt.json", "nocalib"),
    "baseline": ("desk_baseline.json", "nocalib"),
    "ph": ("desk_ph.json", "dacal_ph"),
    "bi": ("desk_bi.json", "dacal_bi"),
}


@pytest.fixture(scope="module")
def desk_results(tmp_path_factory):
    """Seed-averaged target/source mIoU and ECE for every desk configuration"""
    root = tmp_path_factory.mktemp("desk")
    benchmark = make_benchmark(load_config().dataset, seed=0)
    results = {}
    for name, (config_file, mode) in RUNS.items():
        per_seed = []
        for seed in SEEDS:
            config = apply_overrides(load_config(str(CONFIG_DIR / config_file)), {"seed": seed})
            runner = DomainAdaptationRunner(config, benchmark, root / f"{name}_{seed}", verbose=False)
            runner.run(resume=False)
            target = evaluate([runner.last_checkpoint], benchmark, mode=mode).report
            source = evaluate([runner.last_checkpoint], benchmark, mode="nocalib", domain="source").report
            per_seed.append((target.miou, target.macro["ece"], source.miou, runner.last_checkpoint))
        results[name] = {
            "target_miou": float(np.mean([r[0] for r in per_seed])),
            "target_ece": float(np.mean([r[1] for r in per_seed])),
            "source_miou": float(np.mean([r[2] for r in per_seed])),
            "checkpoints": [r[3] for r in per_seed],
        }
    return benchmark, results


@pytest.mark.slow
def test_benchmark_has_a_domain_gap(desk_results):
    _, results = desk_results
    noadapt = results["noadapt"]
    assert noadapt["source_miou"] - noadapt["target_miou"] >= 0.05


@pytest.mark.slow
def test_self_training_beats_source_only(desk_results):
    _, results = desk_results
    assert results["baseline"]["target_miou"] > results["noadapt"]["target_miou"]


@pytest.mark.slow
def test_ph_reduces_target_ece_without_losing_miou(desk_results):
    _, results = desk_results
    baseline, ph = results["baseline"], results["ph"]
    assert ph["target_ece"] <= 0.8 * baseline["target_ece"]
    assert ph["target_miou"] >= baseline["target_miou"] - 0.01


@pytest.mark.slow
def test_bi_is_close_to_ph_at_no_inference_cost(desk_results):
    benchmark, results = desk_results
    assert results["bi"]["target_ece"] <= 1.25 * results["ph"]["target_ece"]

    images = benchmark.target_val.image_tensor()
    for checkpoint in results["bi"]["checkpoints"]:
        run = load_run(checkpoint)
        logits = predict_logits(run.student, images)
        probs, fitted = calibrated_probabilities("dacal_bi", [run], benchmark, benchmark.target_val)
        assert fitted is None
        assert torch.equal(probs.argmax(dim=1), logits.argmax(dim=1))

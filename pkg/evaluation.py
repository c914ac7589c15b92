"""
Calibration Evaluation
======================

Scores a trained checkpoint under one calibration mode and writes a
class-balanced report, a reliability-bin export and (for fitted modes) the
temperature record.

Modes:
    nocalib       raw softmax
    tempscal_src  global temperature fitted on the held-out source split
    ensemble      logits averaged over several checkpoints
    pseudocal     global temperature fitted on mixup pseudo-targets
    dacal_ph      per-pixel temperatures from the trained MTN
    dacal_bi      raw softmax of a model trained with the BI loss
    oracle        global temperature fitted on labeled target validation
"""

from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from calibrators import GlobalTemperature, apply_temperature, ensemble_probs, fit_global_temperature, pseudocal_fit
from config import ExperimentConfig
from dacal_meta import infer_ph
from errors import ConfigurationError
from metrics import CalibrationReport, class_balanced_report, reliability_diagram_export
from models import MetaTemperatureNet, SegNet
from self_training import load_checkpoint
from shift_shapes import Benchmark, SegmentationSplit

EVAL_MODES = ("nocalib", "tempscal_src", "ensemble", "pseudocal", "dacal_ph", "dacal_bi", "oracle")
EVAL_DOMAINS = ("target", "source")


@dataclass
class LoadedRun:
    """Networks rebuilt from one checkpoint"""
    config: ExperimentConfig
    student: SegNet
    calibrator: Optional[MetaTemperatureNet]
    config_hash: str
    path: Path


@dataclass
class EvaluationResult:
    report: CalibrationReport
    mode: str
    domain: str
    temperature: Optional[GlobalTemperature] = None
    files: Dict[str, str] = field(default_factory=dict)


def predict_logits(model, images: torch.Tensor, batch_size: int = 32) -> torch.Tensor:
    """Eval-mode logits in batches, no gradients"""
    model.eval()
    parts = []
    with torch.no_grad():
        for start in range(0, images.shape[0], batch_size):
            parts.append(model(images[start:start + batch_size]))
    return torch.cat(parts)


def predict_ph(student: SegNet, calibrator: MetaTemperatureNet, images: torch.Tensor,
               batch_size: int = 32) -> torch.Tensor:
    """DA-Cal PH probabilities in batches"""
    return torch.cat([infer_ph(student, calibrator, images[start:start + batch_size])
                      for start in range(0, images.shape[0], batch_size)])


def to_class_last(probs: torch.Tensor) -> np.ndarray:
    """N x C x H x W tensor -> N x H x W x C float64 array"""
    return probs.detach().permute(0, 2, 3, 1).to(torch.float64).cpu().numpy()


def load_run(path) -> LoadedRun:
    """Rebuild the student and the inference-time MTN stored in a checkpoint"""
    path = Path(path)
    payload = load_checkpoint(path)
    config = ExperimentConfig.from_dict(payload["extra"]["config"])
    student = SegNet(config.dataset.num_classes)
    student.load_state_dict(payload["student"])
    student.eval()

    calibrator = None
    saved = payload.get("mtn_ema") or payload.get("mtn")
    if saved is not None:
        dc = config.dacal
        calibrator = MetaTemperatureNet(config.dataset.num_classes, hidden=dc.mtn_hidden,
                                        num_layers=dc.mtn_layers, kernel_size=dc.mtn_kernel,
                                        init_temperature=dc.init_temperature)
        calibrator.load_state_dict(saved)
        calibrator.eval()
    return LoadedRun(config=config, student=student, calibrator=calibrator,
                     config_hash=payload["config_hash"], path=path)


def _check_compatible(run: LoadedRun, benchmark: Benchmark) -> None:
    ds = run.config.dataset
    height, width = benchmark.target_val.images.shape[1:3]
    if ds.num_classes != benchmark.num_classes or (ds.height, ds.width) != (height, width):
        raise ConfigurationError(
            f"checkpoint {run.path.name} expects C={ds.num_classes}, {ds.height}x{ds.width}; "
            f"dataset has C={benchmark.num_classes}, {height}x{width}")


def evaluation_split(benchmark: Benchmark, run: LoadedRun, domain: str) -> SegmentationSplit:
    if domain == "target":
        return benchmark.target_val
    if domain == "source":
        _, holdout = benchmark.source_partition(run.config.dataset.source_holdout_fraction)
        return benchmark.source_train.subset(holdout, name="source_holdout")
    raise ConfigurationError(f"unknown evaluation domain {domain!r}; choose from {EVAL_DOMAINS}")


def calibrated_probabilities(mode: str, runs: Sequence[LoadedRun], benchmark: Benchmark,
                             split: SegmentationSplit) -> Tuple[torch.Tensor, Optional[GlobalTemperature]]:
    """Probabilities on the evaluation split under one calibration mode"""
    if mode not in EVAL_MODES:
        raise ConfigurationError(f"unknown evaluation mode {mode!r}; choose from {EVAL_MODES}")
    if not runs:
        raise ConfigurationError("no checkpoint given")
    run = runs[0]
    seed = run.config.seed
    images = split.image_tensor()

    if mode == "ensemble":
        if len(runs) < 2:
            raise ConfigurationError("ensemble mode needs at least two checkpoints")
        return ensemble_probs([predict_logits(r.student, images) for r in runs]), None

    if len(runs) > 1:
        raise ConfigurationError(f"{mode} evaluates a single checkpoint, got {len(runs)}")
    logits = predict_logits(run.student, images)

    if mode == "nocalib":
        return F.softmax(logits, dim=1), None

    if mode == "dacal_bi":
        if run.config.variant != "BI":
            raise ConfigurationError(f"dacal_bi needs a BI-trained checkpoint, got variant {run.config.variant!r}")
        return F.softmax(logits, dim=1), None

    if mode == "dacal_ph":
        if run.calibrator is None:
            raise ConfigurationError(f"checkpoint {run.path.name} carries no meta temperature network")
        return predict_ph(run.student, run.calibrator, images), None

    if mode == "tempscal_src":
        _, holdout = benchmark.source_partition(run.config.dataset.source_holdout_fraction)
        source = benchmark.source_train
        fitted = fit_global_temperature(predict_logits(run.student, source.image_tensor(holdout)),
                                        source.label_tensor(holdout), method="tempscal_src", seed=seed)
    elif mode == "pseudocal":
        fitted = pseudocal_fit(run.student, benchmark.target_train.image_tensor(),
                               np.random.default_rng([seed, 11]),
                               beta_param=run.config.evaluation.pseudocal_beta, seed=seed)
    else:
        val = benchmark.target_val
        fitted = fit_global_temperature(predict_logits(run.student, val.image_tensor()),
                                        val.label_tensor(), method="oracle", seed=seed)
    return apply_temperature(logits, fitted), fitted


def evaluate(checkpoints: Sequence, benchmark: Benchmark, mode: str = "nocalib", domain: str = "target",
             out_dir=None, verbose: bool = False) -> EvaluationResult:
    """
    Class-balanced calibration report for one checkpoint (or several, for
    ensemble mode) under one calibration mode

    Writes report_<mode>_<domain>.csv, reliability_<mode>_<domain>.csv and,
    for fitted modes, temperature_<mode>.json into out_dir when given.
    """
    runs: List[LoadedRun] = [load_run(p) for p in checkpoints]
    for run in runs:
        _check_compatible(run, benchmark)
    split = evaluation_split(benchmark, runs[0], domain)
    probs, temperature = calibrated_probabilities(mode, runs, benchmark, split)

    ev = runs[0].config.evaluation
    report = class_balanced_report(
        to_class_last(probs), split.labels, benchmark.num_classes,
        num_bins=ev.num_bins, n_per_image=ev.pixels_per_image,
        rng=np.random.default_rng([runs[0].config.seed, 7]), exclude_classes=ev.exclude_classes,
    )
    report.metadata = {"mode": mode, "domain": domain,
                       "config_hash": "+".join(r.config_hash for r in runs),
                       "dataset_fingerprint": benchmark.fingerprint()}
    result = EvaluationResult(report=report, mode=mode, domain=domain, temperature=temperature)

    if verbose:
        print(f"📊 {mode} on {domain}: mIoU {report.miou:.4f}, ECE {report.macro['ece']:.4f}, "
              f"NLL {report.macro['nll']:.4f}, Brier {report.macro['brier']:.4f}")
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        report_path = out_dir / f"report_{mode}_{domain}.csv"
        bins_path = out_dir / f"reliability_{mode}_{domain}.csv"
        report.to_csv(report_path)
        reliability_diagram_export(report.pooled_bins).to_csv(bins_path, index=False, float_format="%.10g")
        result.files = {"report": str(report_path), "reliability": str(bins_path)}
        if temperature is not None:
            temp_path = temperature.save(out_dir / f"temperature_{mode}.json")
            result.files["temperature"] = str(temp_path)
        if verbose:
            for path in result.files.values():
                print(f"💾 Saved: {path}")
    return result

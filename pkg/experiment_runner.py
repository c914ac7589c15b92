"""
Domain Adaptation Experiment Runner
===================================

Drives one training run end to end:

- samples source/target batches from a ShiftShapes benchmark
- runs the self-training or DA-Cal step per iteration
- streams per-iteration diagnostics to train_log.csv
- evaluates on the labeled target validation split every eval_every steps
- keeps checkpoint_last.pt and checkpoint_best.pt (best target mIoU)
- resumes from the last checkpoint, including the RNG streams
"""

import csv
import json
import time
from datetime import datetime
from pathlib import Path
from typing import Dict, Optional

import numpy as np
import torch.nn.functional as F

from config import ExperimentConfig
from dacal_meta import dacal_step
from errors import TrainingFault
from evaluation import predict_logits, to_class_last
from metrics import class_balanced_report
from self_training import (DIAGNOSTIC_KEYS, TrainState, baseline_step, build_train_state, load_checkpoint,
                           restore_train_state, save_checkpoint)
from shift_shapes import Benchmark

EVAL_KEYS = ("iteration", "miou", "ece", "nll", "brier")


class DomainAdaptationRunner:
    """One training run over a generated benchmark"""

    def __init__(self, config: ExperimentConfig, benchmark: Benchmark, output_dir="runs/default",
                 verbose: bool = True, log_every: int = 10):
        """
        Args:
            config: validated experiment config
            benchmark: source/target splits (target_train labels are never read)
            output_dir: run directory for logs, checkpoints and the manifest
            verbose: print progress lines
            log_every: iterations between progress lines
        """
        self.config = config
        self.benchmark = benchmark
        self.output_dir = Path(output_dir)
        self.verbose = verbose
        self.log_every = max(1, log_every)

        self.config_hash = config.config_hash()
        self.state: TrainState = build_train_state(config)
        self.train_indices, self.holdout_indices = benchmark.source_partition(
            config.dataset.source_holdout_fraction)
        self.best_miou = float("-inf")
        self.best_iteration: Optional[int] = None
        self.status = "created"
        self.start_time = None

        self.output_dir.mkdir(parents=True, exist_ok=True)
        self.train_log = self.output_dir / "train_log.csv"
        self.eval_log = self.output_dir / "eval_log.csv"
        self.last_checkpoint = self.output_dir / "checkpoint_last.pt"
        self.best_checkpoint = self.output_dir / "checkpoint_best.pt"
        self.manifest_file = self.output_dir / "manifest.json"

    def _log(self, message: str) -> None:
        if self.verbose:
            print(message)

    def _extra(self) -> Dict:
        return {"variant": self.config.variant, "config": self.config.to_dict(),
                "best_miou": self.best_miou, "best_iteration": self.best_iteration,
                "dataset_fingerprint": self.benchmark.fingerprint()}

    def save_state(self):
        """Write checkpoint_last.pt and refresh the manifest"""
        save_checkpoint(self.state, self.last_checkpoint, self.config_hash, self._extra())
        self.write_manifest()

    def load_state(self) -> bool:
        """Resume from checkpoint_last.pt if it belongs to this config"""
        if not self.last_checkpoint.exists():
            return False
        try:
            payload = load_checkpoint(self.last_checkpoint)
        except (OSError, ValueError, RuntimeError) as e:
            self._log(f"⚠️  Failed to load checkpoint: {e}")
            return False
        if payload.get("config_hash") != self.config_hash:
            self._log("⚠️  Checkpoint belongs to a different config; starting fresh")
            return False

        restore_train_state(self.state, payload)
        extra = payload.get("extra", {})
        self.best_miou = extra.get("best_miou", float("-inf"))
        self.best_iteration = extra.get("best_iteration")
        self._truncate_log(self.train_log, self.state.iteration)
        self._truncate_log(self.eval_log, self.state.iteration)
        self._log(f"📁 Resumed at iteration {self.state.iteration}/{self.state.total_iterations}")
        return True

    @staticmethod
    def _truncate_log(path: Path, iteration: int) -> None:
        """Drop rows written after the checkpoint so a resumed run appends cleanly"""
        if not path.exists():
            return
        with open(path, "r", newline="") as f:
            rows = list(csv.reader(f))
        if not rows:
            return
        kept = [rows[0]] + [r for r in rows[1:] if r and int(r[0]) <= iteration]
        with open(path, "w", newline="") as f:
            csv.writer(f).writerows(kept)

    def sample_batch(self):
        """Source images with labels and unlabeled target images for one step"""
        rng, size = self.state.rng, self.config.batch_size
        src = rng.choice(self.train_indices, size=size, replace=len(self.train_indices) < size)
        n_target = len(self.benchmark.target_train)
        tgt = rng.choice(n_target, size=size, replace=n_target < size)
        source = self.benchmark.source_train
        return (source.image_tensor(src), source.label_tensor(src),
                self.benchmark.target_train.image_tensor(tgt))

    def train_step(self) -> Dict[str, float]:
        source_images, source_labels, target_images = self.sample_batch()
        step = baseline_step if self.config.variant == "none" else dacal_step
        return step(self.state, source_images, source_labels, target_images, self.config)

    def evaluate_target(self) -> Dict[str, float]:
        """Raw-softmax metrics of the student on the labeled target validation split"""
        split = self.benchmark.target_val
        logits = predict_logits(self.state.student, split.image_tensor())
        probs = to_class_last(F.softmax(logits, dim=1))
        report = class_balanced_report(
            probs, split.labels, self.config.dataset.num_classes,
            num_bins=self.config.evaluation.num_bins,
            n_per_image=self.config.evaluation.pixels_per_image,
            rng=np.random.default_rng([self.config.seed, 7]),
            exclude_classes=self.config.evaluation.exclude_classes,
        )
        return {"iteration": self.state.iteration, "miou": report.miou, **report.macro}

    def _append(self, path: Path, keys, row: Dict) -> None:
        new_file = not path.exists() or path.stat().st_size == 0
        with open(path, "a", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=list(keys))
            if new_file:
                writer.writeheader()
            writer.writerow({k: row[k] for k in keys})

    def run(self, resume: bool = True) -> Dict:
        """Main training loop"""
        resumed = self.load_state() if resume else False
        if not resumed:
            for path in (self.train_log, self.eval_log):
                path.unlink(missing_ok=True)

        self.start_time = time.time()
        self.status = "running"
        total = self.state.total_iterations

        self._log(f"🚀 Starting training: variant={self.config.variant}, seed={self.config.seed}")
        self._log(f"📁 Output directory: {self.output_dir}")
        self._log(f"⚙️  Iterations: {total}, batch size: {self.config.batch_size}, "
                  f"mixing: {self.config.mixing_strategy}")
        self._log("=" * 70)

        try:
            while self.state.iteration < total:
                diagnostics = self.train_step()
                self._append(self.train_log, DIAGNOSTIC_KEYS, diagnostics)
                t = self.state.iteration

                if t % self.log_every == 0 or t == total:
                    elapsed = time.time() - self.start_time
                    self._log(f"📊 Iteration {t}/{total} ({100.0 * t / total:.1f}%) - "
                              f"L_s {diagnostics['L_s']:.4f}, L_u {diagnostics['L_u_hard']:.4f}, "
                              f"q {diagnostics['q_mean']:.3f}, T {diagnostics['mean_T']:.3f} - {elapsed:.1f}s")

                if t % self.config.eval_every == 0 or t == total:
                    scores = self.evaluate_target()
                    self._append(self.eval_log, EVAL_KEYS, scores)
                    self._log(f"🎯 Target val: mIoU {scores['miou']:.4f}, ECE {scores['ece']:.4f}")
                    if scores["miou"] > self.best_miou:
                        self.best_miou, self.best_iteration = scores["miou"], t
                        save_checkpoint(self.state, self.best_checkpoint, self.config_hash, self._extra())
                        self._log(f"💾 New best checkpoint at iteration {t}")
                    self.save_state()
                    self._log("-" * 70)

            self.status = "completed"
            self.save_state()
            self._log("✅ Training completed")
            return self.generate_summary()

        except KeyboardInterrupt:
            self._log("\n⏹️  Training interrupted by user")
            self.status = "interrupted"
            self.save_state()
            return self.generate_summary()

        except TrainingFault as e:
            self._log(f"❌ Training fault: {e}")
            self.status = "failed"
            self.write_manifest(error=str(e))
            raise

    def write_manifest(self, error: Optional[str] = None) -> None:
        manifest = {}
        if self.manifest_file.exists():
            with open(self.manifest_file, "r", encoding="utf-8") as f:
                manifest = json.load(f)
        manifest.update({
            "config": self.config.to_dict(),
            "config_hash": self.config_hash,
            "dataset_fingerprint": self.benchmark.fingerprint(),
            "seed": self.config.seed,
            "variant": self.config.variant,
            "status": self.status,
            "iteration": self.state.iteration,
            "checkpoints": {"last": self.last_checkpoint.name,
                            "best": self.best_checkpoint.name if self.best_iteration is not None else None},
            "results": {**manifest.get("results", {}),
                        "train_log": self.train_log.name, "eval_log": self.eval_log.name},
            "updated": datetime.now().isoformat(),
        })
        manifest.setdefault("created", manifest["updated"])
        if error:
            manifest["error"] = error
        with open(self.manifest_file, "w", encoding="utf-8") as f:
            json.dump(manifest, f, indent=2)

    def generate_summary(self) -> Dict:
        elapsed = time.time() - self.start_time if self.start_time else 0
        return {
            "variant": self.config.variant,
            "seed": self.config.seed,
            "status": self.status,
            "iterations_done": self.state.iteration,
            "total_iterations": self.state.total_iterations,
            "best_target_miou": self.best_miou if self.best_iteration is not None else None,
            "best_iteration": self.best_iteration,
            "elapsed_time": elapsed,
            "iterations_per_second": self.state.iteration / elapsed if elapsed > 0 else 0,
            "config_hash": self.config_hash,
            "output_directory": str(self.output_dir),
            "completion_time": datetime.now().isoformat(),
        }

"""
Self-Training Engine
====================

Mean-teacher self-training for unsupervised domain adaptation:

- supervised cross-entropy on labeled source images
- teacher pseudo-labels with a per-image confidence-quality weight
- hard-label unsupervised loss on a ClassMix/CutMix source-target composite
- student SGD step followed by the teacher EMA update
- checkpointing of the full training state (networks, optimizer, RNGs)
"""

import copy
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional

import numpy as np
import torch
import torch.nn.functional as F

from config import ExperimentConfig
from errors import EmptySampleError, ShapeError, TrainingFault
from metrics import IGNORE_INDEX
from mixing import build_mix_masks, compose_mixed_batch
from models import MetaTemperatureNet, SegNet, ema_update, freeze

CHECKPOINT_VERSION = 1
DIAGNOSTIC_KEYS = ("iteration", "L_s", "L_u_hard", "L_u_soft", "L_mix", "L_cal", "q_mean", "lambda_soft", "mean_T")


@dataclass
class PseudoLabelBundle:
    hard: torch.Tensor        # N x H x W class indices
    confidence: torch.Tensor  # N x H x W max teacher probability
    quality: torch.Tensor     # N fraction of confident pixels per image

    def pixel_weights(self) -> torch.Tensor:
        return self.quality.view(-1, 1, 1).expand_as(self.confidence)


@dataclass
class TrainState:
    student: SegNet
    teacher: SegNet
    optimizer: torch.optim.Optimizer
    rng: np.random.Generator
    total_iterations: int
    mtn: Optional[MetaTemperatureNet] = None
    mtn_ema: Optional[MetaTemperatureNet] = None
    iteration: int = 0

    @property
    def calibrator(self) -> Optional[MetaTemperatureNet]:
        """The MTN copy used for outer supervision and inference"""
        return self.mtn_ema if self.mtn_ema is not None else self.mtn


def build_train_state(config: ExperimentConfig) -> TrainState:
    """Fresh student/teacher (and MTN pair for DA-Cal variants) from the config seed"""
    torch.manual_seed(config.seed)
    student = SegNet(config.dataset.num_classes)
    teacher = freeze(copy.deepcopy(student)).eval()

    mtn = mtn_ema = None
    if config.variant != "none":
        dc = config.dacal
        mtn = MetaTemperatureNet(config.dataset.num_classes, hidden=dc.mtn_hidden, num_layers=dc.mtn_layers,
                                 kernel_size=dc.mtn_kernel, init_temperature=dc.init_temperature)
        if dc.use_mtn_ema:
            mtn_ema = freeze(copy.deepcopy(mtn)).eval()

    optimizer = torch.optim.SGD(student.parameters(), lr=config.training.lr, momentum=config.training.momentum)
    return TrainState(student=student, teacher=teacher, optimizer=optimizer,
                      rng=np.random.default_rng([config.seed, 1]),
                      total_iterations=config.iterations, mtn=mtn, mtn_ema=mtn_ema)


def check_finite(component: str, value, iteration: Optional[int] = None) -> None:
    tensor = value if isinstance(value, torch.Tensor) else torch.as_tensor(value)
    if not bool(torch.isfinite(tensor).all()):
        raise TrainingFault(component, iteration)


def loss_value(value) -> float:
    """Plain float of a loss for the train log, detached from the graph"""
    if isinstance(value, torch.Tensor):
        return value.detach().item()
    return float(value)


def weighted_cross_entropy(logits: torch.Tensor, labels: torch.Tensor,
                           pixel_weight: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Mean of w * CE over non-ignored pixels (w = 1 when no weights are given)"""
    if logits.shape[0] != labels.shape[0] or logits.shape[2:] != labels.shape[1:]:
        raise ShapeError(f"logits {tuple(logits.shape)} do not match labels {tuple(labels.shape)}")
    valid = labels != IGNORE_INDEX
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise EmptySampleError("every pixel is ignored; the loss is undefined")
    per_pixel = F.cross_entropy(logits, labels.long(), ignore_index=IGNORE_INDEX, reduction="none")
    if pixel_weight is not None:
        per_pixel = per_pixel * pixel_weight
    return per_pixel[valid].sum() / n_valid


def soft_cross_entropy(logits: torch.Tensor, targets: torch.Tensor,
                       pixel_weight: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Mean over pixels of -sum_c target_c * log softmax(logits)_c"""
    if logits.shape != targets.shape:
        raise ShapeError(f"logits {tuple(logits.shape)} and soft targets {tuple(targets.shape)} differ")
    per_pixel = -(targets * F.log_softmax(logits, dim=1)).sum(dim=1)
    if pixel_weight is not None:
        per_pixel = per_pixel * pixel_weight
    return per_pixel.mean()


def supervised_loss(student: SegNet, images: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    return weighted_cross_entropy(student(images), labels)


def make_pseudo_labels(teacher: SegNet, x_target: torch.Tensor, tau: float) -> PseudoLabelBundle:
    """
    Hard teacher labels plus quality q = share of pixels with confidence >= tau

    Runs without gradient tracking; argmax ties go to the lowest class index.
    """
    with torch.no_grad():
        probs = F.softmax(teacher(x_target), dim=1)
        confidence = probs.amax(dim=1)
        hard = probs.argmax(dim=1)
        quality = (confidence >= tau).to(probs.dtype).mean(dim=(1, 2))
    return PseudoLabelBundle(hard=hard, confidence=confidence, quality=quality)


def unsupervised_hard_loss(student: SegNet, x: torch.Tensor, bundle: PseudoLabelBundle,
                           pixel_weight: Optional[torch.Tensor] = None) -> torch.Tensor:
    """q-weighted cross-entropy against hard pseudo-labels"""
    weights = bundle.pixel_weights() if pixel_weight is None else pixel_weight
    return weighted_cross_entropy(student(x), bundle.hard, weights)


def outer_mix_masks(source_labels: torch.Tensor, rng: np.random.Generator,
                    strategy: str, mode: str = "complementary"):
    """Per-image outer/inner mask pairs, stacked along the batch axis"""
    pairs = [build_mix_masks(y, rng, strategy, mode) for y in source_labels]
    return torch.stack([p.outer for p in pairs]), torch.stack([p.inner for p in pairs])


def sgd_update(state: TrainState, loss: torch.Tensor) -> None:
    state.optimizer.zero_grad(set_to_none=True)
    loss.backward()
    for name, p in state.student.named_parameters():
        if p.grad is not None:
            check_finite(f"student gradient {name}", p.grad, state.iteration)
    state.optimizer.step()


def baseline_step(state: TrainState, source_images: torch.Tensor, source_labels: torch.Tensor,
                  target_images: torch.Tensor, config: ExperimentConfig) -> Dict[str, float]:
    """
    One self-training iteration without calibration

    L = L_s + L_u, where L_u is the quality-weighted hard loss on the outer
    ClassMix composite. With training.soft_labels the uncalibrated teacher
    softmax on the composite replaces or joins the hard term; with
    training.source_only only L_s is used.
    """
    tr = config.training
    t = state.iteration
    state.student.train()

    loss_s = supervised_loss(state.student, source_images, source_labels)
    check_finite("supervised_loss", loss_s, t)
    loss_hard = loss_soft = torch.zeros(())
    q_mean = 0.0

    if not tr.source_only:
        bundle = make_pseudo_labels(state.teacher, target_images, tr.tau)
        outer, _ = outer_mix_masks(source_labels, state.rng, config.mixing_strategy)
        x_mix, y_mix, w_mix = compose_mixed_batch(source_images, source_labels, target_images,
                                                  bundle.hard, outer, bundle.quality)
        logits_mix = state.student(x_mix)
        if tr.soft_labels != "replace":
            loss_hard = weighted_cross_entropy(logits_mix, y_mix, w_mix)
        if tr.soft_labels != "none":
            with torch.no_grad():
                soft_targets = F.softmax(state.teacher(x_mix), dim=1)
            loss_soft = soft_cross_entropy(logits_mix, soft_targets, w_mix)
        check_finite("unsupervised_loss", loss_hard + loss_soft, t)
        q_mean = loss_value(bundle.quality.mean())

    sgd_update(state, loss_s + loss_hard + loss_soft)
    ema_update(state.teacher, state.student, tr.teacher_ema_gamma)
    state.iteration += 1

    return {"iteration": state.iteration, "L_s": loss_value(loss_s), "L_u_hard": loss_value(loss_hard),
            "L_u_soft": loss_value(loss_soft), "L_mix": 0.0, "L_cal": 0.0, "q_mean": q_mean,
            "lambda_soft": 0.0, "mean_T": 1.0}


def save_checkpoint(state: TrainState, path, config_hash: str, extra: Optional[Dict] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "config_hash": config_hash,
        "iteration": state.iteration,
        "total_iterations": state.total_iterations,
        "student": state.student.state_dict(),
        "teacher": state.teacher.state_dict(),
        "mtn": state.mtn.state_dict() if state.mtn is not None else None,
        "mtn_ema": state.mtn_ema.state_dict() if state.mtn_ema is not None else None,
        "optimizer": state.optimizer.state_dict(),
        "numpy_rng": state.rng.bit_generator.state,
        "torch_rng": torch.get_rng_state(),
        "extra": extra or {},
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)
    return path


def load_checkpoint(path) -> Dict:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint format {payload.get('format_version')}")
    return payload


def restore_train_state(state: TrainState, payload: Dict) -> TrainState:
    """Load networks, optimizer and RNG streams into a state built from the same config"""
    state.student.load_state_dict(payload["student"])
    state.teacher.load_state_dict(payload["teacher"])
    for name in ("mtn", "mtn_ema"):
        module, saved = getattr(state, name), payload.get(name)
        if (module is None) != (saved is None):
            raise ValueError(f"checkpoint and config disagree about {name}")
        if module is not None:
            module.load_state_dict(saved)
    state.optimizer.load_state_dict(payload["optimizer"])
    state.rng.bit_generator.state = payload["numpy_rng"]
    torch.set_rng_state(payload["torch_rng"])
    state.iteration = int(payload["iteration"])
    state.total_iterations = int(payload["total_iterations"])
    return state



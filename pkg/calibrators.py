"""
Post-hoc Calibrators
====================

Baseline calibrators the DA-Cal results are compared against:

- temperature application (global scalar or per-pixel map)
- global temperature fitting by NLL minimization (TempScal-src / Oracle)
- logit ensembling
- pixel-level PseudoCal (mixup-synthesized pseudo-target set)
"""

import hashlib
import json
import math
from dataclasses import dataclass, asdict
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
import torch
import torch.nn.functional as F
from scipy.optimize import minimize_scalar

from errors import DomainError, EmptySampleError, InsufficientDataError, ShapeError
from metrics import IGNORE_INDEX

TEMPERATURE_RECORD_VERSION = 1
MIN_TEMPERATURE = 0.05
MAX_TEMPERATURE = 20.0


@dataclass
class GlobalTemperature:
    """A single positive temperature with its provenance"""
    value: float
    method: str = "tempscal"
    fingerprint: str = ""
    seed: Optional[int] = None

    def __post_init__(self):
        if not (self.value > 0 and math.isfinite(self.value)):
            raise DomainError(f"temperature must be a positive finite number, got {self.value}")

    def save(self, path) -> Path:
        path = Path(path)
        record = {"format_version": TEMPERATURE_RECORD_VERSION, **asdict(self)}
        with open(path, "w", encoding="utf-8") as f:
            json.dump(record, f, indent=2)
        return path

    @classmethod
    def load(cls, path) -> "GlobalTemperature":
        with open(path, "r", encoding="utf-8") as f:
            record = json.load(f)
        version = record.pop("format_version", None)
        if version != TEMPERATURE_RECORD_VERSION:
            raise ValueError(f"unsupported temperature record version {version}")
        return cls(**record)


def fingerprint_tensors(*tensors: torch.Tensor) -> str:
    digest = hashlib.md5()
    for t in tensors:
        digest.update(t.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()[:12]


def apply_temperature(logits: torch.Tensor,
                      temperature: Union[float, GlobalTemperature, torch.Tensor]) -> torch.Tensor:
    """
    Softmax over the class axis (dim 1) of logits / T

    Args:
        logits: N x C (x H x W) scores
        temperature: positive scalar, GlobalTemperature, or a per-pixel map
            shaped N x H x W or N x 1 x H x W
    """
    if isinstance(temperature, GlobalTemperature):
        temperature = temperature.value
    if isinstance(temperature, torch.Tensor):
        if not bool((temperature > 0).all()):
            raise DomainError("temperatures must be strictly positive")
        if temperature.dim() == logits.dim() - 1:
            temperature = temperature.unsqueeze(1)
        try:
            torch.broadcast_shapes(temperature.shape, logits.shape)
        except RuntimeError as e:
            raise ShapeError(f"temperature map {tuple(temperature.shape)} does not fit logits "
                             f"{tuple(logits.shape)}") from e
    elif not (temperature > 0):
        raise DomainError(f"temperature must be positive, got {temperature}")
    return F.softmax(logits / temperature, dim=1)


def _labeled_rows(logits: torch.Tensor, labels: torch.Tensor):
    if logits.dim() < 2 or logits.shape[0] != labels.shape[0] or logits.shape[2:] != labels.shape[1:]:
        raise ShapeError(f"logits {tuple(logits.shape)} do not match labels {tuple(labels.shape)}")
    num_classes = logits.shape[1]
    rows = logits.detach().movedim(1, -1).reshape(-1, num_classes).to(torch.float64)
    targets = labels.reshape(-1).long()
    valid = targets != IGNORE_INDEX
    return rows[valid], targets[valid]


def temperature_nll(logits: torch.Tensor, labels: torch.Tensor, temperature: float) -> float:
    """Mean NLL of softmax(logits / T) over non-ignored pixels"""
    rows, targets = _labeled_rows(logits, labels)
    if targets.numel() == 0:
        raise EmptySampleError("no labeled pixels")
    with torch.no_grad():
        return float(F.cross_entropy(rows / temperature, targets))


def fit_global_temperature(logits: torch.Tensor, labels: torch.Tensor,
                           bounds=(MIN_TEMPERATURE, MAX_TEMPERATURE),
                           method: str = "tempscal",
                           seed: Optional[int] = None) -> GlobalTemperature:
    """
    Fit one temperature by minimizing mean NLL over non-ignored pixels

    The search runs over log T inside the bounds with a bracketed scalar
    minimizer, tight enough that |dT| < 1e-4.
    """
    rows, targets = _labeled_rows(logits, labels)
    if targets.numel() == 0:
        raise EmptySampleError("no labeled pixels to fit a temperature on")

    def objective(log_t: float) -> float:
        with torch.no_grad():
            return float(F.cross_entropy(rows / math.exp(log_t), targets))

    result = minimize_scalar(objective, bounds=(math.log(bounds[0]), math.log(bounds[1])),
                             method="bounded", options={"xatol": 1e-6, "maxiter": 500})
    value = float(np.clip(math.exp(result.x), bounds[0], bounds[1]))
    return GlobalTemperature(value=value, method=method,
                             fingerprint=fingerprint_tensors(rows, targets), seed=seed)


def ensemble_probs(logit_sets: Sequence[torch.Tensor]) -> torch.Tensor:
    """Average member logits, then softmax"""
    if len(logit_sets) == 0:
        raise InsufficientDataError("an ensemble needs at least one member")
    shape = logit_sets[0].shape
    for member in logit_sets[1:]:
        if member.shape != shape:
            raise ShapeError(f"ensemble member shapes differ: {tuple(shape)} vs {tuple(member.shape)}")
    return F.softmax(torch.stack(list(logit_sets)).mean(dim=0), dim=1)


def pseudocal_fit(model, target_images: torch.Tensor, rng: np.random.Generator,
                  beta_param: float = 0.3, mixup_lambda: Optional[float] = None,
                  seed: Optional[int] = None, batch_size: int = 16) -> GlobalTemperature:
    """
    Pixel-level PseudoCal: fit a temperature on mixup-synthesized pseudo-targets

    Target images are paired without replacement; each pair is blended as
    lam * x_a + (1 - lam) * x_b with lam ~ Beta(beta_param, beta_param).
    The model's logits on the blend are scored against the model's hard
    prediction on the dominant image of the pair (x_a when lam >= 0.5).

    Args:
        model: callable mapping N x 3 x H x W images to N x C x H x W logits
        target_images: unlabeled target images
        rng: seeded numpy generator (pairing and mixing coefficients)
        mixup_lambda: force a fixed coefficient instead of sampling
    """
    n = target_images.shape[0]
    if n < 2:
        raise InsufficientDataError(f"PseudoCal needs at least 2 target images, got {n}")

    order = rng.permutation(n)
    pairs = order[: 2 * (n // 2)].reshape(-1, 2)
    if mixup_lambda is None:
        lams = rng.beta(beta_param, beta_param, size=len(pairs))
    else:
        lams = np.full(len(pairs), float(mixup_lambda))

    was_training = getattr(model, "training", False)
    if hasattr(model, "eval"):
        model.eval()
    logits_parts, label_parts = [], []
    with torch.no_grad():
        for start in range(0, len(pairs), batch_size):
            chunk = pairs[start:start + batch_size]
            lam = torch.as_tensor(lams[start:start + batch_size], dtype=target_images.dtype)
            lam = lam.view(-1, 1, 1, 1)
            x_a = target_images[torch.as_tensor(chunk[:, 0])]
            x_b = target_images[torch.as_tensor(chunk[:, 1])]
            mixed = lam * x_a + (1.0 - lam) * x_b
            dominant = torch.where(lam >= 0.5, x_a, x_b)
            logits_parts.append(model(mixed))
            label_parts.append(model(dominant).argmax(dim=1))
    if was_training and hasattr(model, "train"):
        model.train()

    return fit_global_temperature(torch.cat(logits_parts), torch.cat(label_parts),
                                  method="pseudocal", seed=seed)

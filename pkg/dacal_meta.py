"""
DA-Cal Meta-Learning Engine
===========================

Bi-level training of the Meta Temperature Network (MTN) inside the
self-training loop.

Step 1  calibrate teacher logits with the live MTN, train a cloned head one
        SGD step on the calibrated soft labels (graph kept)
Step 2  score the updated head on the inner-mixed composite, differentiate
        back through the inner step into the MTN, update the MTN and its EMA
Step 3  train the student on source plus the outer-mixed composite with the
        variant loss (PH: hard + warm-up weighted calibrated soft term,
        BI: temperature-folded cross-entropy), then EMA the teacher
"""

from collections import OrderedDict
from typing import Dict, List, Mapping, Optional, Tuple

import torch
import torch.nn.functional as F

from config import ExperimentConfig
from errors import DomainError, EmptySampleError, ShapeError, TrainingFault
from metrics import IGNORE_INDEX
from mixing import compose_mixed_batch, mix
from models import MetaTemperatureNet, SegNet, clone_head, ema_update, mtn_forward
from self_training import (TrainState, check_finite, loss_value, make_pseudo_labels, outer_mix_masks,
                           sgd_update, soft_cross_entropy, weighted_cross_entropy)


def warmup_lambda(t: int, warmup_iterations: int) -> float:
    """lambda_soft = min(1, t / T_warm)"""
    if warmup_iterations < 1:
        raise DomainError(f"warm-up length must be at least 1, got {warmup_iterations}")
    return min(1.0, max(0, t) / warmup_iterations)


def calibrated_soft_targets(teacher: SegNet, mtn: MetaTemperatureNet, x: torch.Tensor,
                            teacher_logits: Optional[torch.Tensor] = None) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    softmax(z / T) with z the teacher logits (constant) and T from the MTN

    Returns:
        (soft targets N x C x H x W, temperature map N x 1 x H x W); both
        differentiable with respect to the MTN parameters only
    """
    if teacher_logits is None:
        with torch.no_grad():
            teacher_logits = teacher(x)
    temperature = mtn_forward(mtn, x, teacher_logits)
    return F.softmax(teacher_logits.detach() / temperature, dim=1), temperature


def calibrated_soft_loss(logits_source: torch.Tensor, logits_target: torch.Tensor,
                         targets_source: torch.Tensor, targets_target: torch.Tensor) -> torch.Tensor:
    """Soft cross-entropy averaged per domain, then the two domain means averaged equally"""
    return 0.5 * (soft_cross_entropy(logits_source, targets_source)
                  + soft_cross_entropy(logits_target, targets_target))


def inner_step(head_params: Mapping[str, torch.Tensor], loss: torch.Tensor, alpha: float,
               iteration: Optional[int] = None) -> "OrderedDict[str, torch.Tensor]":
    """
    One differentiable SGD step on the head: theta'' = theta' - alpha * grad

    The gradient graph is kept, so anything computed from theta'' can be
    differentiated back into whatever produced the loss.
    """
    names = list(head_params)
    grads = torch.autograd.grad(loss, [head_params[n] for n in names], create_graph=True)
    for name, g in zip(names, grads):
        check_finite(f"inner gradient {name}", g, iteration)
    return OrderedDict((n, head_params[n] - alpha * g) for n, g in zip(names, grads))


def inner_mix_loss(net: SegNet, updated_head: Mapping[str, torch.Tensor],
                   mix_features: torch.Tensor, mix_labels: torch.Tensor) -> torch.Tensor:
    """Hard cross-entropy of the updated head on the inner-mixed composite"""
    return weighted_cross_entropy(net.forward_head(mix_features, updated_head), mix_labels)


def meta_update_mtn(mtn: MetaTemperatureNet, net: SegNet, updated_head: Mapping[str, torch.Tensor],
                    mix_features: torch.Tensor, mix_labels: torch.Tensor, beta: float,
                    iteration: Optional[int] = None) -> Tuple[torch.Tensor, List[torch.Tensor]]:
    """
    psi <- psi - beta * d L_mix / d psi, differentiating through the inner step

    Backbone features are constants, so only the MTN receives the update.

    Returns:
        (L_mix, meta-gradients in mtn.parameters() order)
    """
    loss_mix = inner_mix_loss(net, updated_head, mix_features, mix_labels)
    check_finite("inner_mix_loss", loss_mix, iteration)
    params = list(mtn.parameters())
    grads = torch.autograd.grad(loss_mix, params, allow_unused=True)
    grads = [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]
    for (name, _), g in zip(mtn.named_parameters(), grads):
        check_finite(f"meta gradient {name}", g, iteration)
    with torch.no_grad():
        for p, g in zip(params, grads):
            p.sub_(beta * g)
    return loss_mix.detach(), grads


def student_soft_targets(calibrator: MetaTemperatureNet, x: torch.Tensor,
                         student_logits: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    """Calibrated soft targets from the student's own (detached) logits; no gradients anywhere"""
    was_training = calibrator.training
    calibrator.eval()
    with torch.no_grad():
        logits = student_logits.detach()
        temperature = mtn_forward(calibrator, x, logits)
        targets = F.softmax(logits / temperature, dim=1)
    calibrator.train(was_training)
    return targets, temperature


def unsupervised_loss_terms(logits: torch.Tensor, labels: torch.Tensor, weights: torch.Tensor,
                            soft_targets: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    """(weighted hard CE, weighted soft CE) on the same pixels"""
    return (weighted_cross_entropy(logits, labels, weights),
            soft_cross_entropy(logits, soft_targets, weights))


def outer_unsupervised_loss(logits: torch.Tensor, labels: torch.Tensor, weights: torch.Tensor,
                            soft_targets: torch.Tensor, lambda_soft: float,
                            soft_only: bool = False) -> torch.Tensor:
    """
    PH unsupervised loss: q-weighted hard CE + lambda_soft * q-weighted soft CE

    With soft_only the hard term is dropped and the soft term is used at
    full weight.
    """
    hard, soft = unsupervised_loss_terms(logits, labels, weights, soft_targets)
    return combine_unsupervised(hard, soft, lambda_soft, soft_only)


def combine_unsupervised(hard: torch.Tensor, soft: torch.Tensor, lambda_soft: float,
                         soft_only: bool = False) -> torch.Tensor:
    return soft if soft_only else hard + lambda_soft * soft


def bi_cross_entropy_map(logits: torch.Tensor, temperature: torch.Tensor,
                         labels: torch.Tensor) -> torch.Tensor:
    """Per-pixel -log softmax(z * T)_y / T; ignored pixels get 0"""
    if temperature.dim() == logits.dim() - 1:
        temperature = temperature.unsqueeze(1)
    if temperature.shape[0] != logits.shape[0] or temperature.shape[2:] != logits.shape[2:]:
        raise ShapeError(f"temperature {tuple(temperature.shape)} does not fit logits {tuple(logits.shape)}")
    valid = labels != IGNORE_INDEX
    safe_labels = torch.where(valid, labels.long(), torch.zeros_like(labels, dtype=torch.long))
    log_probs = F.log_softmax(logits * temperature, dim=1)
    picked = log_probs.gather(1, safe_labels.unsqueeze(1)).squeeze(1)
    return torch.where(valid, -picked / temperature.squeeze(1), torch.zeros_like(picked))


def dacal_bi_loss(logits: torch.Tensor, temperature: torch.Tensor, labels: torch.Tensor,
                  pixel_weight: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Temperature-folded cross-entropy averaged over non-ignored pixels"""
    valid = labels != IGNORE_INDEX
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise EmptySampleError("no labeled pixels for the BI loss")
    per_pixel = bi_cross_entropy_map(logits, temperature, labels)
    if pixel_weight is not None:
        per_pixel = per_pixel * pixel_weight
    return per_pixel[valid].sum() / n_valid


def _frozen_features(net: SegNet, x: torch.Tensor) -> torch.Tensor:
    """Backbone features with no gradient and no running-statistics update"""
    was_training = net.training
    net.eval()
    with torch.no_grad():
        feats = net.features(x)
    net.train(was_training)
    return feats


def dacal_step(state: TrainState, source_images: torch.Tensor, source_labels: torch.Tensor,
               target_images: torch.Tensor, config: ExperimentConfig) -> Dict[str, float]:
    """One DA-Cal iteration (Steps 1-3 plus the teacher EMA)"""
    if state.mtn is None:
        raise TrainingFault("dacal_step", state.iteration, "no meta temperature network in the train state")
    tr, dc = config.training, config.dacal
    t = state.iteration
    n_source = source_images.shape[0]

    bundle = make_pseudo_labels(state.teacher, target_images, tr.tau)
    outer, inner = outer_mix_masks(source_labels, state.rng, config.mixing_strategy, dc.mixing_mode)

    # Step 1: calibrated soft labels on both domains, one inner step on a head copy.
    # The MTN runs in eval mode so its BatchNorm buffers stay fixed.
    state.mtn.eval()
    x_cal = torch.cat([source_images, target_images])
    with torch.no_grad():
        teacher_logits = state.teacher(x_cal)
    targets, temperature_cal = calibrated_soft_targets(state.teacher, state.mtn, x_cal, teacher_logits)
    check_finite("mtn_temperature", temperature_cal, t)

    head = clone_head(state.student)
    cal_logits = state.student.forward_head(_frozen_features(state.student, x_cal), head)
    loss_cal = calibrated_soft_loss(cal_logits[:n_source], cal_logits[n_source:],
                                    targets[:n_source], targets[n_source:])
    check_finite("calibrated_soft_loss", loss_cal, t)
    updated_head = inner_step(head, loss_cal, dc.alpha, t)

    # Step 2: meta-update the MTN on the complementary inner composite
    x_in, y_in = mix(source_images, target_images, source_labels, bundle.hard, inner)
    loss_mix, _ = meta_update_mtn(state.mtn, state.student, updated_head,
                                  _frozen_features(state.student, x_in), y_in, dc.beta, t)
    if state.mtn_ema is not None:
        ema_update(state.mtn_ema, state.mtn, dc.mtn_ema_gamma)

    # Step 3: student update on source plus the outer composite
    state.student.train()
    calibrator = state.calibrator
    lambda_soft = warmup_lambda(t, config.warmup_iterations) if dc.use_warmup else 1.0
    x_mix, y_mix, w_mix = compose_mixed_batch(source_images, source_labels, target_images,
                                              bundle.hard, outer, bundle.quality)
    logits_s = state.student(source_images)
    logits_mix = state.student(x_mix)
    soft_targets, temperature_mix = student_soft_targets(calibrator, x_mix, logits_mix)

    if config.variant == "BI":
        _, temperature_s = student_soft_targets(calibrator, source_images, logits_s)
        loss_s = dacal_bi_loss(logits_s, temperature_s, source_labels)
        loss_u = dacal_bi_loss(logits_mix, temperature_mix, y_mix, w_mix)
        loss_hard, loss_soft = loss_u, torch.zeros(())
    else:
        loss_s = weighted_cross_entropy(logits_s, source_labels)
        loss_hard, loss_soft = unsupervised_loss_terms(logits_mix, y_mix, w_mix, soft_targets)
        loss_u = combine_unsupervised(loss_hard, loss_soft, lambda_soft, dc.soft_only)
    check_finite("supervised_loss", loss_s, t)
    check_finite("unsupervised_loss", loss_u, t)

    sgd_update(state, loss_s + loss_u)
    ema_update(state.teacher, state.student, tr.teacher_ema_gamma)
    state.iteration += 1

    return {"iteration": state.iteration, "L_s": loss_value(loss_s), "L_u_hard": loss_value(loss_hard),
            "L_u_soft": loss_value(loss_soft), "L_mix": loss_value(loss_mix), "L_cal": loss_value(loss_cal),
            "q_mean": loss_value(bundle.quality.mean()), "lambda_soft": lambda_soft,
            "mean_T": loss_value(temperature_mix.mean())}


def infer_ph(student: SegNet, mtn_ema: Optional[MetaTemperatureNet], x: torch.Tensor) -> torch.Tensor:
    """Post-hoc calibrated probabilities; without an MTN this is the raw softmax"""
    was_training = student.training
    student.eval()
    with torch.no_grad():
        logits = student(x)
    student.train(was_training)
    if mtn_ema is None:
        return F.softmax(logits, dim=1)
    probs, _ = student_soft_targets(mtn_ema, x, logits)
    return probs

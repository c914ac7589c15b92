"""
Segmentation and Temperature Networks
=====================================

- SegNet: tiny encoder-decoder (student / teacher) split into a backbone
  and a 1x1 segmentation head so the head can be optimized on its own
- MetaTemperatureNet: Conv-BatchNorm-ReLU stack mapping [image, logits]
  to a per-pixel temperature map
- parameter-space helpers: EMA update, head cloning, parameter digests
"""

import hashlib
import math
from collections import OrderedDict
from typing import Dict, Mapping, Optional, Sequence, Union

import torch
import torch.nn as nn
import torch.nn.functional as F

from errors import DomainError, ShapeError

MIN_TEMPERATURE = 0.05
MAX_TEMPERATURE = 20.0

HeadParams = Dict[str, torch.Tensor]


def conv_norm_act(in_channels: int, out_channels: int, kernel_size: int = 3, stride: int = 1) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(in_channels, out_channels, kernel_size, stride=stride, padding=kernel_size // 2, bias=False),
        nn.BatchNorm2d(out_channels),
        nn.ReLU(inplace=False),
    )


class SegNet(nn.Module):
    """Three conv-norm-activation stages (the middle one strided), bilinear upsampling, 1x1 head"""

    def __init__(self, num_classes: int, in_channels: int = 3, widths: Sequence[int] = (16, 32, 32)):
        super().__init__()
        if len(widths) != 3:
            raise ValueError("SegNet expects exactly three stage widths")
        self.num_classes = num_classes
        self.backbone = nn.Sequential(
            conv_norm_act(in_channels, widths[0]),
            conv_norm_act(widths[0], widths[1], stride=2),
            conv_norm_act(widths[1], widths[2]),
        )
        self.head = nn.Conv2d(widths[2], num_classes, kernel_size=1)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        feats = self.backbone(x)
        return F.interpolate(feats, size=x.shape[-2:], mode="bilinear", align_corners=False)

    def forward_head(self, feats: torch.Tensor, head_params: Optional[Mapping[str, torch.Tensor]] = None) -> torch.Tensor:
        """Apply the head, optionally with substitute parameters (see clone_head)"""
        if head_params is None:
            return self.head(feats)
        return F.conv2d(feats, head_params["weight"], head_params["bias"])

    def forward(self, x: torch.Tensor, head_params: Optional[Mapping[str, torch.Tensor]] = None) -> torch.Tensor:
        return self.forward_head(self.features(x), head_params)


class MetaTemperatureNet(nn.Module):
    """
    Meta Temperature Network

    Input: image and segmentation logits concatenated on the channel axis.
    Output: one temperature per pixel, T = clamp(softplus(raw) + 0.05, max=20).
    The final 1x1 projection starts with zero weights and a bias chosen so
    that every pixel begins at init_temperature.
    """

    def __init__(self, num_classes: int, image_channels: int = 3, hidden: int = 32,
                 num_layers: int = 3, kernel_size: int = 3, init_temperature: float = 1.0):
        super().__init__()
        if num_layers < 1:
            raise ValueError("MTN needs at least one block")
        self.num_classes = num_classes
        self.image_channels = image_channels
        blocks = []
        channels = image_channels + num_classes
        for _ in range(num_layers):
            blocks.append(conv_norm_act(channels, hidden, kernel_size))
            channels = hidden
        self.blocks = nn.Sequential(*blocks)
        self.project = nn.Conv2d(hidden, 1, kernel_size=1)
        self.reset_projection(init_temperature)

    def reset_projection(self, init_temperature: float = 1.0) -> None:
        if not MIN_TEMPERATURE < init_temperature < MAX_TEMPERATURE:
            raise DomainError(f"initial temperature must lie in ({MIN_TEMPERATURE}, {MAX_TEMPERATURE})")
        # softplus^-1(T - floor)
        shifted = init_temperature - MIN_TEMPERATURE
        bias = shifted + math.log(-math.expm1(-shifted))
        with torch.no_grad():
            self.project.weight.zero_()
            self.project.bias.fill_(bias)

    def forward(self, image: torch.Tensor, logits: torch.Tensor) -> torch.Tensor:
        raw = self.project(self.blocks(torch.cat([image, logits], dim=1)))
        return torch.clamp(F.softplus(raw) + MIN_TEMPERATURE, max=MAX_TEMPERATURE)


def mtn_forward(mtn: MetaTemperatureNet, image: torch.Tensor, logits: torch.Tensor) -> torch.Tensor:
    """
    Predict an N x 1 x H x W temperature map

    The logits are detached, so gradients reach only the MTN parameters.
    """
    if image.shape[0] != logits.shape[0] or image.shape[-2:] != logits.shape[-2:]:
        raise ShapeError(f"image {tuple(image.shape)} and logits {tuple(logits.shape)} are not aligned")
    return mtn(image, logits.detach())


def _state_entries(obj: Union[nn.Module, Mapping[str, torch.Tensor]]) -> Dict[str, torch.Tensor]:
    if isinstance(obj, nn.Module):
        return obj.state_dict(keep_vars=True)
    return dict(obj)


def ema_update(target, source, gamma: float):
    """
    target <- gamma * target + (1 - gamma) * source, element-wise, in place

    Works on modules (parameters and floating-point buffers) or on plain
    name -> tensor mappings. Integer buffers are copied.
    """
    if not 0.0 <= gamma <= 1.0:
        raise DomainError(f"EMA coefficient must lie in [0, 1], got {gamma}")
    target_entries = _state_entries(target)
    source_entries = _state_entries(source)
    if target_entries.keys() != source_entries.keys():
        raise ShapeError("EMA target and source have different parameter names")
    with torch.no_grad():
        for name, t in target_entries.items():
            s = source_entries[name]
            if t.shape != s.shape:
                raise ShapeError(f"EMA shape mismatch for {name}: {tuple(t.shape)} vs {tuple(s.shape)}")
            if t.is_floating_point():
                t.mul_(gamma).add_(s.detach(), alpha=1.0 - gamma)
            else:
                t.copy_(s)
    return target


def clone_head(net: SegNet) -> HeadParams:
    """Independent, differentiable copy of the head parameters only"""
    return OrderedDict(
        (name, p.detach().clone().requires_grad_(True)) for name, p in net.head.named_parameters()
    )


def freeze(module: nn.Module) -> nn.Module:
    for p in module.parameters():
        p.requires_grad_(False)
    return module


def parameter_digest(module: nn.Module) -> str:
    """Hash of every parameter and buffer; used to prove a module was not touched"""
    digest = hashlib.sha256()
    for name, tensor in module.state_dict().items():
        digest.update(name.encode("utf-8"))
        digest.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()


def count_parameters(params) -> int:
    if isinstance(params, nn.Module):
        params = params.parameters()
    elif isinstance(params, Mapping):
        params = params.values()
    return sum(p.numel() for p in params)

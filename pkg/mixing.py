"""
Domain Mixing
=============

ClassMix and region-level CutMix masks, the complementary inner/outer class
split, and pixel-wise composition of source and target samples.

Mask convention: True takes the pixel from the source side, False from the
target side.
"""

import math
from dataclasses import dataclass
from typing import FrozenSet, Iterable, List, Optional, Tuple

import numpy as np
import torch

from errors import EmptySampleError, ShapeError
from metrics import IGNORE_INDEX

CUTMIX_AREA_RANGE = (0.25, 0.5)
MAX_RECTANGLE_OVERLAP = 0.1


@dataclass(frozen=True)
class ComplementarySplit:
    outer_classes: FrozenSet[int]
    inner_classes: FrozenSet[int]
    rectangle_fallback: bool = False


@dataclass
class MixMasks:
    """Masks for one source/target pair"""
    outer: torch.Tensor
    inner: torch.Tensor
    split: Optional[ComplementarySplit] = None


def present_classes(labels: torch.Tensor) -> List[int]:
    values = torch.unique(labels).tolist()
    return sorted(int(v) for v in values if v != IGNORE_INDEX)


def split_classes(source_labels: torch.Tensor, rng: np.random.Generator) -> ComplementarySplit:
    """
    Randomly partition the classes present in a source label map

    The outer set gets ceil(n / 2) classes, the inner set the rest. With a
    single present class the inner set is empty and rectangle_fallback is set.
    """
    present = present_classes(source_labels)
    if not present:
        raise EmptySampleError("source label map has no labeled pixels")
    shuffled = rng.permutation(present).tolist()
    n_outer = math.ceil(len(shuffled) / 2)
    outer = frozenset(int(c) for c in shuffled[:n_outer])
    inner = frozenset(int(c) for c in shuffled[n_outer:])
    return ComplementarySplit(outer_classes=outer, inner_classes=inner, rectangle_fallback=not inner)


def classmix_mask(source_labels: torch.Tensor, classes: Iterable[int]) -> torch.Tensor:
    """True exactly where the source label is one of the given classes"""
    classes = sorted(int(c) for c in classes)
    if not classes:
        return torch.zeros_like(source_labels, dtype=torch.bool)
    lookup = torch.as_tensor(classes, dtype=source_labels.dtype, device=source_labels.device)
    return torch.isin(source_labels, lookup)


def _rectangle(height: int, width: int, rng: np.random.Generator, area_range) -> Tuple[int, int, int, int]:
    ratio = rng.uniform(*area_range)
    h = int(np.clip(round(height * math.sqrt(ratio)), 1, height))
    w = int(np.clip(round(ratio * height * width / h), 1, width))
    top = int(rng.integers(0, height - h + 1))
    left = int(rng.integers(0, width - w + 1))
    return top, left, h, w


def _paint(height: int, width: int, rect) -> torch.Tensor:
    top, left, h, w = rect
    mask = torch.zeros((height, width), dtype=torch.bool)
    mask[top:top + h, left:left + w] = True
    return mask


def cutmix_mask(height: int, width: int, rng: np.random.Generator,
                area_range=CUTMIX_AREA_RANGE) -> torch.Tensor:
    """One axis-aligned rectangle covering 25-50% of the image, placed uniformly"""
    if height < 2 or width < 2:
        raise ValueError(f"CutMix needs an image of at least 2x2, got {height}x{width}")
    return _paint(height, width, _rectangle(height, width, rng, area_range))


def complementary_cutmix_masks(height: int, width: int, rng: np.random.Generator,
                               max_overlap: float = MAX_RECTANGLE_OVERLAP,
                               max_tries: int = 50) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Two independent CutMix rectangles whose overlap stays under max_overlap
    of the inner rectangle's area

    If no such pair turns up within max_tries draws, the shared pixels are
    removed from the inner mask.
    """
    outer = cutmix_mask(height, width, rng)
    inner = cutmix_mask(height, width, rng)
    for _ in range(max_tries):
        if (outer & inner).sum() < max_overlap * inner.sum():
            return outer, inner
        inner = cutmix_mask(height, width, rng)
    return outer, inner & ~outer


def build_mix_masks(source_labels: torch.Tensor, rng: np.random.Generator,
                    strategy: str = "classmix", mode: str = "complementary") -> MixMasks:
    """
    Outer and inner masks for one source label map

    Args:
        strategy: "classmix" or "cutmix"
        mode: "complementary" (disjoint class halves / low-overlap rectangles),
            "same" (inner reuses the outer mask) or "random" (independent draws)
    """
    height, width = source_labels.shape[-2:]
    if strategy == "cutmix":
        if mode == "complementary":
            outer, inner = complementary_cutmix_masks(height, width, rng)
        else:
            outer = cutmix_mask(height, width, rng)
            inner = outer.clone() if mode == "same" else cutmix_mask(height, width, rng)
        return MixMasks(outer=outer, inner=inner)

    if strategy != "classmix":
        raise ValueError(f"unknown mixing strategy {strategy!r}")
    split = split_classes(source_labels, rng)
    outer = classmix_mask(source_labels, split.outer_classes)
    if mode == "same":
        inner = outer.clone()
    elif mode == "random":
        inner = classmix_mask(source_labels, split_classes(source_labels, rng).outer_classes)
    elif split.rectangle_fallback:
        inner = cutmix_mask(height, width, rng)
    else:
        inner = classmix_mask(source_labels, split.inner_classes)
    return MixMasks(outer=outer, inner=inner, split=split)


def mix(x_source: torch.Tensor, x_target: torch.Tensor,
        y_source: torch.Tensor, y_target_pseudo: torch.Tensor,
        mask: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    """Pixel-wise select: mask-true pixels from the source pair, the rest from the target pair"""
    if x_source.shape != x_target.shape or y_source.shape != y_target_pseudo.shape:
        raise ShapeError("source and target samples differ in shape")
    if mask.shape != y_source.shape or x_source.shape[-2:] != mask.shape[-2:]:
        raise ShapeError(f"mask {tuple(mask.shape)} does not match labels {tuple(y_source.shape)}")
    image_mask = mask.unsqueeze(-3)
    mixed_image = torch.where(image_mask, x_source, x_target)
    mixed_label = torch.where(mask, y_source, y_target_pseudo)
    return mixed_image, mixed_label


def mix_weights(mask: torch.Tensor, quality: torch.Tensor) -> torch.Tensor:
    """Per-pixel loss weights: 1 on source-side pixels, the target image's q elsewhere"""
    quality = torch.as_tensor(quality, dtype=torch.float32)
    if mask.dim() == 3:
        quality = quality.view(-1, 1, 1)
    return torch.where(mask, torch.ones_like(mask, dtype=torch.float32), quality.expand(mask.shape))


def compose_mixed_batch(x_source: torch.Tensor, y_source: torch.Tensor,
                        x_target: torch.Tensor, y_target_pseudo: torch.Tensor,
                        masks: torch.Tensor, quality: torch.Tensor):
    """
    Mix a whole batch with one mask per image

    Returns:
        (mixed images, mixed labels, per-pixel weights)
    """
    images, labels = mix(x_source, x_target, y_source, y_target_pseudo, masks)
    weights = mix_weights(masks, quality).to(x_source.dtype)
    return images, labels, weights

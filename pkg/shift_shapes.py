"""
ShiftShapes Benchmark
=====================

Procedural two-domain segmentation benchmark. Every scene is a background
plus one geometric shape per foreground class; the source and target
domains render the same kind of scenes with different colour, brightness,
blur and noise (pure covariate shift).

A benchmark is persisted as a directory of raw little-endian arrays plus a
manifest.json describing shapes, dtypes, seed and both domain specs.
"""

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from matplotlib.colors import hsv_to_rgb, rgb_to_hsv
from scipy.ndimage import gaussian_filter

from config import DatasetConfig
from errors import ConfigurationError, DatasetError

MANIFEST_VERSION = 1
SPLIT_NAMES = ("source_train", "target_train", "target_val")
SPLIT_CODES = {"source_train": 0, "target_train": 1, "target_val": 2}

BASE_PALETTE = [
    (0.40, 0.40, 0.40),
    (0.85, 0.25, 0.20),
    (0.20, 0.70, 0.30),
    (0.25, 0.35, 0.85),
    (0.90, 0.80, 0.20),
]


def default_palette(num_classes: int) -> np.ndarray:
    colors = list(BASE_PALETTE[:num_classes])
    extra = num_classes - len(colors)
    for k in range(extra):
        hue = (k + 0.5) / extra
        colors.append(tuple(hsv_to_rgb([hue, 0.6, 0.75]).tolist()))
    return np.asarray(colors, dtype=np.float64)


@dataclass
class DomainSpec:
    palette: np.ndarray
    noise_sigma: float = 0.0
    hue_shift: float = 0.0
    brightness: float = 1.0
    blur_radius: float = 0.0

    def __post_init__(self):
        if self.noise_sigma < 0:
            raise ConfigurationError("noise_sigma must be non-negative")
        if self.brightness <= 0:
            raise ConfigurationError("brightness must be positive")

    @classmethod
    def from_dict(cls, values: Dict[str, float], num_classes: int) -> "DomainSpec":
        return cls(palette=default_palette(num_classes), **values)

    def to_dict(self) -> Dict:
        return {"palette": self.palette.tolist(), "noise_sigma": self.noise_sigma,
                "hue_shift": self.hue_shift, "brightness": self.brightness,
                "blur_radius": self.blur_radius}


@dataclass
class Scene:
    shapes: List[Dict]
    label: np.ndarray


@dataclass
class LabeledImage:
    image: np.ndarray
    label: np.ndarray
    domain: str


def _grid(height: int, width: int):
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    return yy + 0.5, xx + 0.5


def _draw_shape(kind: str, height: int, width: int, rng: np.random.Generator) -> Tuple[np.ndarray, Dict]:
    yy, xx = _grid(height, width)
    m = float(min(height, width))

    if kind == "circle":
        r = rng.uniform(0.12, 0.22) * m
        cy, cx = rng.uniform(r, height - r), rng.uniform(r, width - r)
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= r ** 2, {"center": (cy, cx), "radius": r}

    if kind == "rectangle":
        h, w = rng.uniform(0.2, 0.4) * height, rng.uniform(0.2, 0.4) * width
        top, left = rng.uniform(0, height - h), rng.uniform(0, width - w)
        mask = (yy >= top) & (yy <= top + h) & (xx >= left) & (xx <= left + w)
        return mask, {"top": top, "left": left, "height": h, "width": w}

    if kind == "triangle":
        s = rng.uniform(0.3, 0.5) * m
        cy, cx = rng.uniform(s / 2, height - s / 2), rng.uniform(s / 2, width - s / 2)
        apex, base_l, base_r = (cy - s / 2, cx), (cy + s / 2, cx - s / 2), (cy + s / 2, cx + s / 2)

        def side(p, q):
            return (xx - q[1]) * (p[0] - q[0]) - (p[1] - q[1]) * (yy - q[0])

        d1, d2, d3 = side(apex, base_l), side(base_l, base_r), side(base_r, apex)
        has_neg = (d1 < 0) | (d2 < 0) | (d3 < 0)
        has_pos = (d1 > 0) | (d2 > 0) | (d3 > 0)
        return ~(has_neg & has_pos), {"center": (cy, cx), "size": s}

    if kind == "stripe":
        theta = rng.uniform(0.0, np.pi)
        band = rng.uniform(0.10, 0.16) * m
        py, px = rng.uniform(0.3, 0.7) * height, rng.uniform(0.3, 0.7) * width
        distance = -(xx - px) * np.sin(theta) + (yy - py) * np.cos(theta)
        return np.abs(distance) <= band / 2, {"angle": theta, "width": band, "through": (py, px)}

    if kind == "blob":
        a, b = rng.uniform(0.15, 0.3) * m, rng.uniform(0.15, 0.3) * m
        phi = rng.uniform(0.0, np.pi)
        reach = max(a, b)
        cy, cx = rng.uniform(reach, height - reach), rng.uniform(reach, width - reach)
        u = (xx - cx) * np.cos(phi) + (yy - cy) * np.sin(phi)
        v = -(xx - cx) * np.sin(phi) + (yy - cy) * np.cos(phi)
        return (u / a) ** 2 + (v / b) ** 2 <= 1.0, {"center": (cy, cx), "axes": (a, b), "angle": phi}

    raise ConfigurationError(f"unknown shape kind {kind!r}")


def generate_scene(num_classes: int, size: Tuple[int, int], rng: np.random.Generator,
                   shape_kinds: Sequence[str] = ("circle", "rectangle", "triangle", "stripe")) -> Scene:
    """
    Background class 0 plus one shape per foreground class

    Class k is always drawn as shape_kinds[(k - 1) % len(shape_kinds)];
    shapes are painted in random order, later ones occluding earlier ones.
    """
    height, width = size
    if num_classes < 2:
        raise ConfigurationError(f"a scene needs at least 2 classes, got {num_classes}")
    if height < 16 or width < 16:
        raise ConfigurationError(f"scene size must be at least 16x16, got {height}x{width}")

    label = np.zeros((height, width), dtype=np.uint8)
    shapes = []
    for class_id in rng.permutation(np.arange(1, num_classes)).tolist():
        kind = shape_kinds[(class_id - 1) % len(shape_kinds)]
        mask, geometry = _draw_shape(kind, height, width, rng)
        label[mask] = class_id
        shapes.append({"class_id": class_id, "kind": kind, **geometry})
    return Scene(shapes=shapes, label=label)


def render(scene: Scene, spec: DomainSpec, rng: np.random.Generator, domain: str = "source") -> LabeledImage:
    """Palette paint, hue shift, brightness, Gaussian blur, additive noise, clip"""
    image = spec.palette[scene.label].astype(np.float64)
    if spec.hue_shift:
        hsv = rgb_to_hsv(np.clip(image, 0.0, 1.0))
        hsv[..., 0] = (hsv[..., 0] + spec.hue_shift) % 1.0
        image = hsv_to_rgb(hsv)
    image = image * spec.brightness
    if spec.blur_radius > 0:
        image = gaussian_filter(image, sigma=(spec.blur_radius, spec.blur_radius, 0))
    if spec.noise_sigma > 0:
        image = image + rng.normal(0.0, spec.noise_sigma, size=image.shape)
    image = np.clip(image, 0.0, 1.0)
    return LabeledImage(image=image.astype(np.float32), label=scene.label.copy(), domain=domain)


@dataclass
class SegmentationSplit:
    name: str
    domain: str
    images: np.ndarray        # N x H x W x 3 float32
    labels: np.ndarray        # N x H x W uint8
    labels_withheld: bool = False

    def __len__(self) -> int:
        return len(self.images)

    def training_labels(self, oracle: bool = False) -> np.ndarray:
        """Labels for training; withheld target labels need the explicit oracle flag"""
        if self.labels_withheld and not oracle:
            raise ConfigurationError(f"labels of {self.name} are withheld from training (oracle flag not set)")
        return self.labels

    def image_tensor(self, indices=None) -> torch.Tensor:
        images = self.images if indices is None else self.images[np.asarray(indices)]
        return torch.from_numpy(np.ascontiguousarray(images)).permute(0, 3, 1, 2).contiguous()

    def label_tensor(self, indices=None, oracle: bool = False) -> torch.Tensor:
        labels = self.training_labels(oracle) if self.labels_withheld else self.labels
        labels = labels if indices is None else labels[np.asarray(indices)]
        return torch.from_numpy(labels.astype(np.int64))

    def subset(self, indices, name: Optional[str] = None) -> "SegmentationSplit":
        indices = np.asarray(indices)
        return SegmentationSplit(name=name or self.name, domain=self.domain,
                                 images=self.images[indices], labels=self.labels[indices],
                                 labels_withheld=self.labels_withheld)


@dataclass
class Benchmark:
    source_train: SegmentationSplit
    target_train: SegmentationSplit
    target_val: SegmentationSplit
    num_classes: int
    seed: int
    source_spec: DomainSpec
    target_spec: DomainSpec
    config: Dict = field(default_factory=dict)

    def splits(self) -> List[SegmentationSplit]:
        return [self.source_train, self.target_train, self.target_val]

    def fingerprint(self) -> str:
        digest = hashlib.sha256()
        for split in self.splits():
            digest.update(split.images.astype("<f4").tobytes())
            digest.update(split.labels.astype(np.uint8).tobytes())
        return digest.hexdigest()[:16]

    def source_partition(self, fraction: float, seed: Optional[int] = None) -> Tuple[np.ndarray, np.ndarray]:
        """(train indices, held-out indices) of the labeled source split"""
        n = len(self.source_train)
        rng = np.random.default_rng([self.seed if seed is None else seed, 99])
        order = rng.permutation(n)
        if n == 1:
            return order, order
        n_holdout = int(min(max(1, round(fraction * n)), n - 1))
        return np.sort(order[n_holdout:]), np.sort(order[:n_holdout])


def _render_split(name: str, count: int, config: DatasetConfig, spec: DomainSpec, domain: str,
                  seed: int) -> SegmentationSplit:
    images = np.empty((count, config.height, config.width, 3), dtype=np.float32)
    labels = np.empty((count, config.height, config.width), dtype=np.uint8)
    for i in range(count):
        scene_seq, render_seq = np.random.SeedSequence([seed, SPLIT_CODES[name], i]).spawn(2)
        scene = generate_scene(config.num_classes, (config.height, config.width),
                               np.random.default_rng(scene_seq), config.shape_kinds)
        sample = render(scene, spec, np.random.default_rng(render_seq), domain)
        images[i], labels[i] = sample.image, sample.label
    return SegmentationSplit(name=name, domain=domain, images=images, labels=labels,
                             labels_withheld=(name == "target_train"))


def make_benchmark(config: DatasetConfig, seed: int) -> Benchmark:
    """
    Generate source_train (labeled), target_train (labels withheld) and
    target_val (labeled) from one seed

    Each image gets its own derived seed, so generation order does not matter.
    """
    source_spec = DomainSpec.from_dict(config.source_domain, config.num_classes)
    target_spec = DomainSpec.from_dict(config.target_domain, config.num_classes)
    return Benchmark(
        source_train=_render_split("source_train", config.n_source_train, config, source_spec, "source", seed),
        target_train=_render_split("target_train", config.n_target_train, config, target_spec, "target", seed),
        target_val=_render_split("target_val", config.n_target_val, config, target_spec, "target", seed),
        num_classes=config.num_classes,
        seed=seed,
        source_spec=source_spec,
        target_spec=target_spec,
        config=dict(vars(config)),
    )


def save_benchmark(benchmark: Benchmark, directory, force: bool = False) -> Path:
    """Write raw little-endian arrays plus manifest.json; refuse a non-empty directory unless forced"""
    directory = Path(directory)
    if directory.exists() and any(directory.iterdir()) and not force:
        raise FileExistsError(f"{directory} is not empty (use --force to overwrite)")
    directory.mkdir(parents=True, exist_ok=True)

    splits = {}
    for split in benchmark.splits():
        image_file, label_file = f"{split.name}_images.bin", f"{split.name}_labels.bin"
        split.images.astype("<f4").tofile(directory / image_file)
        split.labels.astype(np.uint8).tofile(directory / label_file)
        splits[split.name] = {
            "domain": split.domain,
            "count": len(split),
            "labels_withheld": split.labels_withheld,
            "images": {"file": image_file, "dtype": "<f4", "shape": list(split.images.shape)},
            "labels": {"file": label_file, "dtype": "|u1", "shape": list(split.labels.shape)},
        }

    manifest = {
        "format_version": MANIFEST_VERSION,
        "seed": benchmark.seed,
        "num_classes": benchmark.num_classes,
        "fingerprint": benchmark.fingerprint(),
        "config": benchmark.config,
        "domains": {"source": benchmark.source_spec.to_dict(), "target": benchmark.target_spec.to_dict()},
        "splits": splits,
    }
    with open(directory / "manifest.json", "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    return directory


def _read_array(directory: Path, entry: Dict) -> np.ndarray:
    path = directory / entry["file"]
    if not path.exists():
        raise DatasetError(f"missing array file {path}")
    array = np.fromfile(path, dtype=np.dtype(entry["dtype"]))
    expected = int(np.prod(entry["shape"]))
    if array.size != expected:
        raise DatasetError(f"{path} holds {array.size} values, manifest expects {expected}")
    return array.reshape(entry["shape"])


def load_benchmark(directory) -> Benchmark:
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise DatasetError(f"no dataset manifest in {directory}")
    with open(manifest_path, "r", encoding="utf-8") as f:
        manifest = json.load(f)
    if manifest.get("format_version") != MANIFEST_VERSION:
        raise DatasetError(f"unsupported dataset format {manifest.get('format_version')}")

    splits = {}
    for name in SPLIT_NAMES:
        entry = manifest["splits"][name]
        splits[name] = SegmentationSplit(
            name=name,
            domain=entry["domain"],
            images=_read_array(directory, entry["images"]).astype(np.float32),
            labels=_read_array(directory, entry["labels"]).astype(np.uint8),
            labels_withheld=entry["labels_withheld"],
        )

    def spec(values):
        values = dict(values)
        palette = np.asarray(values.pop("palette"), dtype=np.float64)
        return DomainSpec(palette=palette, **values)

    benchmark = Benchmark(
        num_classes=manifest["num_classes"],
        seed=manifest["seed"],
        source_spec=spec(manifest["domains"]["source"]),
        target_spec=spec(manifest["domains"]["target"]),
        config=manifest.get("config", {}),
        **splits,
    )
    if benchmark.fingerprint() != manifest["fingerprint"]:
        raise DatasetError(f"dataset in {directory} does not match its manifest fingerprint")
    return benchmark

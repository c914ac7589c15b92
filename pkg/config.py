"""
Experiment Configuration
========================

Nested dataclass configuration for dataset generation, self-training, the
DA-Cal meta-learner and evaluation. Configs are stored as JSON with one
section per dataclass; everything except the output root and the thread
count lives in the config file.
"""

import copy
import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional

from errors import ConfigurationError

OUTPUT_ROOT_ENV = "DACAL_OUTPUT_ROOT"
NUM_THREADS_ENV = "DACAL_NUM_THREADS"

VARIANTS = ("none", "PH", "BI")
MIXING_STRATEGIES = ("classmix", "cutmix", "auto")
MIXING_MODES = ("complementary", "same", "random")
SOFT_LABEL_MODES = ("none", "replace", "add")
SHAPE_KINDS = ("circle", "rectangle", "triangle", "stripe", "blob")


def _source_domain() -> Dict[str, float]:
    return {"noise_sigma": 0.03, "hue_shift": 0.0, "brightness": 1.0, "blur_radius": 0.0}


def _target_domain() -> Dict[str, float]:
    return {"noise_sigma": 0.06, "hue_shift": 0.08, "brightness": 0.8, "blur_radius": 0.8}


@dataclass
class DatasetConfig:
    preset: str = "desk"
    num_classes: int = 4
    height: int = 64
    width: int = 64
    n_source_train: int = 200
    n_target_train: int = 200
    n_target_val: int = 100
    source_holdout_fraction: float = 0.2
    shape_kinds: List[str] = field(default_factory=lambda: ["circle", "rectangle", "triangle", "stripe"])
    source_domain: Dict[str, float] = field(default_factory=_source_domain)
    target_domain: Dict[str, float] = field(default_factory=_target_domain)


@dataclass
class TrainingConfig:
    lr: float = 0.01
    momentum: float = 0.9
    tau: float = 0.968
    teacher_ema_gamma: float = 0.99
    mixing: str = "auto"
    source_only: bool = False
    soft_labels: str = "none"


@dataclass
class DacalConfig:
    alpha: float = 0.01
    beta: float = 0.01
    mtn_ema_gamma: float = 0.999
    warmup_fraction: float = 0.5
    use_mtn_ema: bool = True
    use_warmup: bool = True
    mixing_mode: str = "complementary"
    soft_only: bool = False
    mtn_layers: int = 3
    mtn_hidden: int = 32
    mtn_kernel: int = 3
    init_temperature: float = 1.0


@dataclass
class EvaluationConfig:
    num_bins: int = 15
    pixels_per_image: int = 10000
    pseudocal_beta: float = 0.3
    # classes left out of macro metrics and mIoU, e.g. [0] for a background class
    exclude_classes: List[int] = field(default_factory=list)


@dataclass
class ExperimentConfig:
    variant: str = "none"
    seed: int = 0
    iterations: int = 500
    eval_every: int = 100
    batch_size: int = 4
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    dacal: DacalConfig = field(default_factory=DacalConfig)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)

    @property
    def warmup_iterations(self) -> int:
        """T_warm: a fraction of the total iterations, at least one"""
        return max(1, int(round(self.dacal.warmup_fraction * self.iterations)))

    @property
    def mixing_strategy(self) -> str:
        """Resolve "auto" to ClassMix for multi-class tasks and CutMix for binary ones"""
        if self.training.mixing != "auto":
            return self.training.mixing
        return "cutmix" if self.dataset.num_classes == 2 else "classmix"

    def validate(self) -> "ExperimentConfig":
        """Check every value; raise ConfigurationError on the first problem"""
        ds, tr, dc, ev = self.dataset, self.training, self.dacal, self.evaluation
        checks = [
            (self.variant in VARIANTS, f"variant must be one of {VARIANTS}, got {self.variant!r}"),
            (self.iterations >= 1, "iterations must be at least 1"),
            (self.eval_every >= 1, "eval_every must be at least 1"),
            (self.batch_size >= 1, "batch_size must be at least 1"),
            (ds.num_classes >= 2, f"num_classes must be at least 2, got {ds.num_classes}"),
            (ds.num_classes < 255, "num_classes must stay below the ignore index 255"),
            (ds.height >= 16 and ds.width >= 16, "image size must be at least 16x16"),
            (min(ds.n_source_train, ds.n_target_train, ds.n_target_val) >= 1, "split sizes must be at least 1"),
            (0.0 < ds.source_holdout_fraction < 1.0, "source_holdout_fraction must lie in (0, 1)"),
            (len(ds.shape_kinds) >= 1 and all(k in SHAPE_KINDS for k in ds.shape_kinds),
             f"shape_kinds must be drawn from {SHAPE_KINDS}"),
            (tr.lr >= 0.0, "training.lr must be non-negative"),
            (0.0 <= tr.momentum < 1.0, "training.momentum must lie in [0, 1)"),
            (0.0 < tr.tau < 1.0, "training.tau must lie in (0, 1)"),
            (0.0 <= tr.teacher_ema_gamma <= 1.0, "training.teacher_ema_gamma must lie in [0, 1]"),
            (tr.mixing in MIXING_STRATEGIES, f"training.mixing must be one of {MIXING_STRATEGIES}"),
            (tr.soft_labels in SOFT_LABEL_MODES, f"training.soft_labels must be one of {SOFT_LABEL_MODES}"),
            (dc.alpha >= 0.0 and dc.beta >= 0.0, "dacal.alpha and dacal.beta must be non-negative"),
            (0.0 <= dc.mtn_ema_gamma <= 1.0, "dacal.mtn_ema_gamma must lie in [0, 1]"),
            (0.0 < dc.warmup_fraction, "dacal.warmup_fraction must be positive"),
            (dc.mixing_mode in MIXING_MODES, f"dacal.mixing_mode must be one of {MIXING_MODES}"),
            (dc.mtn_layers >= 1 and dc.mtn_hidden >= 1, "MTN needs at least one layer and one channel"),
            (dc.mtn_kernel >= 1 and dc.mtn_kernel % 2 == 1, "dacal.mtn_kernel must be a positive odd number"),
            (0.05 < dc.init_temperature < 20.0, "dacal.init_temperature must lie in (0.05, 20)"),
            (ev.num_bins >= 1, "evaluation.num_bins must be at least 1"),
            (ev.pixels_per_image >= 1, "evaluation.pixels_per_image must be at least 1"),
            (ev.pseudocal_beta > 0.0, "evaluation.pseudocal_beta must be positive"),
            (all(isinstance(c, int) and not isinstance(c, bool) and 0 <= c < ds.num_classes
                 for c in ev.exclude_classes),
             f"evaluation.exclude_classes must be class ids in [0, {ds.num_classes})"),
            (len(set(ev.exclude_classes)) < ds.num_classes, "evaluation.exclude_classes leaves no class to score"),
        ]
        for ok, message in checks:
            if not ok:
                raise ConfigurationError(message)
        for name, spec in (("source_domain", ds.source_domain), ("target_domain", ds.target_domain)):
            if spec.get("noise_sigma", 0.0) < 0 or spec.get("brightness", 1.0) <= 0:
                raise ConfigurationError(f"{name}: noise_sigma must be >= 0 and brightness > 0")
        return self

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)

    def config_hash(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:12]

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ExperimentConfig":
        """Build a config from a (possibly partial) nested dictionary"""
        data = copy.deepcopy(data or {})
        sections = {"dataset": DatasetConfig, "training": TrainingConfig,
                    "dacal": DacalConfig, "evaluation": EvaluationConfig}

        dataset_data = data.get("dataset", {}) or {}
        preset = dataset_data.get("preset", "desk")
        if preset not in PRESETS:
            raise ConfigurationError(f"unknown dataset preset {preset!r}; choose from {sorted(PRESETS)}")

        merged: Dict[str, Any] = {}
        for section, overrides in PRESETS[preset].items():
            merged[section] = copy.deepcopy(overrides)
        for section in sections:
            if section in data and not isinstance(data[section], dict):
                raise ConfigurationError(f"section {section!r} must be an object")
            merged.setdefault(section, {}).update(data.get(section, {}) or {})

        kwargs: Dict[str, Any] = {}
        for section, section_cls in sections.items():
            kwargs[section] = _build_section(section_cls, merged.get(section, {}), section)

        top_fields = {f.name: f for f in dataclasses.fields(cls) if f.name not in sections}
        for key, value in data.items():
            if key in sections:
                continue
            if key not in top_fields:
                raise ConfigurationError(f"unknown config key {key!r}")
            kwargs[key] = _coerce(value, top_fields[key].type, key)
        return cls(**kwargs).validate()


# Preset section overrides, applied before the file's own values
PRESETS: Dict[str, Dict[str, Dict[str, Any]]] = {
    "desk": {},
    "biomedical": {
        "dataset": {
            "num_classes": 2,
            "shape_kinds": ["blob"],
            "source_domain": {"noise_sigma": 0.05, "hue_shift": 0.0, "brightness": 1.0, "blur_radius": 0.0},
            "target_domain": {"noise_sigma": 0.12, "hue_shift": 0.05, "brightness": 0.7, "blur_radius": 1.5},
        },
        "training": {"mixing": "cutmix"},
        "evaluation": {"exclude_classes": [0]},
    },
}


def _coerce(value: Any, expected: Any, key: str) -> Any:
    if expected is bool:
        if not isinstance(value, bool):
            raise ConfigurationError(f"{key} must be true/false, got {value!r}")
        return value
    if expected is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigurationError(f"{key} must be an integer, got {value!r}")
        return value
    if expected is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigurationError(f"{key} must be a number, got {value!r}")
        return float(value)
    if expected is str:
        if not isinstance(value, str):
            raise ConfigurationError(f"{key} must be a string, got {value!r}")
        return value
    return value


def _build_section(section_cls, values: Dict[str, Any], section: str):
    known = {f.name: f for f in dataclasses.fields(section_cls)}
    kwargs = {}
    for key, value in values.items():
        if key not in known:
            raise ConfigurationError(f"unknown config key {section}.{key}")
        expected = known[key].type
        if expected in (bool, int, float, str):
            value = _coerce(value, expected, f"{section}.{key}")
        elif isinstance(known[key].default_factory(), dict):
            if not isinstance(value, dict):
                raise ConfigurationError(f"{section}.{key} must be an object")
            base = known[key].default_factory()
            unknown = set(value) - set(base)
            if unknown:
                raise ConfigurationError(f"unknown keys in {section}.{key}: {sorted(unknown)}")
            base.update({k: _coerce(v, float, f"{section}.{key}.{k}") for k, v in value.items()})
            value = base
        elif not isinstance(value, list):
            raise ConfigurationError(f"{section}.{key} must be a list")
        kwargs[key] = value
    return section_cls(**kwargs)


def load_config(path: Optional[str] = None) -> ExperimentConfig:
    """Load a JSON config file; no path means all defaults"""
    if path is None:
        return ExperimentConfig().validate()
    config_path = Path(path)
    if not config_path.exists():
        raise FileNotFoundError(f"config file not found: {config_path}")
    try:
        with open(config_path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigurationError(f"config file {config_path} is not valid JSON: {e}") from e
    return ExperimentConfig.from_dict(data)


def save_config(config: ExperimentConfig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(config.to_dict(), f, indent=2, sort_keys=True)
    return path


def apply_overrides(config: ExperimentConfig, overrides: Dict[str, Any]) -> ExperimentConfig:
    """Return a new config with dotted-key overrides such as {"dacal.alpha": 0.05}"""
    data = config.to_dict()
    for dotted, value in overrides.items():
        parts = dotted.split(".")
        node = data
        for part in parts[:-1]:
            if part not in node or not isinstance(node[part], dict):
                raise ConfigurationError(f"unknown config key {dotted!r}")
            node = node[part]
        if parts[-1] not in node:
            raise ConfigurationError(f"unknown config key {dotted!r}")
        node[parts[-1]] = value
    return ExperimentConfig.from_dict(data)


def output_root(default: str = "runs") -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, default))


def configure_threads() -> Optional[int]:
    """Apply DACAL_NUM_THREADS to torch, if set"""
    raw = os.environ.get(NUM_THREADS_ENV)
    if not raw:
        return None
    try:
        threads = int(raw)
    except ValueError as e:
        raise ConfigurationError(f"{NUM_THREADS_ENV} must be an integer, got {raw!r}") from e
    if threads < 1:
        raise ConfigurationError(f"{NUM_THREADS_ENV} must be at least 1")
    import torch
    torch.set_num_threads(threads)
    return threads

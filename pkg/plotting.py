"""
Figures
=======

Reliability diagrams and temperature-map panels. Every figure is written
as PDF and PNG, next to a CSV holding the data it was drawn from.
"""

from pathlib import Path
from typing import Dict, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
import pandas as pd
import torch

from errors import ConfigurationError
from evaluation import load_run, predict_logits
from models import mtn_forward
from shift_shapes import Benchmark

FIGURE_FORMATS = ("pdf", "png")
RELIABILITY_COLUMNS = ("bin", "lower", "upper", "count", "mean_confidence", "accuracy")


def _save(fig, stem: Path, data: pd.DataFrame) -> Dict[str, str]:
    stem.parent.mkdir(parents=True, exist_ok=True)
    files = {}
    for fmt in FIGURE_FORMATS:
        path = stem.with_suffix(f".{fmt}")
        fig.savefig(path, dpi=150, bbox_inches="tight")
        files[fmt] = str(path)
    plt.close(fig)
    csv_path = stem.with_suffix(".csv")
    data.to_csv(csv_path, index=False, float_format="%.10g")
    files["csv"] = str(csv_path)
    return files


def read_reliability_csv(path) -> pd.DataFrame:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"reliability CSV not found: {path}")
    frame = pd.read_csv(path)
    missing = set(RELIABILITY_COLUMNS) - set(frame.columns)
    if missing:
        raise ConfigurationError(f"{path} is missing columns {sorted(missing)}")
    return frame


def plot_reliability(frame: pd.DataFrame, stem, title: str = "") -> Dict[str, str]:
    """Accuracy bars per confidence bin, the confidence gap, and the identity diagonal"""
    stem = Path(stem)
    widths = frame["upper"] - frame["lower"]
    accuracy = frame["accuracy"].fillna(0.0)
    confidence = frame["mean_confidence"].fillna(0.0)
    total = frame["count"].sum()
    ece = float((frame["count"] / total * (accuracy - confidence).abs()).sum()) if total else float("nan")

    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    ax.bar(frame["lower"], accuracy, width=widths, align="edge", color="tab:blue",
           edgecolor="black", linewidth=0.5, label="accuracy")
    ax.bar(frame["lower"], confidence - accuracy, bottom=accuracy, width=widths, align="edge",
           color="tab:red", alpha=0.3, edgecolor="tab:red", hatch="//", label="gap")
    ax.plot([0, 1], [0, 1], linestyle="--", color="gray", label="perfect calibration")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1)
    ax.set_xlabel("confidence")
    ax.set_ylabel("accuracy")
    ax.set_title(f"{title} (ECE {ece:.4f})" if title else f"ECE {ece:.4f}")
    ax.legend(loc="upper left", fontsize=8)
    return _save(fig, stem, frame[list(RELIABILITY_COLUMNS)])


def plot_reliability_csv(path, stem=None) -> Dict[str, str]:
    path = Path(path)
    stem = Path(stem) if stem is not None else path.with_name(path.stem + "_diagram")
    return plot_reliability(read_reliability_csv(path), stem, title=path.stem)


def temperature_maps(checkpoint, images: torch.Tensor):
    """(predicted label maps N x H x W, temperature maps N x H x W) for a DA-Cal checkpoint"""
    run = load_run(checkpoint)
    if run.calibrator is None:
        raise ConfigurationError(f"checkpoint {Path(checkpoint).name} carries no meta temperature network")
    logits = predict_logits(run.student, images)
    run.calibrator.eval()
    with torch.no_grad():
        temperature = mtn_forward(run.calibrator, images, logits)
    return logits.argmax(dim=1).numpy(), temperature[:, 0].numpy()


def plot_temperature_maps(checkpoint, benchmark: Benchmark, indices: Sequence[int], stem,
                          split: str = "target_val") -> Dict[str, str]:
    """
    One row per image: input, prediction, temperature heatmap

    The CSV holds one row per pixel with the input RGB, the predicted class
    and the MTN temperature.
    """
    data_split = getattr(benchmark, split)
    indices = list(indices)
    if not indices:
        raise ConfigurationError("no images selected")
    out_of_range = [i for i in indices if not 0 <= i < len(data_split)]
    if out_of_range:
        raise ConfigurationError(f"image indices {out_of_range} outside {split} (0..{len(data_split) - 1})")
    images = data_split.image_tensor(indices)
    predictions, temperatures = temperature_maps(checkpoint, images)

    rows = len(indices)
    fig, axes = plt.subplots(rows, 3, figsize=(9, 3 * rows), squeeze=False)
    vmin, vmax = float(temperatures.min()), float(temperatures.max())
    for r, index in enumerate(indices):
        axes[r, 0].imshow(data_split.images[index])
        axes[r, 0].set_title(f"{split}[{index}]")
        axes[r, 1].imshow(predictions[r], cmap="tab10", vmin=0, vmax=9, interpolation="nearest")
        axes[r, 1].set_title("prediction")
        heat = axes[r, 2].imshow(temperatures[r], cmap="viridis", vmin=vmin, vmax=vmax)
        axes[r, 2].set_title("temperature")
        fig.colorbar(heat, ax=axes[r, 2], fraction=0.046, pad=0.04)
        for ax in axes[r]:
            ax.axis("off")

    n, height, width = temperatures.shape
    rr, cc = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    pixels = data_split.images[np.asarray(indices)].reshape(-1, 3)
    data = pd.DataFrame({
        "image": np.repeat(np.asarray(indices), height * width),
        "row": np.tile(rr.reshape(-1), n),
        "col": np.tile(cc.reshape(-1), n),
        "r": pixels[:, 0],
        "g": pixels[:, 1],
        "b": pixels[:, 2],
        "prediction": predictions.reshape(-1),
        "temperature": temperatures.reshape(-1),
    })
    return _save(fig, Path(stem), data)

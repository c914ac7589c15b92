"""
Tests for the ShiftShapes benchmark generator
"""

import hashlib

import numpy as np
import pytest

from config import DatasetConfig, ExperimentConfig
from errors import ConfigurationError, DatasetError
from shift_shapes import (Benchmark, DomainSpec, default_palette, generate_scene, load_benchmark, make_benchmark,
                          render, save_benchmark)


def small_dataset(**overrides):
    values = {"height": 16, "width": 16, "n_source_train": 6, "n_target_train": 5, "n_target_val": 4}
    values.update(overrides)
    return ExperimentConfig.from_dict({"dataset": values}).dataset


def test_binary_scene_has_background_and_one_shape():
    scene = generate_scene(2, (32, 32), np.random.default_rng(0))
    assert set(np.unique(scene.label).tolist()) == {0, 1}
    assert len(scene.shapes) == 1


def test_scene_is_deterministic():
    first = generate_scene(4, (32, 32), np.random.default_rng(5))
    second = generate_scene(4, (32, 32), np.random.default_rng(5))
    assert np.array_equal(first.label, second.label)


def test_scene_rejects_bad_arguments():
    rng = np.random.default_rng(0)
    with pytest.raises(ConfigurationError):
        generate_scene(1, (32, 32), rng)
    with pytest.raises(ConfigurationError):
        generate_scene(3, (8, 32), rng)
    with pytest.raises(ConfigurationError):
        generate_scene(3, (32, 32), rng, shape_kinds=["hexagon"])


def test_every_class_is_usually_visible():
    rng = np.random.default_rng(1)
    counts = np.zeros(4)
    for _ in range(1000):
        label = generate_scene(4, (32, 32), rng).label
        counts[np.unique(label)] += 1
    assert (counts / 1000 >= 0.75).all()


def test_identity_domain_renders_palette():
    scene = generate_scene(3, (32, 32), np.random.default_rng(2))
    spec = DomainSpec(palette=default_palette(3))
    sample = render(scene, spec, np.random.default_rng(0))
    expected = default_palette(3).astype(np.float32)[scene.label]
    assert np.array_equal(sample.image, expected)
    assert sample.image.dtype == np.float32


def test_noise_has_requested_spread():
    scene = generate_scene(2, (64, 64), np.random.default_rng(3))
    spec = DomainSpec(palette=np.full((2, 3), 0.5), noise_sigma=0.1)
    sample = render(scene, spec, np.random.default_rng(0))
    assert np.std(sample.image - 0.5) == pytest.approx(0.1, rel=0.05)


def test_domains_share_labels_not_pixels():
    scene = generate_scene(4, (32, 32), np.random.default_rng(4))
    config = DatasetConfig()
    source = render(scene, DomainSpec.from_dict(config.source_domain, 4), np.random.default_rng(0), "source")
    target = render(scene, DomainSpec.from_dict(config.target_domain, 4), np.random.default_rng(0), "target")
    assert np.array_equal(source.label, target.label)
    assert not np.allclose(source.image, target.image)
    assert 0.0 <= target.image.min() and target.image.max() <= 1.0


def test_domain_spec_validation():
    with pytest.raises(ConfigurationError):
        DomainSpec(palette=default_palette(2), noise_sigma=-0.1)
    with pytest.raises(ConfigurationError):
        DomainSpec(palette=default_palette(2), brightness=0.0)


def test_default_palette_extends_past_base_colors():
    palette = default_palette(8)
    assert palette.shape == (8, 3)
    assert len({tuple(c) for c in palette.round(6).tolist()}) == 8


def test_benchmark_split_sizes_and_withheld_labels():
    benchmark = make_benchmark(small_dataset(), seed=0)
    assert [len(s) for s in benchmark.splits()] == [6, 5, 4]
    assert benchmark.source_train.image_tensor().shape == (6, 3, 16, 16)
    assert benchmark.target_train.labels_withheld
    with pytest.raises(ConfigurationError):
        benchmark.target_train.training_labels()
    with pytest.raises(ConfigurationError):
        benchmark.target_train.label_tensor([0])
    assert benchmark.target_train.training_labels(oracle=True).shape == (5, 16, 16)
    assert benchmark.target_val.label_tensor([0, 1]).shape == (2, 16, 16)


def test_default_desk_sizes():
    config = DatasetConfig()
    assert (config.n_source_train, config.n_target_train, config.n_target_val) == (200, 200, 100)
    assert (config.height, config.width, config.num_classes) == (64, 64, 4)


def test_source_partition_is_disjoint_and_seeded():
    benchmark = make_benchmark(small_dataset(n_source_train=10), seed=0)
    train, holdout = benchmark.source_partition(0.2)
    assert len(holdout) == 2 and len(train) == 8
    assert set(train).isdisjoint(holdout)
    again = benchmark.source_partition(0.2)
    assert np.array_equal(train, again[0]) and np.array_equal(holdout, again[1])


def test_same_seed_writes_identical_bytes(tmp_path):
    config = small_dataset()
    first = save_benchmark(make_benchmark(config, seed=3), tmp_path / "a")
    second = save_benchmark(make_benchmark(config, seed=3), tmp_path / "b")
    names = sorted(p.name for p in first.iterdir())
    assert names == sorted(p.name for p in second.iterdir())
    for name in names:
        assert (first / name).read_bytes() == (second / name).read_bytes(), name


def test_different_seed_changes_data():
    config = small_dataset()
    assert make_benchmark(config, 0).fingerprint() != make_benchmark(config, 1).fingerprint()


def test_fingerprint_is_sha256_of_split_arrays():
    benchmark = make_benchmark(small_dataset(), seed=0)
    digest = hashlib.sha256()
    for split in (benchmark.source_train, benchmark.target_train, benchmark.target_val):
        digest.update(split.images.astype("<f4").tobytes())
        digest.update(split.labels.astype(np.uint8).tobytes())
    assert benchmark.fingerprint() == digest.hexdigest()[:16]


def test_save_load_round_trip(tmp_path):
    benchmark = make_benchmark(small_dataset(), seed=0)
    save_benchmark(benchmark, tmp_path / "data")
    loaded = load_benchmark(tmp_path / "data")
    assert isinstance(loaded, Benchmark)
    assert loaded.fingerprint() == benchmark.fingerprint()
    assert loaded.num_classes == 4
    assert loaded.target_train.labels_withheld
    assert np.array_equal(loaded.target_spec.palette, benchmark.target_spec.palette)


def test_save_refuses_non_empty_directory(tmp_path):
    benchmark = make_benchmark(small_dataset(), seed=0)
    save_benchmark(benchmark, tmp_path / "data")
    with pytest.raises(FileExistsError):
        save_benchmark(benchmark, tmp_path / "data")
    save_benchmark(benchmark, tmp_path / "data", force=True)


def test_load_detects_damage(tmp_path):
    benchmark = make_benchmark(small_dataset(), seed=0)
    directory = save_benchmark(benchmark, tmp_path / "data")

    labels = directory / "target_val_labels.bin"
    raw = bytearray(labels.read_bytes())
    raw[0] = (raw[0] + 1) % 4
    labels.write_bytes(bytes(raw))
    with pytest.raises(DatasetError):
        load_benchmark(directory)

    labels.write_bytes(bytes(raw[:-1]))
    with pytest.raises(DatasetError):
        load_benchmark(directory)

    labels.unlink()
    with pytest.raises(DatasetError):
        load_benchmark(directory)
    with pytest.raises(DatasetError):
        load_benchmark(tmp_path / "missing")

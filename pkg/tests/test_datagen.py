#!/usr/bin/env python3
"""
Tests for the synthetic camouflage corpus and its on-disk layout
"""

import json

import numpy as np
import pytest

from umbd.datagen import (
    MANIFEST_NAME,
    MAX_AREA,
    MIN_AREA,
    generate_camo_sample,
    image_digest,
    iter_samples,
    load_dataset,
    load_manifest,
    quantize_image,
    read_image,
    read_mask,
    write_dataset,
    write_mask,
)
from umbd.exceptions import ConfigurationError, DatasetError
from umbd.models import CorruptionSpec, DatasetManifest


@pytest.fixture
def manifest():
    return DatasetManifest(seed=7, train_count=4, test_count=3, image_size=32)


def test_same_seed_same_sample():
    first = generate_camo_sample(42, size=32)
    second = generate_camo_sample(42, size=32)
    assert np.array_equal(first.image, second.image)
    assert np.array_equal(first.mask, second.mask)
    assert not np.array_equal(first.image, generate_camo_sample(43, size=32).image)


def test_sample_layout_and_ranges():
    sample = generate_camo_sample(0, size=48)
    assert sample.image.shape == (3, 48, 48)
    assert sample.image.dtype == np.float32
    assert sample.image.min() >= 0.0 and sample.image.max() <= 1.0
    assert sample.mask.shape == (48, 48)
    assert set(np.unique(sample.mask)) <= {0, 1}


def test_foreground_area_stays_in_range():
    for seed in range(40):
        fraction = generate_camo_sample(seed, size=32).foreground_fraction
        assert MIN_AREA <= fraction <= MAX_AREA


def test_zero_strength_leaves_no_colour_gap():
    """With strength 0 the foreground differs from the background only by texture"""
    gaps = []
    for seed in range(10):
        sample = generate_camo_sample(seed, size=64, strength=0.0)
        fg = sample.image[:, sample.mask == 1].mean()
        bg = sample.image[:, sample.mask == 0].mean()
        gaps.append(abs(fg - bg))
    strong = []
    for seed in range(10):
        sample = generate_camo_sample(seed, size=64, strength=1.0)
        strong.append(abs(sample.image[:, sample.mask == 1].mean() - sample.image[:, sample.mask == 0].mean()))
    assert np.mean(gaps) < 0.05
    assert np.mean(strong) > np.mean(gaps)


def test_splits_are_independent_streams(manifest):
    train = list(iter_samples(manifest, "train"))
    test = list(iter_samples(manifest, "test"))
    assert [s.id for s in train] == ["train_00000", "train_00001", "train_00002", "train_00003"]
    assert len(test) == 3
    assert {image_digest(s.image) for s in train}.isdisjoint({image_digest(s.image) for s in test})


def test_unknown_split_is_rejected(manifest):
    with pytest.raises(ConfigurationError):
        list(iter_samples(manifest, "val"))


def test_manifest_rejects_tiny_images():
    with pytest.raises(ConfigurationError):
        DatasetManifest(image_size=8)


def test_write_and_load_round_trip(manifest, tmp_path):
    root = write_dataset(manifest, tmp_path / "data")
    assert (root / MANIFEST_NAME).is_file()
    assert load_manifest(root) == manifest

    loaded = load_dataset(root, "train")
    generated = list(iter_samples(manifest, "train"))
    assert [s.id for s in loaded] == [s.id for s in generated]
    for disk_sample, fresh in zip(loaded, generated):
        assert np.array_equal(disk_sample.mask, fresh.mask)
        assert np.abs(disk_sample.image - fresh.image).max() <= 0.5 / 255 + 1e-6
        assert image_digest(disk_sample.image) == image_digest(fresh.image)


def test_manifest_keeps_corruption_settings(tmp_path):
    spec = CorruptionSpec(radius_range=(1, 3), softness=0.25)
    manifest = DatasetManifest(seed=1, train_count=1, test_count=1, image_size=16, corruption=spec)
    write_dataset(manifest, tmp_path)
    assert load_manifest(tmp_path).corruption == spec


def test_missing_mask_is_a_dataset_error(manifest, tmp_path):
    root = write_dataset(manifest, tmp_path)
    (root / "test" / "masks" / "test_00001.png").unlink()
    with pytest.raises(DatasetError):
        load_dataset(root, "test")


def test_missing_or_corrupt_manifest(tmp_path):
    with pytest.raises(DatasetError):
        load_manifest(tmp_path)
    (tmp_path / MANIFEST_NAME).write_text("{not json", encoding="utf-8")
    with pytest.raises(DatasetError):
        load_manifest(tmp_path)
    (tmp_path / MANIFEST_NAME).write_text(json.dumps({"image_size": 4}), encoding="utf-8")
    with pytest.raises(DatasetError):
        load_manifest(tmp_path)


def test_sample_count_must_match_manifest(manifest, tmp_path):
    root = write_dataset(manifest, tmp_path)
    for name in ("images", "masks"):
        (root / "train" / name / "train_00003.png").unlink()
    with pytest.raises(DatasetError):
        load_dataset(root, "train")


def test_mask_png_round_trip(tmp_path):
    soft = np.linspace(0, 1, 64, dtype=np.float32).reshape(8, 8)
    path = write_mask(soft, tmp_path / "soft.png")
    back = read_mask(path, binarize=False)
    assert np.abs(back - soft).max() <= 0.5 / 255 + 1e-6
    assert np.array_equal(read_mask(path), (soft * 255 > 127.5).astype(np.uint8))


def test_unreadable_image_is_a_dataset_error(tmp_path):
    path = tmp_path / "broken.png"
    path.write_bytes(b"not a png")
    with pytest.raises(DatasetError):
        read_image(path)
    with pytest.raises(DatasetError):
        read_mask(path)


def test_quantize_image_layout():
    image = np.zeros((3, 2, 4), dtype=np.float32)
    image[0] = 1.0
    pixels = quantize_image(image)
    assert pixels.shape == (2, 4, 3)
    assert pixels.dtype == np.uint8
    assert pixels[..., 0].min() == 255 and pixels[..., 1].max() == 0

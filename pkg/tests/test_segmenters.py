#!/usr/bin/env python3
"""
Tests for the frozen prior segmenters and the mask corruption they rely on
"""

import numpy as np
import pytest
import torch

from umbd.datagen import iter_samples, quantize_image
from umbd.exceptions import DatasetError, FreezeViolationError, ShapeMismatchError
from umbd.metrics import mae
from umbd.models import CorruptionSpec, DatasetManifest, DatasetSample, PriorConfig, PriorKind
from umbd.segmenters import (
    CorruptedOracleSegmenter,
    ToyCNNSegmenter,
    build_prior,
    corrupt_mask,
    corrupted_oracle_segmenter,
    disk,
    toy_cnn_segmenter_train,
    uncertainty_gt,
)


@pytest.fixture(scope="module")
def samples():
    manifest = DatasetManifest(seed=3, train_count=6, test_count=2, image_size=32)
    return list(iter_samples(manifest, "train"))


def square_mask(size: int = 32, lo: int = 8, hi: int = 24) -> np.ndarray:
    mask = np.zeros((size, size), dtype=np.float32)
    mask[lo:hi, lo:hi] = 1.0
    return mask


# U_GT

def test_uncertainty_gt_is_absolute_difference():
    Mc = torch.tensor([[[[0.2, 0.9], [1.0, 0.0]]]])
    M_GT = torch.tensor([[[[0.0, 1.0], [1.0, 1.0]]]])
    assert torch.allclose(uncertainty_gt(Mc, M_GT), torch.tensor([[[[0.2, 0.1], [0.0, 1.0]]]]))


def test_uncertainty_gt_rejects_shape_mismatch():
    with pytest.raises(ShapeMismatchError):
        uncertainty_gt(torch.zeros(1, 1, 4, 4), torch.zeros(1, 1, 4, 5))


# Corruption

def test_disk_footprint():
    assert disk(0).sum() == 1
    assert disk(1).sum() == 5
    assert disk(2).shape == (5, 5)


def test_severity_zero_returns_ground_truth():
    mask = square_mask()
    coarse = corrupt_mask(mask, CorruptionSpec.none(), np.random.default_rng(0))
    assert coarse.dtype == np.float32
    assert np.array_equal(coarse, mask)


def test_corruption_is_deterministic_and_bounded():
    mask = square_mask()
    spec = CorruptionSpec(radius_range=(1, 3), false_blob_range=(1, 2), drop_blob_range=(1, 2))
    first = corrupt_mask(mask, spec, np.random.default_rng(11))
    second = corrupt_mask(mask, spec, np.random.default_rng(11))
    assert np.array_equal(first, second)
    assert first.min() >= 0.0 and first.max() <= 1.0
    assert mae(first, mask) > 0.0


def test_dilation_only_grows_the_mask():
    mask = square_mask()
    spec = CorruptionSpec(radius_range=(2, 2), blur_range=(0.0, 0.0), false_blob_range=(0, 0),
                          drop_blob_range=(0, 0), softness=0.0)
    grown = shrunk = 0
    for seed in range(12):
        coarse = corrupt_mask(mask, spec, np.random.default_rng(seed))
        if coarse.sum() > mask.sum():
            assert bool((coarse >= mask).all())
            grown += 1
        else:
            assert bool((coarse <= mask).all())
            shrunk += 1
    assert grown > 0 and shrunk > 0


def test_corruption_of_empty_mask_skips_drop_blobs():
    spec = CorruptionSpec(radius_range=(0, 0), false_blob_range=(0, 0), drop_blob_range=(2, 2), softness=0.0)
    coarse = corrupt_mask(np.zeros((16, 16), dtype=np.float32), spec, np.random.default_rng(0))
    assert coarse.sum() == 0.0


# Oracle

def test_oracle_segments_registered_images(samples):
    prior = corrupted_oracle_segmenter(samples, CorruptionSpec(), seed=5)
    assert len(prior) == len(samples)
    assert prior.kind is PriorKind.ORACLE
    x = torch.stack([s.image_tensor() for s in samples[:3]])
    Mc, features = prior.segment(x)
    assert Mc.shape == (3, 1, 32, 32)
    assert bool(((Mc >= 0) & (Mc <= 1)).all())
    assert features.channels == prior.feature_channels
    features.validate(32, 32)
    for i, sample in enumerate(samples[:3]):
        assert np.array_equal(Mc[i, 0].numpy(), prior.coarse_for(sample.image))


def test_oracle_lookup_survives_quantisation(samples):
    """A sample and its 8-bit round trip map to the same coarse mask"""
    prior = corrupted_oracle_segmenter(samples[:1], seed=1)
    sample = samples[0]
    roundtrip = quantize_image(sample.image).transpose(2, 0, 1).astype(np.float32) / 255.0
    assert np.array_equal(prior.coarse_for(roundtrip), prior.coarse_for(sample.image))


def test_oracle_is_reproducible_across_instances(samples):
    first = corrupted_oracle_segmenter(samples, seed=2)
    second = corrupted_oracle_segmenter(reversed(samples), seed=2)
    for sample in samples:
        assert np.array_equal(first.coarse_for(sample.image), second.coarse_for(sample.image))
    assert first.checksum() == second.checksum()
    assert first.checksum() != CorruptedOracleSegmenter(seed=3).checksum()


def test_oracle_rejects_unregistered_image(samples):
    prior = corrupted_oracle_segmenter(samples[:2])
    with pytest.raises(DatasetError):
        prior.coarse_for(samples[3].image)


def test_oracle_encoder_is_frozen(samples):
    prior = corrupted_oracle_segmenter(samples[:1])
    assert not any(p.requires_grad for p in prior.network.parameters())
    assert not prior.network.training


def test_assert_unchanged_detects_parameter_edits(samples):
    prior = corrupted_oracle_segmenter(samples[:1])
    checksum = prior.checksum()
    prior.assert_unchanged(checksum)
    with torch.no_grad():
        next(prior.network.parameters()).add_(1.0)
    with pytest.raises(FreezeViolationError):
        prior.assert_unchanged(checksum)


def test_corpus_mae_is_moderate_for_default_corruption():
    """The default corruption leaves a prior that is wrong but not useless"""
    manifest = DatasetManifest(seed=0, train_count=40, test_count=0, image_size=64)
    corpus = list(iter_samples(manifest, "train"))
    prior = corrupted_oracle_segmenter(corpus, CorruptionSpec(), seed=0)
    score = np.mean([mae(prior.coarse_for(s.image), s.mask) for s in corpus])
    assert 0.01 < score < 0.15


# Toy CNN

def test_toy_cnn_rejects_empty_training_set():
    with pytest.raises(DatasetError):
        toy_cnn_segmenter_train([])


def test_toy_cnn_training_is_deterministic_and_frozen(samples):
    first = toy_cnn_segmenter_train(samples, epochs=1, seed=4, batch_size=4)
    second = toy_cnn_segmenter_train(samples, epochs=1, seed=4, batch_size=4)
    assert isinstance(first, ToyCNNSegmenter)
    assert first.checksum() == second.checksum()
    assert not any(p.requires_grad for p in first.network.parameters())

    x = torch.stack([s.image_tensor() for s in samples[:2]])
    Mc, features = first.segment(x)
    assert Mc.shape == (2, 1, 32, 32)
    assert bool(((Mc >= 0) & (Mc <= 1)).all())
    features.validate(32, 32)


def test_build_prior_dispatches_on_kind(samples):
    extra = [DatasetSample(image=np.full((3, 32, 32), 0.25, dtype=np.float32),
                           mask=np.zeros((32, 32), dtype=np.float32), id="extra")]
    oracle = build_prior(PriorConfig(kind=PriorKind.ORACLE, seed=1), samples, CorruptionSpec(), extra)
    assert isinstance(oracle, CorruptedOracleSegmenter)
    assert len(oracle) == len(samples) + 1
    toy = build_prior(PriorConfig(kind=PriorKind.TOY_CNN, seed=1, epochs=1), samples)
    assert isinstance(toy, ToyCNNSegmenter)

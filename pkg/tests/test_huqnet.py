#!/usr/bin/env python3
"""
Tests for the hybrid uncertainty network and its primitives
"""

import math

import pytest
import torch

from umbd.exceptions import ShapeMismatchError
from umbd.huqnet import (
    HUQNet,
    WindowCrossAttention,
    entropy_map,
    mc_variance,
    mean_max_normalize,
    pad_to_multiple,
    window_merge,
    window_partition,
)
from umbd.models import FusionConfig, HUQNetConfig, TrainConfig

from tests.conftest import check_parameter_gradients

TINY = HUQNetConfig(
    backbone_channels=(4, 8, 8, 8),
    mc_samples=3,
    fusion=FusionConfig(window_size=4, head_dim=2, embed_dim=4),
)


# Primitives

def test_entropy_map_known_values():
    """1 bit at 0.5, 0 at the certain ends, symmetric around 0.5"""
    Mc = torch.tensor([0.0, 0.5, 1.0, 0.25, 0.75])
    h = entropy_map(Mc)
    assert h[0].item() == 0.0
    assert h[2].item() == 0.0
    assert h[1].item() == pytest.approx(1.0, abs=1e-6)
    expected = -(0.25 * math.log2(0.25) + 0.75 * math.log2(0.75))
    assert h[3].item() == pytest.approx(expected, abs=1e-6)
    assert h[3].item() == pytest.approx(h[4].item(), abs=1e-6)


def test_entropy_map_of_binary_mask_is_zero():
    Mc = torch.bernoulli(torch.full((2, 1, 8, 8), 0.5), generator=torch.Generator().manual_seed(0))
    assert torch.equal(entropy_map(Mc), torch.zeros_like(Mc))


def test_mean_max_normalize():
    v = torch.tensor([[[[0.0, 1.0], [2.0, 5.0]]]])
    out = mean_max_normalize(v)
    assert out.shape == v.shape
    assert out[0, 0, 1, 1].item() == pytest.approx(1.0, abs=1e-6)
    assert out[0, 0, 0, 0].item() == 0.0
    assert out[0, 0, 1, 0].item() == pytest.approx((2.0 - 2.0) / 3.0, abs=1e-6)
    flat = torch.full((1, 1, 4, 4), 0.5)
    assert torch.equal(mean_max_normalize(flat), torch.zeros_like(flat))


def test_mc_variance_needs_two_samples():
    with pytest.raises(ValueError):
        mc_variance(torch.zeros(1, 1, 2, 2), torch.ones(1, 1, 2, 2), K=1)


def test_mc_variance_converges_to_sigma_squared():
    mu = torch.zeros(1, 1, 4, 4)
    sigma = torch.full((1, 1, 4, 4), 0.5)
    variance, draw = mc_variance(mu, sigma, K=20000, generator=torch.Generator().manual_seed(3))
    assert torch.allclose(variance, torch.full_like(variance, 0.25), atol=0.02)
    assert draw.shape == mu.shape


def test_mc_variance_is_zero_without_spread():
    variance, draw = mc_variance(torch.full((1, 1, 2, 2), 0.3), torch.zeros(1, 1, 2, 2), K=4)
    assert torch.equal(variance, torch.zeros_like(variance))
    assert torch.allclose(draw, torch.full_like(draw, 0.3))


def test_window_partition_and_merge_are_inverse():
    x = torch.arange(2 * 3 * 8 * 12, dtype=torch.float32).view(2, 3, 8, 12)
    windows = window_partition(x, 4)
    assert windows.shape == (2 * 2 * 3, 16, 3)
    assert torch.equal(window_merge(windows, 4, 2, 8, 12), x)


def test_window_partition_rejects_ragged_maps():
    with pytest.raises(ShapeMismatchError):
        window_partition(torch.zeros(1, 1, 6, 8), 4)


def test_pad_to_multiple():
    padded, size = pad_to_multiple(torch.ones(1, 1, 5, 9), 4)
    assert padded.shape == (1, 1, 8, 12)
    assert size == (5, 9)
    assert padded[..., 5:, :].sum().item() == 0.0


def test_cross_attention_starts_as_identity_on_discriminative_map():
    attention = WindowCrossAttention(FusionConfig(window_size=4, head_dim=2, embed_dim=4))
    gen = torch.Generator().manual_seed(5)
    U_D, U_E, U_B = (torch.rand(2, 1, 6, 10, generator=gen) for _ in range(3))
    fused, weights = attention(U_D, U_E, U_B, return_attention=True)
    assert torch.allclose(fused, U_D)
    assert torch.allclose(weights.sum(dim=-1), torch.ones_like(weights.sum(dim=-1)))


def test_cross_attention_rejects_mismatched_maps():
    attention = WindowCrossAttention()
    with pytest.raises(ShapeMismatchError):
        attention(torch.zeros(1, 1, 8, 8), torch.zeros(1, 1, 8, 8), torch.zeros(1, 1, 4, 4))


# Network

def test_bundle_shapes_and_ranges(generator):
    model = HUQNet(TINY).eval()
    x = torch.rand(2, 3, 16, 16, generator=generator)
    Mc = torch.rand(2, 1, 16, 16, generator=generator)
    with torch.no_grad():
        bundle = model(x, Mc, torch.Generator().manual_seed(0))
    for name in ("u_entropy", "u_bnn", "u_disc", "u_hat"):
        value = getattr(bundle, name)
        assert value.shape == (2, 1, 16, 16), name
        assert bool(((value >= 0) & (value <= 1)).all()), name
    assert bundle.mu.shape == bundle.sigma.shape == bundle.c_logit.shape == (2, 1, 16, 16)
    assert bool((bundle.sigma > 0).all())


def test_same_generator_gives_same_bundle(generator):
    model = HUQNet(TINY).eval()
    x = torch.rand(1, 3, 16, 16, generator=generator)
    Mc = torch.rand(1, 1, 16, 16, generator=generator)
    with torch.no_grad():
        first = model(x, Mc, torch.Generator().manual_seed(9))
        second = model(x, Mc, torch.Generator().manual_seed(9))
    assert torch.equal(first.u_hat, second.u_hat)
    assert torch.equal(first.u_bnn, second.u_bnn)


def test_mismatched_coarse_mask_is_rejected():
    model = HUQNet(TINY)
    with pytest.raises(ShapeMismatchError):
        model(torch.zeros(1, 3, 16, 16), torch.zeros(1, 1, 8, 8))


def test_module_switches(generator):
    """Disabled branches feed zeros and skip the fusion"""
    config = TINY.replace(use_bnn=False, use_cross_attention=False)
    model = HUQNet(config).eval()
    assert model.bnn is None
    x = torch.rand(1, 3, 16, 16, generator=generator)
    Mc = torch.rand(1, 1, 16, 16, generator=generator)
    with torch.no_grad():
        bundle = model(x, Mc)
    assert bundle.c_logit is None and bundle.mu is None
    assert torch.equal(bundle.u_bnn, torch.zeros_like(Mc))
    assert torch.equal(bundle.u_hat, bundle.u_disc)


def test_parameter_groups_cover_every_parameter():
    model = HUQNet(TINY)
    train = TrainConfig()
    groups = model.parameter_groups(train)
    assert [g["name"] for g in groups] == ["backbone", "bnn", "huqnet"]
    assert [g["lr"] for g in groups] == [train.lr_backbone, train.lr_bnn, train.lr_huqnet]
    grouped = [id(p) for g in groups for p in g["params"]]
    assert len(grouped) == len(set(grouped))
    assert set(grouped) == {id(p) for p in model.parameters()}


def test_parameter_gradients_match_finite_differences(generator):
    """Autograd agrees with central differences on a float64 model"""
    torch.manual_seed(0)
    model = HUQNet(TINY).double().eval()
    x = torch.rand(2, 3, 8, 8, generator=generator, dtype=torch.float64)
    Mc = torch.rand(2, 1, 8, 8, generator=generator, dtype=torch.float64)
    weights = torch.randn(2, 1, 8, 8, generator=generator, dtype=torch.float64)

    def loss_fn():
        bundle = model(x, Mc, torch.Generator().manual_seed(4))
        return (bundle.u_hat * weights).sum() + (bundle.u_disc * weights).sum() + bundle.mu.sum() + bundle.sigma.sum()

    failures = check_parameter_gradients(model, loss_fn, count=25)
    assert failures == []

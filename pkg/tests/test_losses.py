#!/usr/bin/env python3
"""
Tests for the training objectives
"""

import math

import pytest
import torch

from umbd.diffusion import bernoulli_posterior, make_cosine_schedule, predict_start_from_noise, sample_forward
from umbd.exceptions import ShapeMismatchError
from umbd.losses import (
    bnn_loss,
    dice_loss,
    diffusion_loss,
    gaussian_kl,
    huqnet_loss,
    kl_bernoulli,
    weight_map,
    weighted_bce,
    weighted_iou,
)


def square(size: int = 16, lo: int = 4, hi: int = 12) -> torch.Tensor:
    mask = torch.zeros(1, 1, size, size, dtype=torch.float64)
    mask[..., lo:hi, lo:hi] = 1.0
    return mask


# Building blocks

def test_weight_map_is_one_away_from_edges():
    M_GT = square(64, 16, 48)
    w = weight_map(M_GT, kernel=5, factor=5.0)
    assert w.shape == M_GT.shape
    assert w[0, 0, 32, 32].item() == pytest.approx(1.0)
    assert w[0, 0, 2, 60].item() == pytest.approx(1.0)
    assert w[0, 0, 16, 32].item() > 1.0
    assert bool((w >= 1.0).all())


def test_kl_bernoulli_known_values():
    q = torch.tensor([0.5])
    assert kl_bernoulli(q, q).item() == pytest.approx(0.0, abs=1e-7)
    assert kl_bernoulli(torch.tensor([1.0]), torch.tensor([0.5])).item() == pytest.approx(math.log(2), rel=1e-4)
    assert kl_bernoulli(torch.tensor([0.2]), torch.tensor([0.7])).item() > 0


def test_kl_bernoulli_is_finite_at_the_ends():
    value = kl_bernoulli(torch.tensor([0.0, 1.0]), torch.tensor([1.0, 0.0]))
    assert math.isfinite(value.item())
    assert value.item() > 10


def test_gaussian_kl_known_values():
    assert gaussian_kl(torch.zeros(4), torch.ones(4)).item() == pytest.approx(0.0, abs=1e-12)
    assert gaussian_kl(torch.ones(4), torch.ones(4)).item() == pytest.approx(0.5)
    assert math.isfinite(gaussian_kl(torch.zeros(2), torch.zeros(2)).item())


def test_dice_loss_extremes():
    gt = square()
    assert dice_loss(gt, gt).item() == pytest.approx(0.0)
    disjoint = 1 - gt
    expected = 1 - 1 / (disjoint.sum().item() + gt.sum().item() + 1)
    assert dice_loss(disjoint, gt).item() == pytest.approx(expected)


def test_weighted_bce_reduces_to_bce_with_unit_weights():
    gen = torch.Generator().manual_seed(0)
    pred = torch.rand(2, 1, 8, 8, generator=gen, dtype=torch.float64) * 0.9 + 0.05
    gt = (torch.rand(2, 1, 8, 8, generator=gen, dtype=torch.float64) > 0.5).double()
    expected = torch.nn.functional.binary_cross_entropy(pred, gt)
    assert weighted_bce(pred, gt, torch.ones_like(gt)).item() == pytest.approx(expected.item(), rel=1e-10)


def test_weighted_bce_is_scale_invariant_in_weights():
    gen = torch.Generator().manual_seed(1)
    pred = torch.rand(1, 1, 8, 8, generator=gen, dtype=torch.float64)
    gt = square(8, 2, 6)
    w = torch.rand(1, 1, 8, 8, generator=gen, dtype=torch.float64) + 0.5
    assert weighted_bce(pred, gt, w).item() == pytest.approx(weighted_bce(pred, gt, 3 * w).item(), rel=1e-10)


def test_weighted_iou_hand_case():
    gt = square()
    assert weighted_iou(gt, gt, torch.ones_like(gt)).item() == pytest.approx(0.0)
    empty = torch.zeros_like(gt)
    expected = 1 - 1 / (gt.sum().item() + 1)
    assert weighted_iou(empty, gt, torch.ones_like(gt)).item() == pytest.approx(expected)


def test_losses_reject_shape_mismatch():
    a = torch.zeros(1, 1, 4, 4)
    b = torch.zeros(1, 1, 4, 5)
    for fn in (weighted_bce, weighted_iou):
        with pytest.raises(ShapeMismatchError):
            fn(a, b, a)
    with pytest.raises(ShapeMismatchError):
        kl_bernoulli(a, b)
    with pytest.raises(ShapeMismatchError):
        huqnet_loss(a, b)


# Composite losses

def test_diffusion_loss_components_sum_to_total():
    gen = torch.Generator().manual_seed(2)
    M_GT = square()
    q = torch.rand(1, 1, 16, 16, generator=gen, dtype=torch.float64)
    p = torch.rand(1, 1, 16, 16, generator=gen, dtype=torch.float64)
    M_r = torch.rand(1, 1, 16, 16, generator=gen, dtype=torch.float64)
    report = diffusion_loss(q, p, M_r, M_GT)
    assert set(report.components) == {"kl", "wiou", "wbce"}
    assert report.total.item() == pytest.approx(sum(report.components.values()), rel=1e-9)
    assert report.is_finite()


def test_diffusion_loss_vanishes_for_a_perfect_prediction():
    M_GT = square()
    q = torch.full_like(M_GT, 0.3)
    report = diffusion_loss(q, q, M_GT, M_GT)
    assert report.components["kl"] == pytest.approx(0.0, abs=1e-9)
    assert report.components["wiou"] == pytest.approx(0.0, abs=1e-9)
    assert report.components["wbce"] < 1e-5


def test_zero_noise_prediction_has_positive_kl_on_noisy_latents():
    """A predictor that always answers eps = 0 mistakes y_t for y0, which the posterior term must notice"""
    schedule = make_cosine_schedule(20)
    y0 = square()
    Mc_tilde = torch.full_like(y0, 0.5)
    eps, y_t = sample_forward(schedule, 10, y0, Mc_tilde, torch.Generator().manual_seed(6))
    assert bool((y_t != y0).any())

    q = bernoulli_posterior(schedule, 10, y_t, y0, Mc_tilde)
    blind = bernoulli_posterior(schedule, 10, y_t, predict_start_from_noise(y_t, torch.zeros_like(y_t)), Mc_tilde)
    exact = bernoulli_posterior(schedule, 10, y_t, predict_start_from_noise(y_t, eps), Mc_tilde)
    assert kl_bernoulli(q, blind).item() > 0.0
    assert kl_bernoulli(q, exact).item() == pytest.approx(0.0, abs=1e-12)


def test_huqnet_loss_without_bayesian_head():
    U_GT = square()
    report = huqnet_loss(U_GT * 0.9, U_GT)
    assert set(report.components) == {"huq_bce", "dice"}
    assert report.total.item() == pytest.approx(report.components["huq_bce"] + report.components["dice"])


def test_huqnet_loss_with_bayesian_head():
    gen = torch.Generator().manual_seed(3)
    U_GT = square()
    U_hat = torch.rand(1, 1, 16, 16, generator=gen, dtype=torch.float64)
    c = torch.randn(1, 1, 16, 16, generator=gen, dtype=torch.float64)
    mu = torch.randn(1, 1, 16, 16, generator=gen, dtype=torch.float64)
    sigma = torch.rand(1, 1, 16, 16, generator=gen, dtype=torch.float64) + 0.1
    report = huqnet_loss(U_hat, U_GT, c, U_GT, mu, sigma, eta=0.1)
    c_ = report.components
    assert set(c_) == {"huq_bce", "dice", "bnn_bce", "bnn_kl"}
    assert report.total.item() == pytest.approx(c_["huq_bce"] + c_["dice"] + c_["bnn_bce"] + 0.1 * c_["bnn_kl"])
    expected_bnn = bnn_loss(c, U_GT, mu, sigma, eta=0.1).item()
    assert c_["bnn_bce"] + 0.1 * c_["bnn_kl"] == pytest.approx(expected_bnn)


def test_diffusion_loss_gradients_match_finite_differences():
    """d loss / d p for the posterior and the refined-mask inputs"""
    gen = torch.Generator().manual_seed(4)
    M_GT = square(8, 2, 6)
    q = torch.rand(1, 1, 8, 8, generator=gen, dtype=torch.float64) * 0.8 + 0.1
    p = (torch.rand(1, 1, 8, 8, generator=gen, dtype=torch.float64) * 0.8 + 0.1).requires_grad_(True)
    M_r = (torch.rand(1, 1, 8, 8, generator=gen, dtype=torch.float64) * 0.8 + 0.1).requires_grad_(True)
    assert torch.autograd.gradcheck(lambda a, b: diffusion_loss(q, a, b, M_GT).total, (p, M_r))


def test_huqnet_loss_gradients_match_finite_differences():
    gen = torch.Generator().manual_seed(5)
    U_GT = square(8, 2, 6)
    U_hat = (torch.rand(1, 1, 8, 8, generator=gen, dtype=torch.float64) * 0.8 + 0.1).requires_grad_(True)
    mu = torch.randn(1, 1, 8, 8, generator=gen, dtype=torch.float64).requires_grad_(True)
    sigma = (torch.rand(1, 1, 8, 8, generator=gen, dtype=torch.float64) + 0.2).requires_grad_(True)
    c = torch.randn(1, 1, 8, 8, generator=gen, dtype=torch.float64).requires_grad_(True)

    def total(u, m, s, logit):
        return huqnet_loss(u, U_GT, logit, U_GT, m, s).total

    assert torch.autograd.gradcheck(total, (U_hat, mu, sigma, c))

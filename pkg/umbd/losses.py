"""
Training objectives.

Denoiser: KL between the true and the predicted Bernoulli posterior plus a
boundary-weighted IoU and BCE on the reconstructed refined mask.
HUQNet: BCE and dice against U_GT plus the Bayesian head's reconstruction
and Gaussian prior terms.

Every composite loss returns a LossReport whose total is the unit-weighted
sum of its components (eta on the Gaussian KL).
"""

import logging
from typing import Optional

import torch
import torch.nn.functional as F

from .exceptions import ShapeMismatchError
from .models import LossReport

logger = logging.getLogger(__name__)

PROB_EPS = 1e-6
SIGMA_MIN = 1e-6
DICE_SMOOTH = 1.0
IOU_SMOOTH = 1.0
BNN_ETA = 0.1


def _same_shape(**maps: torch.Tensor) -> None:
    shapes = {name: tuple(m.shape) for name, m in maps.items()}
    if len(set(shapes.values())) > 1:
        logger.error(f"Loss inputs differ in shape: {shapes}")
        raise ShapeMismatchError(f"Loss inputs must share one shape, got {shapes}")


def weight_map(M_GT: torch.Tensor, kernel: int = 31, factor: float = 5.0) -> torch.Tensor:
    """Boundary emphasis w = 1 + factor * |meanpool_k(M_GT) - M_GT|."""
    pooled = F.avg_pool2d(M_GT, kernel_size=kernel, stride=1, padding=kernel // 2)
    return 1 + factor * (pooled - M_GT).abs()


def weighted_bce(pred: torch.Tensor, gt: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
    """Per-sample sum(w * BCE) / sum(w), averaged over the batch."""
    _same_shape(pred=pred, gt=gt, w=w)
    bce = F.binary_cross_entropy(pred.clamp(PROB_EPS, 1 - PROB_EPS), gt, reduction="none")
    per_sample = (w * bce).sum(dim=(-2, -1)) / w.sum(dim=(-2, -1))
    return per_sample.mean()


def weighted_iou(pred: torch.Tensor, gt: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
    """Soft IoU loss with per-pixel weights, smoothed by 1."""
    _same_shape(pred=pred, gt=gt, w=w)
    inter = (pred * gt * w).sum(dim=(-2, -1))
    union = ((pred + gt) * w).sum(dim=(-2, -1))
    return (1 - (inter + IOU_SMOOTH) / (union - inter + IOU_SMOOTH)).mean()


def kl_bernoulli(q_param: torch.Tensor, p_param: torch.Tensor) -> torch.Tensor:
    """Mean over pixels of KL(Bernoulli(q) || Bernoulli(p)), parameters clamped to [1e-6, 1 - 1e-6]."""
    _same_shape(q_param=q_param, p_param=p_param)
    q = q_param.clamp(PROB_EPS, 1 - PROB_EPS)
    p = p_param.clamp(PROB_EPS, 1 - PROB_EPS)
    kl = q * (torch.log(q) - torch.log(p)) + (1 - q) * (torch.log1p(-q) - torch.log1p(-p))
    return kl.mean()


def gaussian_kl(mu: torch.Tensor, sigma: torch.Tensor) -> torch.Tensor:
    """KL(N(mu, sigma) || N(0, 1)) = 0.5 * mean(sigma^2 + mu^2 - 1 - log sigma^2)."""
    var = sigma.clamp(min=SIGMA_MIN) ** 2
    return 0.5 * (var + mu ** 2 - 1 - torch.log(var)).mean()


def dice_loss(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    _same_shape(pred=pred, gt=gt)
    inter = (pred * gt).sum()
    return 1 - (2 * inter + DICE_SMOOTH) / (pred.sum() + gt.sum() + DICE_SMOOTH)


def diffusion_loss(
    q_post: torch.Tensor,
    p_post: torch.Tensor,
    M_r_hat: torch.Tensor,
    M_GT: torch.Tensor,
    w: Optional[torch.Tensor] = None,
) -> LossReport:
    """
    L_Diff = KL(q || p_theta) + wIoU(M_r_hat, M_GT) + wBCE(M_r_hat, M_GT).

    Args:
        q_post: True posterior parameter q(y_{t-1} = 1 | y_t, y0)
        p_post: Posterior parameter computed from the predicted y0
        M_r_hat: Reconstructed refined mask
        M_GT: Ground truth
        w: Pixel weights; weight_map(M_GT) when omitted
    """
    w = weight_map(M_GT) if w is None else w
    kl = kl_bernoulli(q_post, p_post)
    wiou = weighted_iou(M_r_hat, M_GT, w)
    wbce = weighted_bce(M_r_hat, M_GT, w)
    return LossReport(
        total=kl + wiou + wbce,
        components={"kl": float(kl.detach()), "wiou": float(wiou.detach()), "wbce": float(wbce.detach())},
    )


def bnn_loss(
    c_sample: torch.Tensor, M_GT: torch.Tensor, mu: torch.Tensor, sigma: torch.Tensor, eta: float = BNN_ETA
) -> torch.Tensor:
    """BCE(sigmoid(c), M_GT) + eta * KL(N(mu, sigma) || N(0, 1)) on one retained logit draw."""
    _same_shape(c_sample=c_sample, M_GT=M_GT, mu=mu, sigma=sigma)
    return F.binary_cross_entropy_with_logits(c_sample, M_GT) + eta * gaussian_kl(mu, sigma)


def huqnet_loss(
    U_hat: torch.Tensor,
    U_GT: torch.Tensor,
    c_sample: Optional[torch.Tensor] = None,
    M_GT: Optional[torch.Tensor] = None,
    mu: Optional[torch.Tensor] = None,
    sigma: Optional[torch.Tensor] = None,
    eta: float = BNN_ETA,
) -> LossReport:
    """
    L_H = BCE(U_hat, U_GT) + Dice(U_hat, U_GT) + L_BNN.

    The Bayesian terms are skipped when the network has no Bayesian head
    (c_sample is None).
    """
    _same_shape(U_hat=U_hat, U_GT=U_GT)
    bce = F.binary_cross_entropy(U_hat.clamp(PROB_EPS, 1 - PROB_EPS), U_GT)
    dice = dice_loss(U_hat, U_GT)
    total = bce + dice
    components = {"huq_bce": float(bce.detach()), "dice": float(dice.detach())}
    if c_sample is not None:
        _same_shape(c_sample=c_sample, M_GT=M_GT, mu=mu, sigma=sigma)
        recon = F.binary_cross_entropy_with_logits(c_sample, M_GT)
        prior = gaussian_kl(mu, sigma)
        total = total + recon + eta * prior
        components.update({"bnn_bce": float(recon.detach()), "bnn_kl": float(prior.detach())})
    return LossReport(total=total, components=components)

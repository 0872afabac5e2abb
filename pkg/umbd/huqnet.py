"""
Hybrid uncertainty network.

Estimates where a coarse mask is wrong from the image and the mask itself.
A shared convolutional backbone feeds two branches: a Bayesian head that
samples per-pixel logits and turns their spread into a variance map, and a
discriminative decoder whose features are suppressed where a fused
attention map (built from the coarse mask, its entropy and the variance
map) already flags uncertainty. A windowed cross-attention block merges the
three maps into the final estimate.
"""

import logging
import math
from typing import Dict, List, Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .exceptions import ShapeMismatchError
from .models import FeaturePyramid, FusionConfig, HUQNetConfig, TrainConfig, UncertaintyBundle

logger = logging.getLogger(__name__)

NORM_EPS = 1e-8


# Uncertainty primitives

def entropy_map(Mc: torch.Tensor) -> torch.Tensor:
    """Binary entropy of each pixel in bits, with 0 * log 0 = 0."""
    p = Mc.clamp(0.0, 1.0)
    q = 1 - p
    h = -(torch.special.xlogy(p, p) + torch.special.xlogy(q, q)) / math.log(2)
    return h.clamp(0.0, 1.0)


def mean_max_normalize(v: torch.Tensor) -> torch.Tensor:
    """Per-sample clamp((v - mean) / (max - mean + 1e-8), 0, 1) over the spatial dims."""
    flat = v.flatten(start_dim=-2)
    mean = flat.mean(dim=-1, keepdim=True).unsqueeze(-1)
    peak = flat.amax(dim=-1, keepdim=True).unsqueeze(-1)
    return ((v - mean) / (peak - mean + NORM_EPS)).clamp(0.0, 1.0)


def mc_variance(
    mu: torch.Tensor, sigma: torch.Tensor, K: int, generator: Optional[torch.Generator] = None
) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Draw c = mu + eps * sigma K times and return (per-pixel sample variance, first draw).

    Raises:
        ValueError: If K < 2
    """
    if K < 2:
        raise ValueError(f"Need at least 2 Monte Carlo samples, got {K}")
    eps = torch.randn((K,) + tuple(mu.shape), generator=generator, dtype=mu.dtype, device=mu.device)
    draws = mu.unsqueeze(0) + eps * sigma.unsqueeze(0)
    return draws.var(dim=0, unbiased=True), draws[0]


def residual_attention(f: torch.Tensor, M_attn: torch.Tensor) -> torch.Tensor:
    """f * (1 - M_attn), with M_attn bilinearly resized to f's grid."""
    attn = F.interpolate(M_attn, size=f.shape[-2:], mode="bilinear", align_corners=False)
    return f * (1 - attn)


def pad_to_multiple(x: torch.Tensor, multiple: int) -> Tuple[torch.Tensor, Tuple[int, int]]:
    height, width = x.shape[-2:]
    pad_h = (multiple - height % multiple) % multiple
    pad_w = (multiple - width % multiple) % multiple
    return F.pad(x, (0, pad_w, 0, pad_h)), (height, width)


def window_partition(x: torch.Tensor, window_size: int) -> torch.Tensor:
    """
    Split a BxCxHxW map into non-overlapping windows.

    Returns:
        torch.Tensor: (B * num_windows) x (window_size ** 2) x C

    Raises:
        ShapeMismatchError: If H or W is not a multiple of window_size
    """
    batch, channels, height, width = x.shape
    if height % window_size or width % window_size:
        raise ShapeMismatchError(f"Map {height}x{width} is not a multiple of the window size {window_size}")
    x = x.view(batch, channels, height // window_size, window_size, width // window_size, window_size)
    x = x.permute(0, 2, 4, 3, 5, 1)
    return x.reshape(-1, window_size * window_size, channels)


def window_merge(windows: torch.Tensor, window_size: int, batch: int, height: int, width: int) -> torch.Tensor:
    """Inverse of window_partition."""
    channels = windows.shape[-1]
    x = windows.view(batch, height // window_size, width // window_size, window_size, window_size, channels)
    x = x.permute(0, 5, 1, 3, 2, 4)
    return x.reshape(batch, channels, height, width)


# Network components

class ConvStage(nn.Module):
    """Stride-2 conv -> BN -> ReLU -> conv -> BN -> ReLU."""

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(in_channels, out_channels, 3, stride=2, padding=1, bias=False),
            nn.BatchNorm2d(out_channels),
            nn.ReLU(inplace=True),
            nn.Conv2d(out_channels, out_channels, 3, padding=1, bias=False),
            nn.BatchNorm2d(out_channels),
            nn.ReLU(inplace=True),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.body(x)


class Backbone(nn.Module):
    """4-stage encoder with outputs at strides 4, 8, 16 and 32."""

    def __init__(self, channels: Tuple[int, ...] = (32, 64, 128, 256), in_channels: int = 3):
        super().__init__()
        self.stem = ConvStage(in_channels, channels[0] // 2)
        stages = []
        prev = channels[0] // 2
        for width in channels:
            stages.append(ConvStage(prev, width))
            prev = width
        self.stages = nn.ModuleList(stages)

    def forward(self, x: torch.Tensor) -> FeaturePyramid:
        h = self.stem(x)
        levels = []
        for stage in self.stages:
            h = stage(h)
            levels.append(h)
        return FeaturePyramid(levels)


class BnnHead(nn.Module):
    """Parallel mu and sigma projections of one backbone level; sigma = softplus(.)."""

    def __init__(self, channels: int):
        super().__init__()
        self.mu = nn.Conv2d(channels, 1, 1)
        self.sigma = nn.Conv2d(channels, 1, 1)

    def forward(self, f: torch.Tensor, size: Tuple[int, int]) -> Tuple[torch.Tensor, torch.Tensor]:
        mu = F.interpolate(self.mu(f), size=size, mode="bilinear", align_corners=False)
        sigma = F.interpolate(F.softplus(self.sigma(f)), size=size, mode="bilinear", align_corners=False)
        return mu, sigma


def conv_stack(in_channels: int, out_channels: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(in_channels, out_channels, 3, padding=1),
        nn.ReLU(inplace=True),
        nn.Conv2d(out_channels, out_channels, 3, stride=2, padding=1),
        nn.ReLU(inplace=True),
    )


class ConvFusionAttention(nn.Module):
    """Attention map from [M_c, U_E, U_B] at a quarter of the input resolution."""

    def __init__(self, hidden: int = 16):
        super().__init__()
        self.body = nn.Sequential(
            conv_stack(3, hidden),
            conv_stack(hidden, hidden * 2),
            nn.Conv2d(hidden * 2, hidden * 2, 3, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(hidden * 2, 1, 1),
        )

    def forward(self, M_cat: torch.Tensor) -> torch.Tensor:
        if M_cat.shape[1] != 3:
            raise ShapeMismatchError(f"Attention input needs 3 channels, got {M_cat.shape[1]}")
        return torch.sigmoid(self.body(M_cat))


class DecoderBlock(nn.Module):
    """U_i = DAB(conv3x3([TConv(U_{i+1}), f'_i])) with DAB = Dropout -> LeakyReLU -> BatchNorm."""

    def __init__(self, deep_channels: int, skip_channels: int, dropout: float):
        super().__init__()
        self.up = nn.ConvTranspose2d(deep_channels, skip_channels, 2, stride=2)
        self.conv = nn.Conv2d(2 * skip_channels, skip_channels, 3, padding=1)
        self.dab = nn.Sequential(nn.Dropout(dropout), nn.LeakyReLU(0.1), nn.BatchNorm2d(skip_channels))

    def forward(self, deep: torch.Tensor, skip: torch.Tensor) -> torch.Tensor:
        up = self.up(deep)
        if up.shape[-2:] != skip.shape[-2:]:
            up = F.interpolate(up, size=skip.shape[-2:], mode="bilinear", align_corners=False)
        return self.dab(self.conv(torch.cat([up, skip], dim=1)))


class WindowCrossAttention(nn.Module):
    """
    Windowed multi-head cross attention from U_D (queries) to [U_E, U_B] (keys, values).

    The output projection starts at zero so the fused map initially equals U_D.
    """

    def __init__(self, config: Optional[FusionConfig] = None):
        super().__init__()
        self.config = config or FusionConfig()
        dim = self.config.embed_dim
        self.q = nn.Conv2d(1, dim, 1)
        self.k = nn.Conv2d(2, dim, 1)
        self.v = nn.Conv2d(2, dim, 1)
        self.norm = nn.RMSNorm(dim)
        self.out = nn.Conv2d(dim, 1, 1)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(
        self, U_D: torch.Tensor, U_E: torch.Tensor, U_B: torch.Tensor, return_attention: bool = False
    ):
        if not (U_D.shape == U_E.shape == U_B.shape):
            raise ShapeMismatchError(f"Uncertainty maps differ: {tuple(U_D.shape)}, {tuple(U_E.shape)}, {tuple(U_B.shape)}")
        ws = self.config.window_size
        heads = self.config.num_heads
        head_dim = self.config.head_dim

        query_map, (height, width) = pad_to_multiple(U_D, ws)
        kv_map, _ = pad_to_multiple(torch.cat([U_E, U_B], dim=1), ws)
        batch, _, padded_h, padded_w = query_map.shape

        q = window_partition(self.q(query_map), ws)
        k = window_partition(self.k(kv_map), ws)
        v = window_partition(self.v(kv_map), ws)
        n_windows, tokens, dim = q.shape

        def split_heads(t: torch.Tensor) -> torch.Tensor:
            return t.view(n_windows, tokens, heads, head_dim).transpose(1, 2)

        q, k, v = split_heads(q), split_heads(k), split_heads(v)
        weights = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(head_dim), dim=-1)
        v_hat = (weights @ v).transpose(1, 2).reshape(n_windows, tokens, dim)
        v_tilde = self.norm(v_hat) + v_hat

        merged = window_merge(v_tilde, ws, batch, padded_h, padded_w)
        fused = (self.out(merged) + query_map).clamp(0.0, 1.0)
        fused = fused[..., :height, :width]
        if return_attention:
            return fused, weights
        return fused


class HUQNet(nn.Module):
    """
    Hybrid uncertainty network h(x, M_c) -> U_hat.

    Args:
        config: Architecture and ablation switches
    """

    def __init__(self, config: Optional[HUQNetConfig] = None):
        super().__init__()
        self.config = config or HUQNetConfig()
        cfg = self.config
        channels = cfg.backbone_channels

        self.backbone = Backbone(channels)
        self.bnn = BnnHead(channels[cfg.bnn_level - 1]) if cfg.use_bnn else None
        self.attention = ConvFusionAttention()
        self.decoder = nn.ModuleList(
            [DecoderBlock(channels[i + 1], channels[i], cfg.dropout) for i in range(len(channels) - 2, -1, -1)]
        )
        self.head = nn.Conv2d(channels[0], 1, 1)
        self.fusion = WindowCrossAttention(cfg.fusion)

        logger.debug(f"HUQNet built with {sum(p.numel() for p in self.parameters()):,} parameters")

    # Branches

    def extract_backbone_features(self, x: torch.Tensor) -> FeaturePyramid:
        return self.backbone(x)

    def bnn_uncertainty(
        self, f: torch.Tensor, size: Tuple[int, int], generator: Optional[torch.Generator] = None
    ) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
        """
        Monte Carlo spread of the Bayesian head.

        Returns:
            Tuple of (U_B, retained logit draw, mu, sigma), each Bx1xHxW
        """
        mu, sigma = self.bnn(f, size)
        variance, draw = mc_variance(mu, sigma, self.config.mc_samples, generator)
        return mean_max_normalize(variance), draw, mu, sigma

    def decode_uncertainty(self, levels: List[torch.Tensor], size: Tuple[int, int]) -> torch.Tensor:
        h = levels[-1]
        for block, skip in zip(self.decoder, reversed(levels[:-1])):
            h = block(h, skip)
        logits = F.interpolate(self.head(h), size=size, mode="bilinear", align_corners=False)
        return torch.sigmoid(logits)

    # Full pass

    def estimate_uncertainty(
        self, x: torch.Tensor, Mc: torch.Tensor, generator: Optional[torch.Generator] = None
    ) -> UncertaintyBundle:
        """
        Run every branch and fuse them.

        Args:
            x: Images, Bx3xHxW
            Mc: Coarse masks, Bx1xHxW
            generator: Seeds the Monte Carlo draws of the Bayesian head

        Returns:
            UncertaintyBundle with U_E, U_B, U_D and the fused U_hat

        Raises:
            ShapeMismatchError: If the mask and the image sizes differ
        """
        batch, _, height, width = x.shape
        if Mc.shape != (batch, 1, height, width):
            logger.error(f"Coarse mask shape {tuple(Mc.shape)} does not match image {tuple(x.shape)}")
            raise ShapeMismatchError(f"Coarse mask must be {(batch, 1, height, width)}, got {tuple(Mc.shape)}")
        cfg = self.config
        size = (height, width)
        features = self.extract_backbone_features(x)

        u_entropy = entropy_map(Mc)
        zeros = torch.zeros_like(Mc)
        mu = sigma = c_logit = None
        if self.bnn is not None:
            u_bnn, c_logit, mu, sigma = self.bnn_uncertainty(features[cfg.bnn_level - 1], size, generator)
        else:
            u_bnn = zeros
        u_bnn_down = u_bnn if cfg.use_bnn_map else zeros
        u_entropy_down = u_entropy if cfg.use_entropy else zeros

        levels = features.levels
        if cfg.use_ram:
            M_attn = self.attention(torch.cat([Mc, u_entropy_down, u_bnn_down], dim=1))
            levels = [residual_attention(f, M_attn) for f in levels]
        u_disc = self.decode_uncertainty(levels, size)

        if cfg.use_cross_attention:
            u_hat = self.fusion(u_disc, u_entropy_down, u_bnn_down)
        else:
            u_hat = u_disc
        return UncertaintyBundle(u_entropy=u_entropy, u_bnn=u_bnn, u_disc=u_disc, u_hat=u_hat,
                                 mu=mu, sigma=sigma, c_logit=c_logit)

    def forward(self, x: torch.Tensor, Mc: torch.Tensor, generator: Optional[torch.Generator] = None) -> UncertaintyBundle:
        return self.estimate_uncertainty(x, Mc, generator)

    def parameter_groups(self, train: TrainConfig) -> List[Dict]:
        """AdamW groups: backbone, Bayesian head and everything else at their own rates."""
        backbone = list(self.backbone.parameters())
        bnn = list(self.bnn.parameters()) if self.bnn is not None else []
        taken = {id(p) for p in backbone + bnn}
        rest = [p for p in self.parameters() if id(p) not in taken]
        groups = [
            {"params": backbone, "lr": train.lr_backbone, "name": "backbone"},
            {"params": rest, "lr": train.lr_huqnet, "name": "huqnet"},
        ]
        if bnn:
            groups.insert(1, {"params": bnn, "lr": train.lr_bnn, "name": "bnn"})
        return groups

"""
Conditional noise-prediction network.

A small U-Net that reads the image, the (masked) coarse mask and the noisy
latent, is conditioned on the diffusion step through a sinusoidal embedding,
and fuses the frozen prior segmenter's feature pyramid into its encoder
features before decoding. The output is the predicted Bernoulli noise in
[0, 1].
"""

import logging
import math
from typing import Optional, Union

import torch
import torch.nn as nn
import torch.nn.functional as F

from .exceptions import ScheduleRangeError, ShapeMismatchError
from .models import ConditioningChannel, DenoiserConfig, FeaturePyramid

logger = logging.getLogger(__name__)


def group_count(channels: int, preferred: int = 8) -> int:
    """
    Largest group count up to `preferred` that divides `channels` and leaves
    at least two channels per group.

    A 1x1 feature map with one channel per group has a single value to
    normalise, which GroupNorm rejects in training and zeroes otherwise.
    """
    for groups in range(min(preferred, channels // 2), 0, -1):
        if channels % groups == 0:
            return groups
    return 1


def sinusoidal_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Standard sinusoidal step embedding, one row per batch element."""
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64, device=t.device) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class TimeEmbedding(nn.Module):
    """Sinusoidal embedding followed by a 2-layer MLP."""

    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim
        self.mlp = nn.Sequential(nn.Linear(dim, dim * 2), nn.SiLU(), nn.Linear(dim * 2, dim))

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        emb = sinusoidal_embedding(t, self.dim).to(self.mlp[0].weight.dtype)
        return self.mlp(emb)


class TimeBias(nn.Module):
    """Time-conditioned bias modulation: x + Linear(SiLU(temb)) per channel."""

    def __init__(self, channels: int, temb_dim: int):
        super().__init__()
        self.proj = nn.Linear(temb_dim, channels)

    def forward(self, x: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        return x + self.proj(F.silu(temb))[:, :, None, None]


class ResBlock(nn.Module):
    """
    Time-conditioned residual block.

    conv3x3 -> GroupNorm -> scale (1 + gamma) and shift beta -> GroupNorm -> SiLU
    -> conv3x3, plus a skip that is the identity when the channel count is kept
    and a 1x1 projection otherwise. gamma and beta are the two halves of a
    2C' vector produced by Linear(SiLU(temb)).
    """

    def __init__(self, in_channels: int, out_channels: int, temb_dim: int):
        super().__init__()
        self.out_channels = out_channels
        self.conv_in = nn.Conv2d(in_channels, out_channels, 3, padding=1)
        self.norm_in = nn.GroupNorm(group_count(out_channels), out_channels)
        self.time_affine = nn.Linear(temb_dim, 2 * out_channels)
        self.norm_out = nn.GroupNorm(group_count(out_channels), out_channels)
        self.conv_out = nn.Conv2d(out_channels, out_channels, 3, padding=1)
        if in_channels == out_channels:
            self.skip = nn.Identity()
        else:
            self.skip = nn.Conv2d(in_channels, out_channels, 1)

    def time_parameters(self, temb: torch.Tensor):
        """Split the 2C' time projection into (gamma, beta)."""
        gamma, beta = self.time_affine(F.silu(temb)).chunk(2, dim=1)
        return gamma, beta

    def forward(self, x: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        gamma, beta = self.time_parameters(temb)
        h = self.norm_in(self.conv_in(x))
        h = h * (1 + gamma[:, :, None, None]) + beta[:, :, None, None]
        h = self.conv_out(F.silu(self.norm_out(h)))
        return h + self.skip(x)

    def zero_init_output(self) -> None:
        nn.init.zeros_(self.conv_out.weight)
        nn.init.zeros_(self.conv_out.bias)


class FeatureAdapter(nn.Module):
    """
    Fuses one level of prior features into the denoiser features.

    cat = [F_g, RB(F_f, t)]; out = T3(PReLU(T2(conv3x3(T1(cat)) + cat))), then a
    1x1 projection back to the denoiser width of the level.
    """

    def __init__(self, denoiser_channels: int, prior_channels: int, adapted_channels: int, temb_dim: int):
        super().__init__()
        fused = denoiser_channels + adapted_channels
        self.resblock = ResBlock(prior_channels, adapted_channels, temb_dim)
        self.bias_in = TimeBias(fused, temb_dim)
        self.conv = nn.Conv2d(fused, fused, 3, padding=1)
        self.bias_mid = TimeBias(fused, temb_dim)
        self.act = nn.PReLU(fused)
        self.bias_out = TimeBias(fused, temb_dim)
        self.proj = nn.Conv2d(fused, denoiser_channels, 1)

    def forward(self, f_g: torch.Tensor, f_f: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        if f_g.shape[-2:] != f_f.shape[-2:]:
            raise ShapeMismatchError(f"Level sizes differ: denoiser {tuple(f_g.shape[-2:])}, prior {tuple(f_f.shape[-2:])}")
        cat = torch.cat([f_g, self.resblock(f_f, temb)], dim=1)
        h = self.conv(self.bias_in(cat, temb)) + cat
        h = self.bias_out(self.act(self.bias_mid(h, temb)), temb)
        return self.proj(h)


class Denoiser(nn.Module):
    """
    Noise predictor g(x, cond, y_t, t, prior) -> eps_hat in [0, 1].

    Args:
        config: Architecture settings
        T_train: Largest valid diffusion step
    """

    def __init__(self, config: Optional[DenoiserConfig] = None, T_train: int = 1000):
        super().__init__()
        self.config = config or DenoiserConfig()
        self.T_train = T_train
        cfg = self.config
        base = cfg.base_channels
        temb_dim = cfg.time_embedding_dim
        widths = cfg.level_channels

        self.time_embedding = TimeEmbedding(temb_dim)
        self.stem = nn.Conv2d(cfg.image_channels + 2, base, 3, padding=1)
        self.stem_block = ResBlock(base, base, temb_dim)
        self.down_half = nn.Conv2d(base, base, 3, stride=2, padding=1)
        self.half_block = ResBlock(base, base, temb_dim)

        self.downs = nn.ModuleList()
        self.encoder = nn.ModuleList()
        self.adapters = nn.ModuleList()
        prev = base
        for width, prior_width in zip(widths, cfg.prior_channels):
            self.downs.append(nn.Conv2d(prev, prev, 3, stride=2, padding=1))
            self.encoder.append(ResBlock(prev, width, temb_dim))
            self.adapters.append(FeatureAdapter(width, prior_width, cfg.adapted_channels, temb_dim))
            prev = width

        self.decoder = nn.ModuleList()
        for i in range(len(widths) - 2, -1, -1):
            self.decoder.append(ResBlock(widths[i + 1] + widths[i], widths[i], temb_dim))
        self.decode_half = ResBlock(widths[0] + base, base, temb_dim)
        self.decode_full = ResBlock(base + base, base, temb_dim)
        self.head = nn.Sequential(nn.GroupNorm(group_count(base), base), nn.SiLU(), nn.Conv2d(base, 1, 3, padding=1))

        logger.debug(f"Denoiser built with {self.parameter_count():,} parameters")

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def _step_tensor(self, t: Union[int, torch.Tensor], batch: int, device) -> torch.Tensor:
        t = torch.as_tensor(t, device=device).long()
        if t.dim() == 0:
            t = t.expand(batch)
        if t.shape != (batch,):
            raise ShapeMismatchError(f"Expected one step per batch element, got shape {tuple(t.shape)}")
        if int(t.min()) < 1 or int(t.max()) > self.T_train:
            logger.error(f"Denoiser step outside [1, {self.T_train}]: {t.tolist()}")
            raise ScheduleRangeError(f"Step must lie in [1, {self.T_train}]")
        return t

    def forward(
        self,
        x: torch.Tensor,
        cond: torch.Tensor,
        y_t: torch.Tensor,
        t: Union[int, torch.Tensor],
        prior: FeaturePyramid,
    ) -> torch.Tensor:
        """
        Predict the Bernoulli noise.

        Args:
            x: Images, Bx3xHxW
            cond: Conditioning mask (U * M_c or M_c), Bx1xHxW
            y_t: Noisy latent, Bx1xHxW
            t: Diffusion step, an int or one per batch element
            prior: Frozen prior features at strides 4, 8, 16, 32

        Returns:
            torch.Tensor: eps_hat, Bx1xHxW in [0, 1]

        Raises:
            ShapeMismatchError: If the inputs or prior levels do not align
            ScheduleRangeError: If t is outside 1..T_train
        """
        batch, _, height, width = x.shape
        for name, m in (("cond", cond), ("y_t", y_t)):
            if m.shape != (batch, 1, height, width):
                logger.error(f"Denoiser input {name} has shape {tuple(m.shape)}, image {tuple(x.shape)}")
                raise ShapeMismatchError(f"{name} must be {(batch, 1, height, width)}, got {tuple(m.shape)}")
        prior.validate(height, width)
        temb = self.time_embedding(self._step_tensor(t, batch, x.device))

        h_full = self.stem_block(self.stem(torch.cat([x, cond, y_t], dim=1)), temb)
        h_half = self.half_block(self.down_half(h_full), temb)

        skips = []
        h = h_half
        for down, block, adapter, f_f in zip(self.downs, self.encoder, self.adapters, prior.levels):
            h = block(down(h), temb)
            h = adapter(h, f_f, temb)
            skips.append(h)

        h = skips[-1]
        for block, skip in zip(self.decoder, reversed(skips[:-1])):
            h = F.interpolate(h, size=skip.shape[-2:], mode="nearest")
            h = block(torch.cat([h, skip], dim=1), temb)
        h = F.interpolate(h, size=h_half.shape[-2:], mode="nearest")
        h = self.decode_half(torch.cat([h, h_half], dim=1), temb)
        h = F.interpolate(h, size=h_full.shape[-2:], mode="nearest")
        h = self.decode_full(torch.cat([h, h_full], dim=1), temb)
        return torch.sigmoid(self.head(h))

    def predict_noise(self, x, cond, y_t, t, prior: FeaturePyramid) -> torch.Tensor:
        return self(x, cond, y_t, t, prior)


def conditioning_map(config: DenoiserConfig, Mc: torch.Tensor, U: torch.Tensor) -> torch.Tensor:
    """The mask fed as the fourth input channel: U * M_c by default, M_c when configured."""
    if ConditioningChannel(config.conditioning) is ConditioningChannel.COARSE:
        return Mc
    return (U * Mc).clamp(0.0, 1.0)

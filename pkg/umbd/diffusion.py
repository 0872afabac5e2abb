"""
Uncertainty-masked Bernoulli diffusion kernels.

Stateless functions for the cosine noise schedule, the masked forward
process, the exact Bernoulli posterior, the DDPM and DDIM reverse steps and
the composition of the refined mask. Every map is a torch tensor with values
in [0, 1]; maps passed to the same call must have identical shapes. Step
indices follow the convention alpha_bar_0 = 1, so valid forward steps are
1..T_train and the reverse chain ends at 0.
"""

import logging
import math
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch

from .exceptions import ScheduleRangeError, ShapeMismatchError
from .models import SamplerType, SigmaRule

logger = logging.getLogger(__name__)

Step = Union[int, torch.Tensor]

COSINE_OFFSET = 0.008
MAX_BETA = 0.999
POSTERIOR_EPS = 1e-12


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step noise rates. Index t - 1 of each tensor holds the value for step t."""
    T_train: int
    beta: torch.Tensor
    alpha: torch.Tensor
    alpha_bar: torch.Tensor
    kind: str = "cosine"
    offset: float = COSINE_OFFSET

    def metadata(self) -> Dict[str, object]:
        """Enough information to rebuild the schedule, stored in checkpoints."""
        return {"T_train": self.T_train, "kind": self.kind, "s": self.offset}


def make_cosine_schedule(T_train: int, offset: float = COSINE_OFFSET) -> NoiseSchedule:
    """
    Build the cosine schedule used for training and sampling.

    alpha_bar(t) = f(t) / f(0) with f(t) = cos^2(((t / T + s) / (1 + s)) * pi / 2);
    beta_t = 1 - alpha_bar_t / alpha_bar_{t-1}, clipped to at most 0.999, and
    alpha_bar is recomputed as the cumulative product of 1 - beta so the two
    arrays agree exactly.

    Args:
        T_train: Number of diffusion steps
        offset: The small offset s that keeps beta_1 away from zero

    Returns:
        NoiseSchedule: float64 schedule tensors of length T_train

    Raises:
        ScheduleRangeError: If T_train < 1
    """
    if isinstance(T_train, bool) or not isinstance(T_train, int) or T_train < 1:
        logger.error(f"Invalid number of diffusion steps: {T_train}")
        raise ScheduleRangeError(f"T_train must be a positive integer, got {T_train}")

    steps = torch.arange(T_train + 1, dtype=torch.float64)
    f = torch.cos(((steps / T_train + offset) / (1 + offset)) * math.pi / 2) ** 2
    alpha_bar_raw = f / f[0]
    beta = (1 - alpha_bar_raw[1:] / alpha_bar_raw[:-1]).clamp(min=0.0, max=MAX_BETA)
    alpha = 1 - beta
    alpha_bar = torch.cumprod(alpha, dim=0)

    logger.debug(f"Cosine schedule: T={T_train}, beta_1={beta[0].item():.3e}, alpha_bar_T={alpha_bar[-1].item():.3e}")
    return NoiseSchedule(T_train=T_train, beta=beta, alpha=alpha, alpha_bar=alpha_bar, offset=offset)


def schedule_from_metadata(meta: Dict[str, object]) -> NoiseSchedule:
    """Rebuild a schedule from NoiseSchedule.metadata()."""
    if meta.get("kind", "cosine") != "cosine":
        raise ScheduleRangeError(f"Unsupported schedule kind: {meta.get('kind')}")
    return make_cosine_schedule(int(meta["T_train"]), float(meta.get("s", COSINE_OFFSET)))


# Schedule lookups

def _check_step(s: NoiseSchedule, t: Step, low: int) -> torch.Tensor:
    if isinstance(t, torch.Tensor):
        if t.numel() == 0:
            raise ScheduleRangeError("Empty step tensor")
        t_min, t_max = int(t.min()), int(t.max())
        index = t.long()
    else:
        t_min = t_max = int(t)
        index = torch.tensor(int(t))
    if t_min < low or t_max > s.T_train:
        logger.error(f"Step {t_min}..{t_max} outside [{low}, {s.T_train}]")
        raise ScheduleRangeError(f"Step index must lie in [{low}, {s.T_train}], got {t_min}..{t_max}")
    return index


def alpha_bar_at(s: NoiseSchedule, t: Step) -> torch.Tensor:
    """alpha_bar_t for t in 0..T_train (alpha_bar_0 = 1); batched if t is a tensor."""
    index = _check_step(s, t, low=0)
    table = torch.cat([torch.ones(1, dtype=s.alpha_bar.dtype), s.alpha_bar])
    return table[index.cpu()]


def alpha_at(s: NoiseSchedule, t: Step) -> torch.Tensor:
    """alpha_t for t in 1..T_train."""
    index = _check_step(s, t, low=1)
    return s.alpha[index.cpu() - 1]


def _as_coefficient(value: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    value = value.to(device=like.device, dtype=like.dtype)
    if value.dim() == 0:
        return value
    return value.view(-1, *([1] * (like.dim() - 1)))


def _check_shapes(**maps: torch.Tensor) -> None:
    shapes = {name: tuple(m.shape) for name, m in maps.items()}
    if len(set(shapes.values())) > 1:
        logger.error(f"Map shapes differ: {shapes}")
        raise ShapeMismatchError(f"Maps must share one shape, got {shapes}")


# Forward process

def mask_residual(U: torch.Tensor, M: torch.Tensor) -> torch.Tensor:
    """Restrict a mask to the uncertain region: U * M, clamped to [0, 1]."""
    _check_shapes(U=U, M=M)
    return (U * M).clamp(0.0, 1.0)


def forward_marginal_param(s: NoiseSchedule, t: Step, y0: torch.Tensor, Mc_tilde: torch.Tensor) -> torch.Tensor:
    """
    Bernoulli parameter of q(y_t | y_0): alpha_bar_t * y0 + (1 - alpha_bar_t) * Mc_tilde.

    Raises:
        ScheduleRangeError: If t is outside 1..T_train
        ShapeMismatchError: If y0 and Mc_tilde differ in shape
    """
    _check_shapes(y0=y0, Mc_tilde=Mc_tilde)
    ab = _as_coefficient(alpha_bar_at(s, _require_positive(s, t)), y0)
    return (ab * y0 + (1 - ab) * Mc_tilde).clamp(0.0, 1.0)


def forward_noise_prob(s: NoiseSchedule, t: Step, y0: torch.Tensor, Mc_tilde: torch.Tensor) -> torch.Tensor:
    """Bernoulli parameter of the customized noise: (1 - alpha_bar_t) * |Mc_tilde - y0|."""
    _check_shapes(y0=y0, Mc_tilde=Mc_tilde)
    ab = _as_coefficient(alpha_bar_at(s, _require_positive(s, t)), y0)
    return ((1 - ab) * (Mc_tilde - y0).abs()).clamp(0.0, 1.0)


def _require_positive(s: NoiseSchedule, t: Step) -> Step:
    _check_step(s, t, low=1)
    return t


def sample_forward(
    s: NoiseSchedule,
    t: Step,
    y0: torch.Tensor,
    Mc_tilde: torch.Tensor,
    generator: Optional[torch.Generator] = None,
) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Draw the noise and the noisy latent at step t.

    Args:
        s: Noise schedule
        t: Step index (int or one step per batch element)
        y0: Masked target U * M_GT
        Mc_tilde: Masked coarse mask U * M_c
        generator: Seeded torch generator

    Returns:
        Tuple of (epsilon, y_t) with epsilon in {0, 1} and y_t = |y0 - epsilon|
    """
    prob = forward_noise_prob(s, t, y0, Mc_tilde)
    epsilon = torch.bernoulli(prob, generator=generator)
    y_t = (y0 - epsilon).abs()
    return epsilon, y_t


def sample_initial_latent(Mc_tilde: torch.Tensor, generator: Optional[torch.Generator] = None) -> torch.Tensor:
    """y_T ~ Bernoulli(Mc_tilde), the start of the reverse chain."""
    return torch.bernoulli(Mc_tilde.clamp(0.0, 1.0), generator=generator)


# Posterior

def posterior_from_coefficients(
    alpha_step: torch.Tensor,
    alpha_bar_prev: torch.Tensor,
    y_t: torch.Tensor,
    y0: torch.Tensor,
    Mc_tilde: torch.Tensor,
) -> torch.Tensor:
    """
    Bayes posterior P(y_prev = 1 | y_t, y0) for one jump of the masked kernel.

    The likelihood of y_t given y_prev = k is Bernoulli(alpha_step * k +
    (1 - alpha_step) * Mc_tilde); the prior on y_prev is Bernoulli(alpha_bar_prev
    * y0 + (1 - alpha_bar_prev) * Mc_tilde). Where the unnormalized mass is at
    most 1e-12 the result falls back to y_t.
    """
    _check_shapes(y_t=y_t, y0=y0, Mc_tilde=Mc_tilde)
    a = _as_coefficient(torch.as_tensor(alpha_step, dtype=torch.float64), y_t)
    ab = _as_coefficient(torch.as_tensor(alpha_bar_prev, dtype=torch.float64), y_t)

    flip = (1 - a) * (1 - y_t - Mc_tilde).abs()
    like_0 = a * (1 - y_t) + flip
    like_1 = a * y_t + flip
    prior_0 = ab * (1 - y0) + (1 - ab) * (1 - Mc_tilde)
    prior_1 = ab * y0 + (1 - ab) * Mc_tilde

    numerator = like_1 * prior_1
    denominator = like_0 * prior_0 + numerator
    degenerate = denominator <= POSTERIOR_EPS
    theta = numerator / denominator.clamp(min=POSTERIOR_EPS)
    theta = torch.where(degenerate, y_t, theta)
    return theta.clamp(0.0, 1.0)


def bernoulli_posterior(
    s: NoiseSchedule, t: Step, y_t: torch.Tensor, y0: torch.Tensor, Mc_tilde: torch.Tensor
) -> torch.Tensor:
    """Single-step posterior q(y_{t-1} = 1 | y_t, y0) with alpha_bar_0 = 1."""
    alpha_step = alpha_at(s, t)
    alpha_bar_prev = alpha_bar_at(s, t - 1)
    return posterior_from_coefficients(alpha_step, alpha_bar_prev, y_t, y0, Mc_tilde)


# Reverse process

def predict_start_from_noise(
    y_t: torch.Tensor, eps_hat: torch.Tensor, support: Optional[torch.Tensor] = None
) -> torch.Tensor:
    """y0_hat = clamp(|y_t - eps_hat|, 0, 1), optionally capped by the uncertainty support."""
    _check_shapes(y_t=y_t, eps_hat=eps_hat)
    y0_hat = (y_t - eps_hat).abs().clamp(0.0, 1.0)
    if support is not None:
        _check_shapes(y_t=y_t, support=support)
        y0_hat = torch.minimum(y0_hat, support.clamp(0.0, 1.0))
    return y0_hat


def threshold_map(prob: torch.Tensor, threshold: float = 0.5) -> torch.Tensor:
    return (prob >= threshold).to(prob.dtype)


def _check_pair(s: NoiseSchedule, t_hi: int, t_lo: int) -> None:
    if not (0 <= t_lo < t_hi <= s.T_train):
        logger.error(f"Invalid reverse step pair ({t_hi}, {t_lo}) for T={s.T_train}")
        raise ScheduleRangeError(f"Reverse steps need T_train >= t_hi > t_lo >= 0, got ({t_hi}, {t_lo})")


def ddpm_reverse_step(
    s: NoiseSchedule,
    t: int,
    y_t: torch.Tensor,
    eps_hat: torch.Tensor,
    Mc_tilde: torch.Tensor,
    generator: Optional[torch.Generator] = None,
    t_lo: Optional[int] = None,
    support: Optional[torch.Tensor] = None,
    threshold: float = 0.5,
) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    One ancestral step from t to t_lo (default t - 1).

    The posterior is evaluated with y0 replaced by the prediction y0_hat; a jump
    over several steps uses alpha = alpha_bar_t / alpha_bar_{t_lo}. When t_lo is
    0 the latent is the thresholded prediction instead of a sample.

    Returns:
        Tuple of (y_prev, y0_hat)
    """
    t_lo = t - 1 if t_lo is None else t_lo
    _check_pair(s, t, t_lo)
    y0_hat = predict_start_from_noise(y_t, eps_hat, support)
    if t_lo == 0:
        return threshold_map(y0_hat, threshold), y0_hat

    alpha_bar_hi = alpha_bar_at(s, t)
    alpha_bar_lo = alpha_bar_at(s, t_lo)
    mu_hat = posterior_from_coefficients(alpha_bar_hi / alpha_bar_lo, alpha_bar_lo, y_t, y0_hat, Mc_tilde)
    y_prev = torch.bernoulli(mu_hat, generator=generator)
    return y_prev, y0_hat


def ddim_sigma(alpha_bar_hi: torch.Tensor, alpha_bar_lo: torch.Tensor, rule: SigmaRule = SigmaRule.RATIO) -> torch.Tensor:
    """Interpolation weight on y_t for a DDIM jump, clamped to [0, 1]."""
    if SigmaRule(rule) is SigmaRule.RATIO:
        sigma = (1 - alpha_bar_lo) / (1 - alpha_bar_hi)
    else:
        sigma = (1 - alpha_bar_hi) / (1 - alpha_bar_lo)
    return sigma.clamp(0.0, 1.0)


def ddim_reverse_step(
    s: NoiseSchedule,
    t_hi: int,
    t_lo: int,
    y_t: torch.Tensor,
    eps_hat: torch.Tensor,
    Mc_tilde: torch.Tensor,
    generator: Optional[torch.Generator] = None,
    sigma_rule: SigmaRule = SigmaRule.RATIO,
    support: Optional[torch.Tensor] = None,
    threshold: float = 0.5,
) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    One DDIM jump from t_hi to t_lo.

    theta = c1 * y_t + c2 * y0_hat + c3 * Mc_tilde with c1 = sigma,
    c2 = alpha_bar_lo - sigma * alpha_bar_hi and
    c3 = (1 - alpha_bar_lo) - (1 - alpha_bar_hi) * sigma. Every coefficient and
    theta are clamped to [0, 1].

    Returns:
        Tuple of (y_prev, y0_hat)
    """
    _check_pair(s, t_hi, t_lo)
    _check_shapes(y_t=y_t, Mc_tilde=Mc_tilde)
    y0_hat = predict_start_from_noise(y_t, eps_hat, support)
    if t_lo == 0:
        return threshold_map(y0_hat, threshold), y0_hat

    alpha_bar_hi = alpha_bar_at(s, t_hi)
    alpha_bar_lo = alpha_bar_at(s, t_lo)
    sigma = ddim_sigma(alpha_bar_hi, alpha_bar_lo, sigma_rule)
    c1 = _as_coefficient(sigma, y_t)
    c2 = _as_coefficient((alpha_bar_lo - sigma * alpha_bar_hi).clamp(0.0, 1.0), y_t)
    c3 = _as_coefficient(((1 - alpha_bar_lo) - (1 - alpha_bar_hi) * sigma).clamp(0.0, 1.0), y_t)

    theta = (c1 * y_t + c2 * y0_hat + c3 * Mc_tilde).clamp(0.0, 1.0)
    y_prev = torch.bernoulli(theta, generator=generator)
    return y_prev, y0_hat


def compose_refined_mask(y0_hat: torch.Tensor, U: torch.Tensor, Mc: torch.Tensor) -> torch.Tensor:
    """M_r = clamp(y0_hat + (1 - U) * M_c, 0, 1)."""
    _check_shapes(y0_hat=y0_hat, U=U, Mc=Mc)
    return (y0_hat + (1 - U) * Mc).clamp(0.0, 1.0)


# Sub-sequences

def select_ddim_subsequence(T_train: int, T_infer: int) -> List[int]:
    """
    Evenly spaced network-evaluation steps from T_train down to 1.

    The list holds T_infer strictly decreasing indices with both endpoints
    included; the chain built by step_pairs then terminates at 0. For example
    (1000, 3) gives [1000, 500, 1] and (1000, 1000) gives 1000, 999, ..., 1.

    Raises:
        ScheduleRangeError: If T_infer is outside 1..T_train
    """
    if T_train < 1 or not 1 <= T_infer <= T_train:
        logger.error(f"Invalid sub-sequence request: T_train={T_train}, T_infer={T_infer}")
        raise ScheduleRangeError(f"T_infer must lie in [1, {T_train}], got {T_infer}")
    if T_infer == 1:
        return [T_train]
    steps = np.rint(np.linspace(T_train, 1, T_infer)).astype(np.int64)
    return [int(v) for v in steps]


def step_pairs(subsequence: Sequence[int]) -> List[Tuple[int, int]]:
    """Consecutive (t_hi, t_lo) pairs of a sub-sequence, ending with (t_last, 0)."""
    steps = list(subsequence)
    if not steps or any(b >= a for a, b in zip(steps, steps[1:])) or steps[-1] < 1:
        raise ScheduleRangeError(f"Sub-sequence must be strictly decreasing and positive, got {steps}")
    return list(zip(steps, steps[1:] + [0]))


NoisePredictor = Callable[[torch.Tensor, int], torch.Tensor]


def run_reverse_chain(
    s: NoiseSchedule,
    subsequence: Sequence[int],
    Mc_tilde: torch.Tensor,
    predict_noise: NoisePredictor,
    generator: Optional[torch.Generator] = None,
    sampler: SamplerType = SamplerType.DDIM,
    sigma_rule: SigmaRule = SigmaRule.RATIO,
    support: Optional[torch.Tensor] = None,
    threshold: float = 0.5,
    y_start: Optional[torch.Tensor] = None,
) -> Tuple[torch.Tensor, List[torch.Tensor]]:
    """
    Run the reverse process over a sub-sequence.

    Args:
        s: Noise schedule
        subsequence: Network-evaluation steps, e.g. from select_ddim_subsequence
        Mc_tilde: Masked coarse mask
        predict_noise: Callable (y_t, t) -> eps_hat
        generator: Seeded torch generator
        sampler: DDPM (posterior sampling per jump) or DDIM
        sigma_rule: DDIM sigma orientation
        support: Optional cap for y0_hat, normally the uncertainty map
        threshold: Final-step binarization threshold
        y_start: Initial latent; drawn from Bernoulli(Mc_tilde) when omitted

    Returns:
        Tuple of (final soft y0_hat, trace of latents starting with y_T and
        ending with the thresholded output)
    """
    y_t = sample_initial_latent(Mc_tilde, generator) if y_start is None else y_start
    trace = [y_t]
    y0_hat = y_t
    for t_hi, t_lo in step_pairs(subsequence):
        eps_hat = predict_noise(y_t, t_hi)
        if SamplerType(sampler) is SamplerType.DDPM:
            y_t, y0_hat = ddpm_reverse_step(s, t_hi, y_t, eps_hat, Mc_tilde, generator,
                                            t_lo=t_lo, support=support, threshold=threshold)
        else:
            y_t, y0_hat = ddim_reverse_step(s, t_hi, t_lo, y_t, eps_hat, Mc_tilde, generator,
                                            sigma_rule=sigma_rule, support=support, threshold=threshold)
        trace.append(y_t)
        logger.debug(f"Reverse step {t_hi}->{t_lo}: mean latent {y_t.mean().item():.4f}")
    return y0_hat, trace

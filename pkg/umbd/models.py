"""
Data models for the UMBD refiner.

This module contains the enums, configuration dataclasses and record types
shared by the diffusion kernels, the networks, the training pipeline and the
command-line interface.
"""

import dataclasses
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, List, Optional, Tuple, Union, get_args, get_origin, get_type_hints

import numpy as np
import torch

from .exceptions import ConfigurationError, ShapeMismatchError


class SamplerType(str, Enum):
    """Reverse-process samplers."""
    DDPM = "ddpm"
    DDIM = "ddim"


class SigmaRule(str, Enum):
    """How the DDIM interpolation weight sigma is computed between two steps."""
    RATIO = "ratio"        # (1 - abar_lo) / (1 - abar_hi), always in [0, 1]
    LITERAL = "literal"    # (1 - abar_hi) / (1 - abar_lo), >= 1 and clamped


class UncertaintySource(str, Enum):
    """Where the uncertainty map used for masking comes from at inference."""
    HUQNET = "huqnet"
    ENTROPY = "entropy"
    ZEROS = "zeros"
    ONES = "ones"


class PriorKind(str, Enum):
    """Available frozen prior segmenters."""
    ORACLE = "oracle"
    TOY_CNN = "toy_cnn"


class ConditioningChannel(str, Enum):
    """Which coarse mask is fed to the denoiser as its fourth input channel."""
    MASKED = "masked"      # U * M_c
    COARSE = "coarse"      # M_c


FEATURE_STRIDES: Tuple[int, ...] = (4, 8, 16, 32)


class ConfigMixin:
    """Dictionary conversion shared by every configuration dataclass."""

    def to_dict(self) -> Dict[str, Any]:
        """Convert the configuration to a JSON-compatible dictionary."""
        result = {}
        for f in dataclasses.fields(self):
            result[f.name] = _to_plain(getattr(self, f.name))
        return result

    @classmethod
    def from_dict(cls, data: Optional[Dict[str, Any]]):
        """
        Create a configuration from a dictionary, validating keys.

        Raises:
            ConfigurationError: If the dictionary has unknown keys or bad values
        """
        data = data or {}
        hints = get_type_hints(cls)
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ConfigurationError(f"Unknown {cls.__name__} keys: {sorted(unknown)}")

        kwargs = {}
        for name, value in data.items():
            try:
                kwargs[name] = _from_plain(hints[name], value)
            except (TypeError, ValueError) as e:
                raise ConfigurationError(f"Invalid value for {cls.__name__}.{name}: {value!r}") from e
        return cls(**kwargs)

    def replace(self, **changes):
        """Return a copy with some fields replaced."""
        return dataclasses.replace(self, **changes)


def _to_plain(value: Any) -> Any:
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, ConfigMixin):
        return value.to_dict()
    if isinstance(value, (tuple, list)):
        return [_to_plain(v) for v in value]
    return value


def _from_plain(hint: Any, value: Any) -> Any:
    origin = get_origin(hint)
    if origin is Union:
        if value is None:
            return None
        inner = [a for a in get_args(hint) if a is not type(None)]
        return _from_plain(inner[0], value)
    if origin in (tuple, Tuple):
        args = get_args(hint)
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_from_plain(args[0], v) for v in value)
        return tuple(_from_plain(a, v) for a, v in zip(args, value))
    if isinstance(hint, type) and issubclass(hint, Enum):
        return hint(value)
    if isinstance(hint, type) and issubclass(hint, ConfigMixin):
        return hint.from_dict(value)
    if hint is float:
        return float(value)
    if hint is int:
        if isinstance(value, float) and not value.is_integer():
            raise ValueError(f"expected an integer, got {value}")
        return int(value)
    return value


@dataclass
class DenoiserConfig(ConfigMixin):
    """Architecture of the conditional noise-prediction network."""
    base_channels: int = 32
    channel_multipliers: Tuple[int, ...] = (1, 2, 4, 4)
    time_embedding_dim: int = 128
    adapted_channels: int = 64
    prior_channels: Tuple[int, ...] = (32, 64, 128, 256)
    image_channels: int = 3
    conditioning: ConditioningChannel = ConditioningChannel.MASKED

    def __post_init__(self):
        if len(self.channel_multipliers) != 4 or len(self.prior_channels) != 4:
            raise ConfigurationError("Denoiser needs exactly 4 levels to pair with the prior features")
        if self.adapted_channels <= 0 or self.base_channels <= 0:
            raise ConfigurationError("Channel counts must be positive")

    @classmethod
    def full_width(cls) -> "DenoiserConfig":
        """Full-width adaptation blocks (C' = 256)."""
        return cls(adapted_channels=256)

    @property
    def level_channels(self) -> Tuple[int, ...]:
        return tuple(self.base_channels * m for m in self.channel_multipliers)


@dataclass
class FusionConfig(ConfigMixin):
    """Window cross-attention fusion settings."""
    window_size: int = 16
    head_dim: int = 4
    embed_dim: int = 16

    def __post_init__(self):
        if self.embed_dim % self.head_dim != 0:
            raise ConfigurationError("embed_dim must be a multiple of head_dim")

    @property
    def num_heads(self) -> int:
        return self.embed_dim // self.head_dim


@dataclass
class HUQNetConfig(ConfigMixin):
    """Architecture and module switches of the hybrid uncertainty network."""
    backbone_channels: Tuple[int, ...] = (32, 64, 128, 256)
    mc_samples: int = 10
    bnn_level: int = 3
    dropout: float = 0.1
    fusion: FusionConfig = field(default_factory=FusionConfig)
    use_bnn: bool = True
    use_bnn_map: bool = True
    use_entropy: bool = True
    use_ram: bool = True
    use_cross_attention: bool = True

    def __post_init__(self):
        if self.mc_samples < 2:
            raise ConfigurationError("mc_samples (K) must be at least 2")
        if not 1 <= self.bnn_level <= 4:
            raise ConfigurationError("bnn_level must index one of the 4 backbone levels")


@dataclass
class TrainConfig(ConfigMixin):
    """Optimisation settings for the three training stages."""
    lr_denoiser: float = 1e-4
    lr_backbone: float = 1e-7
    lr_bnn: float = 1e-6
    lr_huqnet: float = 1e-3
    weight_decay: float = 1e-4
    poly_power: float = 0.9
    batch_size: int = 16
    huqnet_epochs: int = 80
    denoiser_max_epochs: int = 100
    finetune_max_epochs: int = 40
    patience: int = 10
    val_fraction: float = 0.1
    val_steps: int = 3
    T_train: int = 1000
    eta: float = 0.1
    weight_kernel: int = 31
    weight_factor: float = 5.0
    seed: int = 0

    def __post_init__(self):
        rates = (self.lr_denoiser, self.lr_backbone, self.lr_bnn, self.lr_huqnet)
        if any(r <= 0 for r in rates):
            raise ConfigurationError("All learning rates must be positive")
        if self.T_train < 1:
            raise ConfigurationError("T_train must be at least 1")
        if not 0.0 < self.val_fraction < 1.0:
            raise ConfigurationError("val_fraction must lie in (0, 1)")


@dataclass
class InferenceConfig(ConfigMixin):
    """Sampling settings for refinement."""
    T_infer: int = 10
    sampler: SamplerType = SamplerType.DDIM
    sigma_rule: SigmaRule = SigmaRule.RATIO
    threshold: float = 0.5
    seed: int = 0
    uncertainty_source: UncertaintySource = UncertaintySource.HUQNET
    trace: bool = False

    def __post_init__(self):
        if self.T_infer < 1:
            raise ConfigurationError("T_infer must be at least 1")


@dataclass
class CorruptionSpec(ConfigMixin):
    """How the oracle prior degrades a ground-truth mask into a coarse mask."""
    radius_range: Tuple[int, int] = (0, 2)
    blur_range: Tuple[float, float] = (0.5, 1.5)
    false_blob_range: Tuple[int, int] = (0, 2)
    drop_blob_range: Tuple[int, int] = (0, 2)
    blob_radius_range: Tuple[float, float] = (2.0, 5.0)
    softness: float = 0.5

    def __post_init__(self):
        for name in ("radius_range", "blur_range", "false_blob_range", "drop_blob_range", "blob_radius_range"):
            low, high = getattr(self, name)
            if low < 0 or high < low:
                raise ConfigurationError(f"CorruptionSpec.{name} must be a non-negative (low, high) range")
        if not 0.0 <= self.softness <= 1.0:
            raise ConfigurationError("CorruptionSpec.softness must lie in [0, 1]")

    @classmethod
    def none(cls) -> "CorruptionSpec":
        """Severity 0: the coarse mask equals the ground truth."""
        return cls(radius_range=(0, 0), blur_range=(0.0, 0.0), false_blob_range=(0, 0),
                   drop_blob_range=(0, 0), softness=0.0)


@dataclass
class PriorConfig(ConfigMixin):
    """Which frozen prior segmenter a run uses."""
    kind: PriorKind = PriorKind.ORACLE
    seed: int = 0
    epochs: int = 3
    lr: float = 1e-3


@dataclass
class DatasetManifest(ConfigMixin):
    """Everything needed to regenerate a synthetic camouflage corpus."""
    seed: int = 0
    train_count: int = 500
    test_count: int = 100
    image_size: int = 64
    strength: float = 0.4
    texture_scales: Tuple[float, float] = (1.5, 4.0)
    texture_amplitude: float = 0.08
    intensity_offset: float = 0.3
    scale_offset: float = 0.5
    max_blobs: int = 3
    corruption: CorruptionSpec = field(default_factory=CorruptionSpec)
    format_version: int = 1

    def __post_init__(self):
        if self.train_count < 0 or self.test_count < 0:
            raise ConfigurationError("Split sizes must be non-negative")
        if self.image_size < 16:
            raise ConfigurationError("image_size must be at least 16 pixels")

    def split_count(self, split: str) -> int:
        if split == "train":
            return self.train_count
        if split == "test":
            return self.test_count
        raise ConfigurationError(f"Unknown split '{split}'")


@dataclass
class RunConfig(ConfigMixin):
    """Complete resolved configuration of a run directory."""
    train: TrainConfig = field(default_factory=TrainConfig)
    inference: InferenceConfig = field(default_factory=InferenceConfig)
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)
    huqnet: HUQNetConfig = field(default_factory=HUQNetConfig)
    prior: PriorConfig = field(default_factory=PriorConfig)
    data_dir: Optional[str] = None
    device: str = "cpu"


@dataclass
class DatasetSample:
    """One image-mask pair: image is 3xHxW float in [0, 1], mask is HxW in {0, 1}."""
    image: np.ndarray
    mask: np.ndarray
    id: str

    @property
    def foreground_fraction(self) -> float:
        return float(self.mask.mean())

    def image_tensor(self, dtype: torch.dtype = torch.float32) -> torch.Tensor:
        return torch.as_tensor(self.image, dtype=dtype)

    def mask_tensor(self, dtype: torch.dtype = torch.float32) -> torch.Tensor:
        return torch.as_tensor(self.mask, dtype=dtype).unsqueeze(0)


def pyramid_sizes(height: int, width: int) -> List[Tuple[int, int]]:
    """Spatial sizes of the 4 feature levels for an input of the given size."""
    sizes = []
    h, w = height, width
    for _ in range(2):
        h, w = math.ceil(h / 2), math.ceil(w / 2)
    for _ in FEATURE_STRIDES:
        sizes.append((h, w))
        h, w = math.ceil(h / 2), math.ceil(w / 2)
    return sizes


@dataclass
class FeaturePyramid:
    """Four feature maps at strides 4, 8, 16 and 32 relative to the input."""
    levels: List[torch.Tensor]

    def __post_init__(self):
        if len(self.levels) != len(FEATURE_STRIDES):
            raise ShapeMismatchError(f"A feature pyramid needs {len(FEATURE_STRIDES)} levels, got {len(self.levels)}")

    def __getitem__(self, index: int) -> torch.Tensor:
        return self.levels[index]

    def __len__(self) -> int:
        return len(self.levels)

    @property
    def channels(self) -> Tuple[int, ...]:
        return tuple(level.shape[1] for level in self.levels)

    def validate(self, height: int, width: int) -> None:
        """
        Check the level sizes against an input of the given size.

        Raises:
            ShapeMismatchError: If any level has an unexpected spatial size
        """
        for i, (level, expected) in enumerate(zip(self.levels, pyramid_sizes(height, width))):
            if tuple(level.shape[-2:]) != expected:
                raise ShapeMismatchError(
                    f"Feature level {i + 1} has size {tuple(level.shape[-2:])}, expected {expected} "
                    f"for a {height}x{width} input"
                )

    def map(self, fn) -> "FeaturePyramid":
        return FeaturePyramid([fn(level) for level in self.levels])

    def detach(self) -> "FeaturePyramid":
        return self.map(lambda level: level.detach())


@dataclass
class UncertaintyBundle:
    """All uncertainty maps produced by one HUQNet pass, each Bx1xHxW in [0, 1]."""
    u_entropy: torch.Tensor
    u_bnn: torch.Tensor
    u_disc: torch.Tensor
    u_hat: torch.Tensor
    mu: Optional[torch.Tensor] = None
    sigma: Optional[torch.Tensor] = None
    c_logit: Optional[torch.Tensor] = None


@dataclass
class LossReport:
    """A differentiable total loss plus detached named components."""
    total: torch.Tensor
    components: Dict[str, float] = field(default_factory=dict)

    def is_finite(self) -> bool:
        return bool(torch.isfinite(self.total).all()) and all(math.isfinite(v) for v in self.components.values())

    def as_row(self) -> Dict[str, float]:
        row = {"total": float(self.total.detach())}
        row.update(self.components)
        return row


@dataclass
class MetricRow:
    """Corpus-level averages of the four evaluation measures."""
    mae: float
    f_beta_w: float
    e_phi: float
    s_alpha: float
    sample_count: int

    def to_dict(self) -> Dict[str, Any]:
        return {
            "mae": self.mae,
            "f_beta_w": self.f_beta_w,
            "e_phi": self.e_phi,
            "s_alpha": self.s_alpha,
            "n": self.sample_count,
        }

    @classmethod
    def average(cls, rows: List["MetricRow"]) -> "MetricRow":
        """Average several rows (e.g. one per seed)."""
        if not rows:
            raise ValueError("Cannot average an empty list of metric rows")
        return cls(
            mae=float(np.mean([r.mae for r in rows])),
            f_beta_w=float(np.mean([r.f_beta_w for r in rows])),
            e_phi=float(np.mean([r.e_phi for r in rows])),
            s_alpha=float(np.mean([r.s_alpha for r in rows])),
            sample_count=rows[0].sample_count,
        )


@dataclass
class RefinementRecord:
    """Per-sample result of one refinement run."""
    sample_id: str
    coarse: torch.Tensor
    uncertainty: torch.Tensor
    refined: torch.Tensor
    y0_hat: torch.Tensor
    trace: List[torch.Tensor] = field(default_factory=list)
    timesteps: List[int] = field(default_factory=list)
    metrics: Dict[str, Dict[str, float]] = field(default_factory=dict)

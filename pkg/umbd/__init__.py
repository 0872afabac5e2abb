"""
UMBD - uncertainty-masked Bernoulli diffusion for segmentation refinement

This package refines the coarse masks of a frozen segmenter: a hybrid
uncertainty network marks where the coarse mask is likely wrong, and a
Bernoulli diffusion model re-generates the mask only inside that region.
"""

__version__ = "0.1.0"

from .diffusion import (
    NoiseSchedule, make_cosine_schedule, forward_marginal_param, sample_forward, bernoulli_posterior,
    ddpm_reverse_step, ddim_reverse_step, compose_refined_mask, select_ddim_subsequence, run_reverse_chain
)
from .denoiser import Denoiser
from .huqnet import HUQNet
from .segmenters import PriorSegmenter, CorruptedOracleSegmenter, ToyCNNSegmenter, uncertainty_gt
from .datagen import generate_camo_sample, write_dataset, load_dataset
from .metrics import mae, weighted_fmeasure, adaptive_emeasure, smeasure
from .pipeline import RefinementPipeline
from .models import (
    RunConfig, TrainConfig, InferenceConfig, DenoiserConfig, HUQNetConfig, PriorConfig, CorruptionSpec,
    DatasetManifest, DatasetSample, FeaturePyramid, RefinementRecord, MetricRow, LossReport,
    SamplerType, SigmaRule, UncertaintySource, PriorKind
)
from .exceptions import (
    UMBDError, ConfigurationError, ShapeMismatchError, ScheduleRangeError, DatasetError,
    CheckpointError, NumericalError, FreezeViolationError
)

__all__ = [
    'NoiseSchedule',
    'make_cosine_schedule',
    'forward_marginal_param',
    'sample_forward',
    'bernoulli_posterior',
    'ddpm_reverse_step',
    'ddim_reverse_step',
    'compose_refined_mask',
    'select_ddim_subsequence',
    'run_reverse_chain',
    'Denoiser',
    'HUQNet',
    'PriorSegmenter',
    'CorruptedOracleSegmenter',
    'ToyCNNSegmenter',
    'uncertainty_gt',
    'generate_camo_sample',
    'write_dataset',
    'load_dataset',
    'mae',
    'weighted_fmeasure',
    'adaptive_emeasure',
    'smeasure',
    'RefinementPipeline',
    'RunConfig',
    'TrainConfig',
    'InferenceConfig',
    'DenoiserConfig',
    'HUQNetConfig',
    'PriorConfig',
    'CorruptionSpec',
    'DatasetManifest',
    'DatasetSample',
    'FeaturePyramid',
    'RefinementRecord',
    'MetricRow',
    'LossReport',
    'SamplerType',
    'SigmaRule',
    'UncertaintySource',
    'PriorKind',
    'UMBDError',
    'ConfigurationError',
    'ShapeMismatchError',
    'ScheduleRangeError',
    'DatasetError',
    'CheckpointError',
    'NumericalError',
    'FreezeViolationError',
]

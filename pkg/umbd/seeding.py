"""
Seed splitting.

Every random stream in the package derives from one root seed through
numpy.random.SeedSequence([root_seed, purpose_code, index]); torch generators
are seeded from the first 64-bit word of that sequence.
"""

from typing import Union

import numpy as np
import torch

PURPOSE_CODES = {
    "train": 1,
    "test": 2,
    "corruption": 3,
    "prior_encoder": 4,
    "prior_training": 5,
    "huqnet_training": 6,
    "denoiser_training": 7,
    "finetune_training": 8,
    "validation": 9,
    "inference": 10,
    "init": 11,
}


def _sequence(root_seed: int, purpose: str, index: int) -> np.random.SeedSequence:
    if purpose not in PURPOSE_CODES:
        raise KeyError(f"Unknown seed purpose '{purpose}'")
    return np.random.SeedSequence([int(root_seed), PURPOSE_CODES[purpose], int(index)])


def derive_rng(root_seed: int, purpose: str, index: int = 0) -> np.random.Generator:
    """numpy generator for one (purpose, index) stream."""
    return np.random.default_rng(_sequence(root_seed, purpose, index))


def derive_seed(root_seed: int, purpose: str, index: int = 0) -> int:
    return int(_sequence(root_seed, purpose, index).generate_state(1, dtype=np.uint64)[0])


def derive_generator(
    root_seed: int, purpose: str, index: int = 0, device: Union[str, torch.device] = "cpu"
) -> torch.Generator:
    """torch generator for one (purpose, index) stream."""
    return torch.Generator(device=device).manual_seed(derive_seed(root_seed, purpose, index))

"""
Shared fixtures and helpers for the UMBD test suite.
"""

import math

import pytest
import torch

from umbd.models import DenoiserConfig, FusionConfig, HUQNetConfig, InferenceConfig, RunConfig, TrainConfig


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run slow acceptance experiments")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: full toy-training experiments, skipped without --runslow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def generator():
    """A torch generator with a fixed seed."""
    return torch.Generator().manual_seed(1234)


def is_almost_equal(numeric: float, analytic: float, rel_tol: float = 1e-4, abs_tol: float = 1e-8) -> bool:
    diff = abs(numeric - analytic)
    if diff < abs_tol:
        return True
    scale = max(abs(numeric), abs(analytic))
    return not math.isnan(diff) and diff / scale < rel_tol


def check_parameter_gradients(module: torch.nn.Module, loss_fn, count: int = 20, step: float = 1e-5, seed: int = 0):
    """
    Compare autograd against central differences on randomly chosen parameter entries.

    Entries whose one-sided differences disagree sit on a kink (ReLU, clamp,
    max) within one step; the central difference is meaningless there and the
    entry is skipped.

    Args:
        module: A float64 module in eval mode
        loss_fn: Callable returning a scalar loss that depends on module's parameters
        count: Number of parameter entries to check
        step: Finite-difference step

    Returns:
        List of (name, index, numeric, analytic) tuples that failed
    """
    params = [(name, p) for name, p in module.named_parameters() if p.requires_grad]
    module.zero_grad()
    loss_fn().backward()
    analytic = {name: (p.grad if p.grad is not None else torch.zeros_like(p)).detach().clone() for name, p in params}

    rng = torch.Generator().manual_seed(seed)
    failures = []
    with torch.no_grad():
        center = loss_fn().item()
        for _ in range(count):
            which = int(torch.randint(len(params), (1,), generator=rng))
            name, p = params[which]
            flat = p.view(-1)
            index = int(torch.randint(flat.numel(), (1,), generator=rng))
            old = flat[index].item()

            flat[index] = old + step
            right = loss_fn().item()
            flat[index] = old - step
            left = loss_fn().item()
            flat[index] = old

            if not is_almost_equal((right - center) / step, (center - left) / step, rel_tol=1e-2):
                continue
            numeric = (right - left) / (2 * step)
            exact = analytic[name].view(-1)[index].item()
            if not is_almost_equal(numeric, exact):
                failures.append((name, index, numeric, exact))
    return failures


def tiny_run_config() -> RunConfig:
    """Networks and schedules small enough for a full three-stage fit on CPU in seconds."""
    return RunConfig(
        train=TrainConfig(T_train=20, batch_size=4, huqnet_epochs=1, denoiser_max_epochs=2, finetune_max_epochs=1,
                          patience=1, val_steps=2, weight_kernel=5, seed=0),
        inference=InferenceConfig(T_infer=3),
        denoiser=DenoiserConfig(base_channels=8, channel_multipliers=(1, 1, 2, 2), time_embedding_dim=16,
                                adapted_channels=8),
        huqnet=HUQNetConfig(backbone_channels=(8, 8, 16, 16), mc_samples=2,
                            fusion=FusionConfig(window_size=8, head_dim=2, embed_dim=4)),
    )

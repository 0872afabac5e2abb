"""
Checkpoint files and parameter checksums.

A checkpoint is a plain dictionary written with torch.save:

    {"format": "umbd-denoiser" | "umbd-huqnet" | "umbd-prior",
     "version": 1,
     "config": {...},
     "schedule": {"T_train": ..., "kind": "cosine", "s": ...} or None,
     "shapes": {name: [dims]},
     "dtypes": {name: "torch.float32" | "torch.int64" | ...},
     "params": {name: flat float32 tensor}}
"""

import hashlib
import logging
from pathlib import Path
from typing import Any, Dict, Optional, Union

import torch
import torch.nn as nn

from .exceptions import CheckpointError

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
DENOISER_FORMAT = "umbd-denoiser"
HUQNET_FORMAT = "umbd-huqnet"
PRIOR_FORMAT = "umbd-prior"

_DTYPES = {str(d): d for d in (torch.float16, torch.bfloat16, torch.float32, torch.float64,
                               torch.int32, torch.int64, torch.uint8, torch.bool)}


def parameter_checksum(module: nn.Module) -> str:
    """sha256 hex digest over the module's state dict, names sorted."""
    digest = hashlib.sha256()
    state = module.state_dict()
    for name in sorted(state):
        tensor = state[name].detach().cpu().contiguous()
        digest.update(name.encode("utf-8"))
        digest.update(str(tensor.dtype).encode("utf-8"))
        digest.update(tensor.view(-1).to(torch.float64).numpy().tobytes())
    return digest.hexdigest()


def save_checkpoint(
    path: Union[str, Path],
    module: nn.Module,
    format_tag: str,
    config: Optional[Dict[str, Any]] = None,
    schedule: Optional[Dict[str, Any]] = None,
) -> Path:
    """
    Write a module's state dict in the documented checkpoint layout.

    Args:
        path: Target file
        module: Network to save
        format_tag: One of the *_FORMAT constants
        config: JSON-compatible architecture settings
        schedule: Noise schedule metadata, if the network depends on one

    Returns:
        Path: The written file
    """
    path = Path(path)
    state = module.state_dict()
    payload = {
        "format": format_tag,
        "version": CHECKPOINT_VERSION,
        "config": config or {},
        "schedule": schedule,
        "shapes": {name: list(t.shape) for name, t in state.items()},
        "dtypes": {name: str(t.dtype) for name, t in state.items()},
        "params": {name: t.detach().cpu().to(torch.float32).reshape(-1).clone() for name, t in state.items()},
    }
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save(payload, path)
    except OSError as e:
        logger.error(f"Failed to write checkpoint {path}: {e}")
        raise CheckpointError(f"Cannot write checkpoint {path}") from e
    logger.info(f"Saved {format_tag} checkpoint to {path}")
    return path


def load_checkpoint(path: Union[str, Path], expected_format: str) -> Dict[str, Any]:
    """
    Read a checkpoint and validate its format tag and version.

    Raises:
        CheckpointError: If the file is missing, unreadable or of another format
    """
    path = Path(path)
    if not path.is_file():
        logger.error(f"Checkpoint not found: {path}")
        raise CheckpointError(f"Checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as e:
        logger.error(f"Failed to read checkpoint {path}: {e}")
        raise CheckpointError(f"Cannot read checkpoint {path}") from e

    if not isinstance(payload, dict) or payload.get("format") != expected_format:
        found = payload.get("format") if isinstance(payload, dict) else type(payload).__name__
        raise CheckpointError(f"{path} holds '{found}', expected '{expected_format}'")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path} has version {payload.get('version')}, expected {CHECKPOINT_VERSION}")
    return payload


def restore_state(module: nn.Module, payload: Dict[str, Any]) -> nn.Module:
    """
    Load checkpoint parameters into a module built from payload["config"].

    Raises:
        CheckpointError: If names or shapes do not match the module
    """
    try:
        state = {
            name: flat.view(payload["shapes"][name]).to(_DTYPES[payload["dtypes"][name]])
            for name, flat in payload["params"].items()
        }
        module.load_state_dict(state, strict=True)
    except (KeyError, RuntimeError) as e:
        logger.error(f"Checkpoint does not fit {type(module).__name__}: {e}")
        raise CheckpointError(f"Checkpoint does not fit {type(module).__name__}") from e
    return module

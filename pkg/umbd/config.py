"""
Run configuration and run-directory layout.

A run is configured by one JSON file with the sections ``train``,
``inference``, ``denoiser``, ``huqnet``, ``prior`` and ``data`` plus an
optional top-level ``device``. Values are resolved in this order, later
winning: dataclass defaults, the config file, environment variables (a
``.env`` file is loaded first), explicit overrides from the command line.

Environment variables:
    UMBD_DEVICE      torch device for every network
    UMBD_SEED        root seed for training, inference and the prior
    UMBD_LOG_LEVEL   logging level used by the CLI
    UMBD_RUNS_DIR    where bare run names are placed (default ./runs)
"""

import json
import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Optional, Union

from dotenv import load_dotenv

from .exceptions import ConfigurationError
from .models import DenoiserConfig, HUQNetConfig, InferenceConfig, PriorConfig, RunConfig, TrainConfig

logger = logging.getLogger(__name__)

CONFIG_NAME = "config.json"
SECTIONS = {
    "train": TrainConfig,
    "inference": InferenceConfig,
    "denoiser": DenoiserConfig,
    "huqnet": HUQNetConfig,
    "prior": PriorConfig,
}
DEFAULT_RUNS_DIR = "runs"


def load_environment(dotenv_path: Optional[Union[str, Path]] = None) -> None:
    """Load a .env file into os.environ without overwriting existing variables."""
    load_dotenv(dotenv_path=dotenv_path)


def env_log_level(default: str = "INFO") -> str:
    return os.getenv("UMBD_LOG_LEVEL", default).upper()


def runs_dir() -> Path:
    return Path(os.getenv("UMBD_RUNS_DIR", DEFAULT_RUNS_DIR))


def config_from_dict(data: Dict[str, Any]) -> RunConfig:
    """
    Build a RunConfig from the JSON structure.

    Raises:
        ConfigurationError: On unknown sections or keys, or invalid values
    """
    unknown = set(data) - set(SECTIONS) - {"data", "device"}
    if unknown:
        logger.error(f"Unknown config sections: {sorted(unknown)}")
        raise ConfigurationError(f"Unknown config sections: {sorted(unknown)}")

    sections = {name: cls.from_dict(data.get(name)) for name, cls in SECTIONS.items()}
    data_section = data.get("data") or {}
    extra = set(data_section) - {"dir"}
    if extra:
        raise ConfigurationError(f"Unknown data keys: {sorted(extra)}")
    return RunConfig(data_dir=data_section.get("dir"), device=data.get("device", "cpu"), **sections)


def config_to_dict(config: RunConfig) -> Dict[str, Any]:
    result = {name: getattr(config, name).to_dict() for name in SECTIONS}
    result["data"] = {"dir": config.data_dir}
    result["device"] = config.device
    return result


def apply_environment(config: RunConfig) -> RunConfig:
    """Apply UMBD_DEVICE and UMBD_SEED."""
    device = os.getenv("UMBD_DEVICE")
    if device:
        config = config.replace(device=device)
    seed = os.getenv("UMBD_SEED")
    if seed:
        try:
            value = int(seed)
        except ValueError as e:
            logger.error(f"UMBD_SEED must be an integer, got '{seed}'")
            raise ConfigurationError(f"UMBD_SEED must be an integer, got '{seed}'") from e
        config = with_seed(config, value)
    return config


def with_seed(config: RunConfig, seed: int) -> RunConfig:
    """Use one root seed for training, inference and the prior."""
    return config.replace(
        train=config.train.replace(seed=seed),
        inference=config.inference.replace(seed=seed),
        prior=config.prior.replace(seed=seed),
    )


def load_run_config(
    path: Optional[Union[str, Path]] = None,
    dotenv_path: Optional[Union[str, Path]] = None,
    use_environment: bool = True,
) -> RunConfig:
    """
    Resolve a run configuration.

    Args:
        path: JSON config file; defaults only when omitted
        dotenv_path: Optional .env file
        use_environment: Apply UMBD_* variables on top of the file

    Raises:
        ConfigurationError: If the file is missing, not JSON or has bad values
    """
    data: Dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError as e:
            logger.error(f"Config file not found: {path}")
            raise ConfigurationError(f"Config file not found: {path}") from e
        except json.JSONDecodeError as e:
            logger.error(f"Config file is not valid JSON: {path}: {e}")
            raise ConfigurationError(f"Config file is not valid JSON: {path}") from e
        if not isinstance(data, dict):
            raise ConfigurationError(f"Config file must hold a JSON object: {path}")

    config = config_from_dict(data)
    if use_environment:
        load_environment(dotenv_path)
        config = apply_environment(config)
    return config


def save_run_config(config: RunConfig, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(config_to_dict(config), sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return path


def resolve_run_dir(run: Union[str, Path]) -> Path:
    """A bare run name goes under UMBD_RUNS_DIR; paths are used as given."""
    path = Path(run)
    if path.is_absolute() or len(path.parts) > 1 or path.exists():
        return path
    return runs_dir() / path


@dataclass(frozen=True)
class RunLayout:
    """
    Files of one run directory:

        <root>/config.json
        <root>/checkpoints/{prior,huqnet,denoiser}.pt
        <root>/logs.csv
        <root>/eval.csv, eval_samples.csv, ablate_steps.csv, ablate_uncertainty.csv
        <root>/figures/
        <root>/diagnostics/
    """
    root: Path

    @classmethod
    def at(cls, run: Union[str, Path]) -> "RunLayout":
        return cls(resolve_run_dir(run))

    @property
    def config(self) -> Path:
        return self.root / CONFIG_NAME

    @property
    def checkpoints(self) -> Path:
        return self.root / "checkpoints"

    @property
    def prior_checkpoint(self) -> Path:
        return self.checkpoints / "prior.pt"

    @property
    def huqnet_checkpoint(self) -> Path:
        return self.checkpoints / "huqnet.pt"

    @property
    def denoiser_checkpoint(self) -> Path:
        return self.checkpoints / "denoiser.pt"

    @property
    def logs(self) -> Path:
        return self.root / "logs.csv"

    @property
    def eval(self) -> Path:
        return self.root / "eval.csv"

    @property
    def eval_samples(self) -> Path:
        return self.root / "eval_samples.csv"

    @property
    def ablate_steps(self) -> Path:
        return self.root / "ablate_steps.csv"

    @property
    def ablate_uncertainty(self) -> Path:
        return self.root / "ablate_uncertainty.csv"

    @property
    def figures(self) -> Path:
        return self.root / "figures"

    @property
    def diagnostics(self) -> Path:
        return self.root / "diagnostics"

    def create(self) -> "RunLayout":
        for directory in (self.root, self.checkpoints, self.figures):
            directory.mkdir(parents=True, exist_ok=True)
        return self

"""
CSV tables and figures written into run directories.
"""

import csv
import logging
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import torch  # noqa: E402

from .datagen import write_mask  # noqa: E402
from .exceptions import DatasetError  # noqa: E402
from .metrics import METRIC_NAMES  # noqa: E402
from .models import MetricRow  # noqa: E402

logger = logging.getLogger(__name__)

EVAL_FIELDS = ["segmenter", "refined", "T_infer", "mae", "f_beta_w", "e_phi", "s_alpha", "n"]
SAMPLE_FIELDS = ["seed", "sample_id", "variant", "mae", "f_beta_w", "e_phi", "s_alpha"]
STEP_FIELDS = ["T_infer", "mae", "f_beta_w", "e_phi", "s_alpha", "n", "seconds_per_image"]
UNCERTAINTY_FIELDS = ["source", "mae", "f_beta_w", "e_phi", "s_alpha", "n", "uncertainty_error"]
LOG_FIELDS = ["step", "stage", "epoch", "total", "kl", "wiou", "wbce",
              "huq_bce", "dice", "bnn_bce", "bnn_kl", "val_mae"]

METRIC_LABELS = {"mae": "MAE", "f_beta_w": "F_beta^w", "e_phi": "E_phi", "s_alpha": "S_alpha"}


# CSV

def _cell(value: Any) -> Any:
    if isinstance(value, bool):
        return int(value)
    if isinstance(value, float):
        return f"{value:.6f}"
    return "" if value is None else value


def write_csv(path: Union[str, Path], fieldnames: Sequence[str], rows: Iterable[Dict[str, Any]]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(fieldnames), extrasaction="ignore", lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _cell(row.get(k)) for k in fieldnames})
    logger.debug(f"Wrote {path}")
    return path


def read_csv(path: Union[str, Path]) -> List[Dict[str, str]]:
    """
    Raises:
        DatasetError: If the file does not exist
    """
    path = Path(path)
    if not path.is_file():
        logger.error(f"CSV file not found: {path}")
        raise DatasetError(f"CSV file not found: {path}")
    with path.open("r", encoding="utf-8", newline="") as f:
        return list(csv.DictReader(f))


def metric_fields(row: MetricRow) -> Dict[str, Any]:
    return {"mae": row.mae, "f_beta_w": row.f_beta_w, "e_phi": row.e_phi, "s_alpha": row.s_alpha,
            "n": row.sample_count}


def eval_rows(segmenter: str, T_infer: int, coarse: MetricRow, refined: MetricRow) -> List[Dict[str, Any]]:
    """The coarse row and the refined row of one evaluation."""
    return [
        {"segmenter": segmenter, "refined": False, "T_infer": T_infer, **metric_fields(coarse)},
        {"segmenter": segmenter, "refined": True, "T_infer": T_infer, **metric_fields(refined)},
    ]


class LossLog:
    """Appends loss-component rows to logs.csv, writing the header once."""

    def __init__(self, path: Union[str, Path]):
        self.path = Path(path)
        self.step = len(read_csv(self.path)) if self.path.is_file() else 0

    def append(self, stage: str, epoch: int, components: Dict[str, float]) -> None:
        self.step += 1
        new_file = not self.path.is_file()
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with self.path.open("a", encoding="utf-8", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=LOG_FIELDS, extrasaction="ignore", lineterminator="\n")
            if new_file:
                writer.writeheader()
            row = {"step": self.step, "stage": stage, "epoch": epoch, **components}
            writer.writerow({k: _cell(row.get(k)) for k in LOG_FIELDS})


# Figures

def _save(fig, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=150)
    plt.close(fig)
    logger.info(f"Saved figure {path}")
    return path


def plot_metric_deltas(rows: List[Dict[str, str]], path: Union[str, Path]) -> Path:
    """Grouped bars of coarse vs refined scores per metric, with the refined-minus-coarse delta annotated."""
    coarse = next((r for r in rows if r["refined"] in ("0", "False")), None)
    refined = next((r for r in rows if r["refined"] in ("1", "True")), None)
    if coarse is None or refined is None:
        raise DatasetError("Evaluation table needs one coarse and one refined row")

    x = np.arange(len(METRIC_NAMES))
    before = [float(coarse[m]) for m in METRIC_NAMES]
    after = [float(refined[m]) for m in METRIC_NAMES]
    fig, ax = plt.subplots(figsize=(6, 3.6), constrained_layout=True)
    ax.bar(x - 0.2, before, width=0.4, label="coarse")
    ax.bar(x + 0.2, after, width=0.4, label="refined")
    for i, (b, a) in enumerate(zip(before, after)):
        ax.annotate(f"{a - b:+.3f}", (x[i] + 0.2, a), ha="center", va="bottom", fontsize=8)
    ax.set_xticks(x, [METRIC_LABELS[m] for m in METRIC_NAMES])
    ax.set_ylim(0.0, 1.1)
    ax.set_title(f"{coarse['segmenter']}: coarse vs refined")
    ax.legend(loc="best", fontsize=8)
    ax.grid(True, axis="y", alpha=0.3)
    return _save(fig, Path(path))


def plot_loss_curves(rows: List[Dict[str, str]], path: Union[str, Path]) -> Path:
    """One panel per training stage, total loss against step."""
    stages: Dict[str, List[Dict[str, str]]] = {}
    for row in rows:
        stages.setdefault(row["stage"], []).append(row)
    if not stages:
        raise DatasetError("No training log rows to plot")

    fig, axes = plt.subplots(1, len(stages), figsize=(4 * len(stages), 3.2), constrained_layout=True, squeeze=False)
    for ax, (stage, stage_rows) in zip(axes[0], stages.items()):
        ax.plot([int(r["step"]) for r in stage_rows], [float(r["total"]) for r in stage_rows], linewidth=1)
        ax.set_title(f"stage {stage}")
        ax.set_xlabel("step")
        ax.grid(True, alpha=0.3)
    axes[0][0].set_ylabel("loss")
    return _save(fig, Path(path))


def plot_step_ablation(rows: List[Dict[str, str]], path: Union[str, Path]) -> Path:
    steps = [int(r["T_infer"]) for r in rows]
    fig, (left, right) = plt.subplots(1, 2, figsize=(8, 3.2), constrained_layout=True)
    left.plot(steps, [float(r["mae"]) for r in rows], marker="o")
    left.set_xlabel("T_infer")
    left.set_ylabel("MAE")
    right.plot(steps, [float(r["seconds_per_image"]) for r in rows], marker="o")
    right.set_xlabel("T_infer")
    right.set_ylabel("s / image")
    for ax in (left, right):
        ax.grid(True, alpha=0.3)
    return _save(fig, Path(path))


def save_trace(
    trace: List[torch.Tensor], uncertainty: torch.Tensor, directory: Union[str, Path],
    timesteps: Optional[Sequence[int]] = None,
) -> Path:
    """Write every traced latent and the uncertainty map as grayscale PNGs."""
    directory = Path(directory)
    labels = list(timesteps) if timesteps is not None else list(range(len(trace)))
    for label, latent in zip(labels, trace):
        write_mask(latent.detach().cpu().squeeze().numpy(), directory / f"y_{int(label):04d}.png")
    write_mask(uncertainty.detach().cpu().squeeze().numpy(), directory / "uncertainty.png")
    return directory

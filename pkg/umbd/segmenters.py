"""
Frozen prior segmenters.

A prior segmenter turns an image batch into a coarse mask and a 4-level
feature pyramid. Two interchangeable implementations are provided: a
corrupted oracle that degrades registered ground-truth masks, and a small
CNN trained briefly with BCE and then frozen.
"""

import logging
from abc import ABC, abstractmethod
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy import ndimage

from .checkpoint import parameter_checksum
from .datagen import image_digest
from .exceptions import DatasetError, FreezeViolationError, ShapeMismatchError
from .huqnet import Backbone
from .models import CorruptionSpec, DatasetSample, FeaturePyramid, PriorConfig, PriorKind
from .seeding import derive_rng, derive_seed

logger = logging.getLogger(__name__)

PRIOR_CHANNELS: Tuple[int, ...] = (32, 64, 128, 256)


def uncertainty_gt(Mc: torch.Tensor, M_GT: torch.Tensor) -> torch.Tensor:
    """U_GT = |M_c - M_GT|."""
    if Mc.shape != M_GT.shape:
        logger.error(f"Coarse mask {tuple(Mc.shape)} and ground truth {tuple(M_GT.shape)} differ")
        raise ShapeMismatchError(f"Coarse mask {tuple(Mc.shape)} and ground truth {tuple(M_GT.shape)} differ")
    return (Mc - M_GT).abs()


def freeze(module: nn.Module) -> nn.Module:
    module.eval()
    for p in module.parameters():
        p.requires_grad_(False)
    return module


def unfreeze(module: nn.Module) -> nn.Module:
    """Undo `freeze`: training mode with gradients on every parameter."""
    module.train()
    for p in module.parameters():
        p.requires_grad_(True)
    return module


def seeded_backbone(seed: int, channels: Sequence[int] = PRIOR_CHANNELS) -> Backbone:
    """A backbone whose random initial weights depend only on the seed."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return Backbone(tuple(channels))


class PriorSegmenter(ABC):
    """Interface shared by every prior: segment(x) -> (M_c, FeaturePyramid)."""

    kind: PriorKind
    frozen: bool = True
    feature_channels: Tuple[int, ...] = PRIOR_CHANNELS

    @property
    @abstractmethod
    def network(self) -> nn.Module:
        """The module whose parameters make up the frozen state."""

    @abstractmethod
    def segment(self, x: torch.Tensor) -> Tuple[torch.Tensor, FeaturePyramid]:
        """Coarse masks Bx1xHxW in [0, 1] and features at strides 4, 8, 16, 32."""

    @torch.no_grad()
    def features(self, x: torch.Tensor) -> FeaturePyramid:
        return self.network(x).detach()

    def checksum(self) -> str:
        return parameter_checksum(self.network)

    def to(self, device) -> "PriorSegmenter":
        self.network.to(device)
        return self

    def assert_unchanged(self, expected: str) -> None:
        """
        Raises:
            FreezeViolationError: If the parameters changed since `expected` was taken
        """
        current = self.checksum()
        if current != expected:
            logger.error(f"Prior segmenter checksum changed: {expected[:12]} -> {current[:12]}")
            raise FreezeViolationError("Prior segmenter parameters changed while frozen")


# Corrupted oracle

def disk(radius: float) -> np.ndarray:
    r = int(np.ceil(radius))
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
    return (yy ** 2 + xx ** 2) <= radius ** 2


def _paint_disk(mask: np.ndarray, cy: int, cx: int, radius: float, value: bool) -> None:
    yy, xx = np.ogrid[0:mask.shape[0], 0:mask.shape[1]]
    mask[(yy - cy) ** 2 + (xx - cx) ** 2 <= radius ** 2] = value


def corrupt_mask(mask: np.ndarray, spec: CorruptionSpec, rng: np.random.Generator) -> np.ndarray:
    """
    Degrade a binary mask the way real segmenters fail.

    Steps: dilate or erode by a random radius, paint false-positive blobs,
    cut drop-out blobs from the foreground, then mix in a gaussian-blurred
    copy with weight `softness`.

    Returns:
        np.ndarray: float32 HxW in [0, 1]
    """
    hard = mask.astype(bool).copy()
    height, width = hard.shape

    radius = int(rng.integers(spec.radius_range[0], spec.radius_range[1] + 1))
    if radius > 0:
        if rng.random() < 0.5:
            hard = ndimage.binary_dilation(hard, structure=disk(radius))
        else:
            hard = ndimage.binary_erosion(hard, structure=disk(radius), border_value=0)

    for _ in range(int(rng.integers(spec.false_blob_range[0], spec.false_blob_range[1] + 1))):
        r = rng.uniform(*spec.blob_radius_range)
        _paint_disk(hard, int(rng.integers(height)), int(rng.integers(width)), r, True)

    for _ in range(int(rng.integers(spec.drop_blob_range[0], spec.drop_blob_range[1] + 1))):
        ys, xs = np.nonzero(hard)
        if ys.size == 0:
            break
        pick = int(rng.integers(ys.size))
        _paint_disk(hard, int(ys[pick]), int(xs[pick]), rng.uniform(*spec.blob_radius_range), False)

    coarse = hard.astype(np.float64)
    sigma = rng.uniform(*spec.blur_range)
    if sigma > 0 and spec.softness > 0:
        blurred = ndimage.gaussian_filter(coarse, sigma)
        coarse = (1 - spec.softness) * coarse + spec.softness * blurred
    return np.clip(coarse, 0.0, 1.0).astype(np.float32)


class CorruptedOracleSegmenter(PriorSegmenter):
    """
    Looks up a corrupted version of each registered image's ground truth.

    Images are keyed by the digest of their 8-bit quantisation, so a sample and
    its PNG round trip share one entry. Features come from a randomly
    initialised backbone frozen at construction.
    """

    kind = PriorKind.ORACLE

    def __init__(self, spec: Optional[CorruptionSpec] = None, seed: int = 0):
        self.spec = spec or CorruptionSpec()
        self.seed = seed
        self._encoder = freeze(seeded_backbone(derive_seed(seed, "prior_encoder")))
        self._coarse: Dict[str, np.ndarray] = {}

    @property
    def network(self) -> nn.Module:
        return self._encoder

    def register(self, image: np.ndarray, mask: np.ndarray) -> np.ndarray:
        """Store (and return) the coarse mask for one image."""
        digest = image_digest(image)
        rng = derive_rng(self.seed, "corruption", int(digest[:15], 16))
        coarse = corrupt_mask(mask, self.spec, rng)
        self._coarse[digest] = coarse
        return coarse

    def register_samples(self, samples: Iterable[DatasetSample]) -> "CorruptedOracleSegmenter":
        count = 0
        for sample in samples:
            self.register(sample.image, sample.mask)
            count += 1
        logger.debug(f"Oracle prior registered {count} images ({len(self._coarse)} total)")
        return self

    def __len__(self) -> int:
        return len(self._coarse)

    def coarse_for(self, image: np.ndarray) -> np.ndarray:
        """
        Raises:
            DatasetError: If the image was never registered
        """
        digest = image_digest(image)
        if digest not in self._coarse:
            logger.error(f"Image {digest[:12]} is not registered with the oracle prior")
            raise DatasetError("Image is not registered with the corrupted-oracle prior")
        return self._coarse[digest]

    @torch.no_grad()
    def segment(self, x: torch.Tensor) -> Tuple[torch.Tensor, FeaturePyramid]:
        images = x.detach().cpu().to(torch.float64).numpy()
        coarse = np.stack([self.coarse_for(img) for img in images])[:, None]
        Mc = torch.from_numpy(coarse).to(device=x.device, dtype=x.dtype)
        return Mc, self.features(x)


def corrupted_oracle_segmenter(
    samples: Iterable[DatasetSample], spec: Optional[CorruptionSpec] = None, seed: int = 0
) -> CorruptedOracleSegmenter:
    """Build an oracle prior with every given sample registered."""
    return CorruptedOracleSegmenter(spec, seed).register_samples(samples)


# Toy CNN

class ToyCNN(nn.Module):
    """Backbone plus a light top-down decoder producing one logit map."""

    def __init__(self, channels: Tuple[int, ...] = PRIOR_CHANNELS, width: int = 32):
        super().__init__()
        self.encoder = Backbone(channels)
        self.lateral = nn.ModuleList([nn.Conv2d(c, width, 1) for c in channels])
        self.head = nn.Conv2d(width, 1, 3, padding=1)

    def forward(self, x: torch.Tensor) -> Tuple[torch.Tensor, FeaturePyramid]:
        pyramid = self.encoder(x)
        h = self.lateral[-1](pyramid[3])
        for i in range(2, -1, -1):
            skip = self.lateral[i](pyramid[i])
            h = F.interpolate(h, size=skip.shape[-2:], mode="bilinear", align_corners=False) + skip
        logits = F.interpolate(self.head(F.relu(h)), size=x.shape[-2:], mode="bilinear", align_corners=False)
        return logits, pyramid


class ToyCNNSegmenter(PriorSegmenter):
    """A trained-then-frozen ToyCNN."""

    kind = PriorKind.TOY_CNN

    def __init__(self, model: Optional[ToyCNN] = None):
        self.model = freeze(model or ToyCNN())

    @property
    def network(self) -> nn.Module:
        return self.model

    @torch.no_grad()
    def features(self, x: torch.Tensor) -> FeaturePyramid:
        return self.model.encoder(x).detach()

    @torch.no_grad()
    def segment(self, x: torch.Tensor) -> Tuple[torch.Tensor, FeaturePyramid]:
        logits, pyramid = self.model(x)
        return torch.sigmoid(logits), pyramid.detach()


def toy_cnn_segmenter_train(
    samples: List[DatasetSample],
    epochs: int = 3,
    seed: int = 0,
    lr: float = 1e-3,
    batch_size: int = 16,
    device: str = "cpu",
) -> ToyCNNSegmenter:
    """
    Train a ToyCNN with BCE for a few epochs, then freeze it.

    Raises:
        DatasetError: If no samples are given
    """
    if not samples:
        logger.error("Cannot train the toy prior on an empty dataset")
        raise DatasetError("Toy CNN prior needs a non-empty training set")

    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(derive_seed(seed, "init", 0))
        model = ToyCNN().to(device)
    optimizer = torch.optim.AdamW(model.parameters(), lr=lr, weight_decay=1e-4)
    images = torch.from_numpy(np.stack([s.image for s in samples])).float()
    masks = torch.from_numpy(np.stack([s.mask for s in samples])[:, None]).float()
    shuffle = torch.Generator().manual_seed(derive_seed(seed, "prior_training"))

    model.train()
    for epoch in range(epochs):
        order = torch.randperm(len(samples), generator=shuffle)
        total = 0.0
        for start in range(0, len(samples), batch_size):
            idx = order[start:start + batch_size]
            if len(idx) < 2:
                break
            logits, _ = model(images[idx].to(device))
            loss = F.binary_cross_entropy_with_logits(logits, masks[idx].to(device))
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            total += loss.item() * len(idx)
        logger.info(f"Toy prior epoch {epoch + 1}/{epochs}: bce={total / len(samples):.4f}")
    return ToyCNNSegmenter(model)


def build_prior(config: PriorConfig, train_samples: List[DatasetSample], spec: Optional[CorruptionSpec] = None,
                extra_samples: Iterable[DatasetSample] = (), device: str = "cpu") -> PriorSegmenter:
    """Construct the prior a run is configured with."""
    if PriorKind(config.kind) is PriorKind.TOY_CNN:
        return toy_cnn_segmenter_train(train_samples, config.epochs, config.seed, config.lr, device=device)
    prior = corrupted_oracle_segmenter(train_samples, spec, config.seed)
    prior.register_samples(extra_samples)
    return prior.to(device)

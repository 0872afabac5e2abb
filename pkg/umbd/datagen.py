"""
Synthetic camouflage corpus.

Images are a band-limited noise texture with one to a few smooth blobs
painted on top in the same texture family under a small colour and scale
offset; the offset grows with `strength`, so low strength means hard
camouflage. Generation is a pure function of the manifest: sample i of a
split always comes from SeedSequence([seed, split_code, i]).

On disk:

    root/manifest.json
    root/{train,test}/images/<id>.png   8-bit RGB
    root/{train,test}/masks/<id>.png    8-bit grayscale, 0 or 255
"""

import hashlib
import json
import logging
from pathlib import Path
from typing import Iterator, List, Optional, Union

import numpy as np
from PIL import Image, UnidentifiedImageError
from scipy import ndimage

from .exceptions import ConfigurationError, DatasetError
from .models import DatasetManifest, DatasetSample
from .seeding import derive_rng

logger = logging.getLogger(__name__)

SPLITS = ("train", "test")
MANIFEST_NAME = "manifest.json"
MIN_AREA = 0.02
MAX_AREA = 0.6
MAX_ATTEMPTS = 100


# Generation

def band_limited_noise(rng: np.random.Generator, size: int, scales) -> np.ndarray:
    """Sum of gaussian-filtered white noise at each scale, normalised to unit std."""
    field = np.zeros((size, size))
    for sigma in scales:
        field += ndimage.gaussian_filter(rng.standard_normal((size, size)), sigma, mode="wrap")
    std = field.std()
    return field / std if std > 0 else field


def texture(rng: np.random.Generator, size: int, base_color: np.ndarray, scales, amplitude: float) -> np.ndarray:
    """3xHxW texture: a shared luminance pattern plus a weaker per-channel one around base_color."""
    shared = band_limited_noise(rng, size, scales)
    channels = []
    for c in range(3):
        own = band_limited_noise(rng, size, scales)
        channels.append(base_color[c] + amplitude * (0.8 * shared + 0.2 * own))
    return np.stack(channels)


def blob_alpha(rng: np.random.Generator, size: int) -> np.ndarray:
    """Anti-aliased coverage of one smooth star-shaped blob."""
    cy, cx = rng.uniform(0.25, 0.75, size=2) * size
    radius = rng.uniform(0.1, 0.25) * size
    harmonics = [(k, rng.uniform(0.0, 0.15), rng.uniform(0, 2 * np.pi)) for k in (2, 3, 4)]

    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    rho = np.hypot(yy - cy, xx - cx)
    theta = np.arctan2(yy - cy, xx - cx)
    boundary = radius * (1 + sum(a * np.cos(k * theta + phase) for k, a, phase in harmonics))
    return np.clip(boundary - rho + 0.5, 0.0, 1.0)


def foreground_alpha(rng: np.random.Generator, size: int, max_blobs: int) -> np.ndarray:
    """Union of blobs whose hard mask covers between 2% and 60% of the image."""
    for _ in range(MAX_ATTEMPTS):
        count = int(rng.integers(1, max_blobs + 1))
        alpha = np.max([blob_alpha(rng, size) for _ in range(count)], axis=0)
        area = float((alpha > 0.5).mean())
        if MIN_AREA <= area <= MAX_AREA:
            return alpha
    logger.warning(f"Blob rejection did not converge after {MAX_ATTEMPTS} tries; using a centred disc")
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    return np.clip(0.2 * size - np.hypot(yy - size / 2, xx - size / 2) + 0.5, 0.0, 1.0)


def generate_camo_sample(
    seed: Union[int, np.random.Generator],
    size: int = 64,
    strength: float = 0.4,
    manifest: Optional[DatasetManifest] = None,
    sample_id: str = "sample",
) -> DatasetSample:
    """
    Generate one camouflaged image and its mask.

    Args:
        seed: Integer seed or a numpy generator
        size: Image side in pixels
        strength: Foreground/background offset; 0 means identical statistics
        manifest: Texture-family parameters (defaults when omitted)
        sample_id: Identifier stored in the sample

    Returns:
        DatasetSample: float32 image 3xHxW in [0, 1] and uint8 mask HxW in {0, 1}
    """
    params = manifest or DatasetManifest()
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)

    base = rng.uniform(0.35, 0.65, size=3)
    direction = -1.0 if base.mean() > 0.5 else 1.0
    fg_color = base + direction * params.intensity_offset * strength
    fg_scales = [s * (1 + params.scale_offset * strength) for s in params.texture_scales]

    background = texture(rng, size, base, params.texture_scales, params.texture_amplitude)
    foreground = texture(rng, size, fg_color, fg_scales, params.texture_amplitude)
    alpha = foreground_alpha(rng, size, params.max_blobs)

    image = np.clip(alpha * foreground + (1 - alpha) * background, 0.0, 1.0).astype(np.float32)
    mask = (alpha > 0.5).astype(np.uint8)
    return DatasetSample(image=image, mask=mask, id=sample_id)


def split_code(split: str) -> str:
    if split not in SPLITS:
        raise ConfigurationError(f"Unknown split '{split}', expected one of {SPLITS}")
    return split


def sample_id(split: str, index: int) -> str:
    return f"{split}_{index:05d}"


def iter_samples(manifest: DatasetManifest, split: str) -> Iterator[DatasetSample]:
    """Deterministically regenerate a split without touching disk."""
    split = split_code(split)
    for index in range(manifest.split_count(split)):
        rng = derive_rng(manifest.seed, split, index)
        yield generate_camo_sample(rng, manifest.image_size, manifest.strength, manifest, sample_id(split, index))


# Disk I/O

def quantize_image(image: np.ndarray) -> np.ndarray:
    """3xHxW floats in [0, 1] -> HxWx3 uint8."""
    pixels = np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255), 0, 255).astype(np.uint8)
    return np.ascontiguousarray(pixels.transpose(1, 2, 0))


def image_digest(image: np.ndarray) -> str:
    """sha1 of the 8-bit quantised image; identical for an image and its PNG round trip."""
    return hashlib.sha1(quantize_image(image).tobytes()).hexdigest()


def write_manifest(manifest: DatasetManifest, root: Union[str, Path]) -> Path:
    path = Path(root) / MANIFEST_NAME
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest.to_dict(), sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return path


def load_manifest(root: Union[str, Path]) -> DatasetManifest:
    """
    Read root/manifest.json.

    Raises:
        DatasetError: If the manifest is missing or malformed
    """
    path = Path(root) / MANIFEST_NAME
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as e:
        logger.error(f"Dataset manifest not found: {path}")
        raise DatasetError(f"Dataset manifest not found: {path}") from e
    except json.JSONDecodeError as e:
        logger.error(f"Dataset manifest is not valid JSON: {path}")
        raise DatasetError(f"Corrupt dataset manifest: {path}") from e
    try:
        return DatasetManifest.from_dict(data)
    except ConfigurationError as e:
        raise DatasetError(f"Invalid dataset manifest {path}: {e}") from e


def write_dataset(manifest: DatasetManifest, root: Union[str, Path]) -> Path:
    """
    Generate every split and write PNGs plus the manifest.

    Returns:
        Path: The dataset root
    """
    root = Path(root)
    for split in SPLITS:
        image_dir = root / split / "images"
        mask_dir = root / split / "masks"
        image_dir.mkdir(parents=True, exist_ok=True)
        mask_dir.mkdir(parents=True, exist_ok=True)
        for sample in iter_samples(manifest, split):
            Image.fromarray(quantize_image(sample.image)).save(image_dir / f"{sample.id}.png")
            Image.fromarray(sample.mask * 255).save(mask_dir / f"{sample.id}.png")
        logger.info(f"Wrote {manifest.split_count(split)} {split} samples to {root / split}")
    write_manifest(manifest, root)
    return root


def read_image(path: Union[str, Path]) -> np.ndarray:
    """8-bit RGB PNG -> float32 3xHxW in [0, 1]."""
    try:
        with Image.open(path) as img:
            array = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
    except (OSError, UnidentifiedImageError) as e:
        logger.error(f"Cannot read image {path}: {e}")
        raise DatasetError(f"Cannot read image {path}") from e
    return array.transpose(2, 0, 1).copy()


def read_mask(path: Union[str, Path], binarize: bool = True) -> np.ndarray:
    """8-bit grayscale PNG -> HxW, binarised at > 127 or scaled to [0, 1]."""
    try:
        with Image.open(path) as img:
            array = np.asarray(img.convert("L"))
    except (OSError, UnidentifiedImageError) as e:
        logger.error(f"Cannot read mask {path}: {e}")
        raise DatasetError(f"Cannot read mask {path}") from e
    if binarize:
        return (array > 127).astype(np.uint8)
    return array.astype(np.float32) / 255.0


def write_mask(mask: np.ndarray, path: Union[str, Path]) -> Path:
    """Soft or hard HxW mask in [0, 1] -> 8-bit grayscale PNG."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pixels = np.clip(np.rint(np.asarray(mask, dtype=np.float64) * 255), 0, 255).astype(np.uint8)
    Image.fromarray(pixels).save(path)
    return path


def load_dataset(root: Union[str, Path], split: str = "test") -> List[DatasetSample]:
    """
    Load one split written by write_dataset.

    Raises:
        DatasetError: If files are missing, unreadable or the counts disagree with the manifest
    """
    root = Path(root)
    split = split_code(split)
    manifest = load_manifest(root)
    image_dir = root / split / "images"
    mask_dir = root / split / "masks"
    if not image_dir.is_dir():
        logger.error(f"Missing image directory: {image_dir}")
        raise DatasetError(f"Missing image directory: {image_dir}")

    samples = []
    for image_path in sorted(image_dir.glob("*.png")):
        mask_path = mask_dir / image_path.name
        if not mask_path.is_file():
            logger.error(f"Mask missing for {image_path.name}")
            raise DatasetError(f"Corrupt dataset: no mask for {image_path.name} in {mask_dir}")
        samples.append(DatasetSample(image=read_image(image_path), mask=read_mask(mask_path), id=image_path.stem))

    expected = manifest.split_count(split)
    if len(samples) != expected:
        raise DatasetError(f"{split} split has {len(samples)} samples, manifest says {expected}")
    logger.debug(f"Loaded {len(samples)} {split} samples from {root}")
    return samples

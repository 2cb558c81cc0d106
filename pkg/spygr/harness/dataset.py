"""
Synthetic long-range segmentation task.

Each image is split into four quadrant regions. A region is drawn as grey
stripes in one of four orientations (a random permutation per image) and
gets a class uniformly at random. The class is only visible in the region's
key patch: a small square with the same stripe orientation, colored with the
class palette entry, placed in the diagonally opposite quadrant. No local
window around a region pixel carries its class, so a purely local model is
capped at chance there.
"""

from dataclasses import dataclass, field
import logging
import os
from typing import List, Optional, Sequence, Tuple

import numpy as np

from ..core.errors import ConfigError
from ..core.serialization import load_tensor, save_tensor
from ..core.tensor import DType, Tensor
from ..utils.json_utils import load_json_file, save_json_file

logger = logging.getLogger(__name__)

# RGB palette for key patches, one entry per class
CLASS_PALETTE = np.array([
    [0.90, 0.15, 0.15],
    [0.15, 0.80, 0.20],
    [0.20, 0.30, 0.95],
    [0.95, 0.85, 0.10],
    [0.85, 0.20, 0.85],
    [0.10, 0.85, 0.85],
    [0.95, 0.55, 0.10],
    [0.60, 0.40, 0.20],
], dtype=np.float32)

STRIPE_PERIOD = 4
NUM_PATTERNS = 4
MIN_EXTENT = 32

# quadrant index -> diagonally opposite quadrant (0 TL, 1 TR, 2 BL, 3 BR)
OPPOSITE = (3, 2, 1, 0)


@dataclass
class SyntheticSample:
    """
    One image/label pair.

    Attributes:
        image: [3, H, W] float32 values in [0, 1]
        label: [H, W] int64 class indices
        keyed_mask: [H, W] True on region pixels whose class is only known from a distant key
        seed: generator seed that reproduces this sample alone
        region_classes: class of each quadrant (TL, TR, BL, BR)
    """
    image: np.ndarray
    label: np.ndarray
    keyed_mask: np.ndarray
    seed: int
    region_classes: Tuple[int, ...] = field(default_factory=tuple)


def key_patch_size(height: int, width: int) -> int:
    return max(4, min(height, width) // 8)


def _stripes(pattern: int, rows: np.ndarray, cols: np.ndarray, phase: int) -> np.ndarray:
    half = STRIPE_PERIOD // 2
    if pattern == 0:
        coord = rows
    elif pattern == 1:
        coord = cols
    elif pattern == 2:
        coord = rows + cols
    else:
        coord = rows - cols
    return (((coord + phase) // half) % 2).astype(np.float32)


def _quadrant_box(q: int, height: int, width: int) -> Tuple[slice, slice]:
    qh, qw = height // 2, width // 2
    rows = slice(0, qh) if q in (0, 1) else slice(qh, height)
    cols = slice(0, qw) if q in (0, 2) else slice(qw, width)
    return rows, cols


def _key_box(target: int, height: int, width: int) -> Tuple[slice, slice]:
    """Key patch for `target`, in the far corner of the opposite quadrant."""
    k = key_patch_size(height, width)
    host = OPPOSITE[target]
    rows = slice(1, 1 + k) if host in (0, 1) else slice(height - 1 - k, height - 1)
    cols = slice(1, 1 + k) if host in (0, 2) else slice(width - 1 - k, width - 1)
    return rows, cols


def generate_sample(
    height: int,
    width: int,
    seed: int,
    num_classes: int = 5,
    with_keys: bool = True,
    noise: float = 0.05,
) -> SyntheticSample:
    """Render one sample deterministically from `seed`."""
    rng = np.random.default_rng(seed)
    patterns = rng.permutation(NUM_PATTERNS)
    classes = rng.integers(0, num_classes, size=4)
    phases = rng.integers(0, STRIPE_PERIOD, size=4)

    rr, cc = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    image = np.zeros((3, height, width), dtype=np.float32)
    label = np.zeros((height, width), dtype=np.int64)
    keyed = np.ones((height, width), dtype=bool)

    for q in range(4):
        rows, cols = _quadrant_box(q, height, width)
        stripes = _stripes(int(patterns[q]), rr[rows, cols], cc[rows, cols], int(phases[q]))
        image[:, rows, cols] = 0.35 + 0.3 * stripes
        label[rows, cols] = classes[q]

    if with_keys:
        for q in range(4):
            rows, cols = _key_box(q, height, width)
            stripes = _stripes(int(patterns[q]), rr[rows, cols], cc[rows, cols], int(phases[q]))
            color = CLASS_PALETTE[classes[q]][:, None, None]
            image[:, rows, cols] = color * (0.55 + 0.45 * stripes)
            keyed[rows, cols] = False

    image += rng.normal(0.0, noise, size=image.shape).astype(np.float32)
    np.clip(image, 0.0, 1.0, out=image)
    return SyntheticSample(image, label, keyed, seed, tuple(int(c) for c in classes))


def sample_seeds(n_samples: int, seed: int) -> List[int]:
    """Per-sample seeds derived from the dataset seed."""
    children = np.random.SeedSequence(seed).spawn(n_samples)
    return [int(child.generate_state(1)[0]) for child in children]


def generate_dataset(
    n_samples: int,
    height: int,
    width: int,
    seed: int,
    num_classes: int = 5,
    with_keys: bool = True,
) -> List[SyntheticSample]:
    """
    Deterministic synthetic dataset.

    Args:
        n_samples: number of images
        height, width: image extents (>= 32)
        seed: dataset seed; the same seed reproduces every sample bit for bit
        num_classes: K, at most the palette size
        with_keys: False renders the control variant without key patches

    Returns:
        List of SyntheticSample.
    """
    if height < MIN_EXTENT or width < MIN_EXTENT:
        raise ConfigError("extents", f"H and W must be >= {MIN_EXTENT}, got {height}x{width}")
    if not 2 <= num_classes <= len(CLASS_PALETTE):
        raise ConfigError("num_classes", f"must be in [2, {len(CLASS_PALETTE)}], got {num_classes}")
    if n_samples < 1:
        raise ConfigError("n_samples", f"must be >= 1, got {n_samples}")
    samples = [generate_sample(height, width, s, num_classes, with_keys) for s in sample_seeds(n_samples, seed)]
    logger.debug(f"Generated {n_samples} samples of {height}x{width} (seed={seed}, keys={with_keys})")
    return samples


def class_histogram(samples: Sequence[SyntheticSample], num_classes: int) -> np.ndarray:
    """Pixel frequency of each class over the dataset (sums to 1)."""
    counts = np.zeros(num_classes, dtype=np.int64)
    for s in samples:
        counts += np.bincount(s.label.ravel(), minlength=num_classes)[:num_classes]
    return counts / counts.sum()


def stack_images(samples: Sequence[SyntheticSample]) -> Tensor:
    return Tensor(np.stack([s.image for s in samples]), dtype=DType.F32)


def stack_labels(samples: Sequence[SyntheticSample]) -> np.ndarray:
    return np.stack([s.label for s in samples])


# =============================================================================
# Cache
# =============================================================================

def save_dataset(samples: Sequence[SyntheticSample], directory: str, meta: Optional[dict] = None) -> str:
    """
    Write `sample_XXXXX_image.spgt` ([1,3,H,W]), `sample_XXXXX_label.spgt`
    ([1,2,H,W]: class index, keyed mask) per sample plus `index.json`.
    """
    os.makedirs(directory, exist_ok=True)
    entries = []
    for i, s in enumerate(samples):
        stem = f"sample_{i:05d}"
        label = np.stack([s.label.astype(np.float32), s.keyed_mask.astype(np.float32)])[None]
        save_tensor(os.path.join(directory, f"{stem}_image.spgt"), Tensor(s.image[None], dtype=DType.F32))
        save_tensor(os.path.join(directory, f"{stem}_label.spgt"), Tensor(label, dtype=DType.F32))
        entries.append({"stem": stem, "seed": s.seed, "region_classes": list(s.region_classes)})
    index_path = os.path.join(directory, "index.json")
    error = save_json_file(index_path, {"meta": meta or {}, "samples": entries})
    if error:
        raise ConfigError("dataset_cache", error)
    logger.info(f"Cached {len(entries)} samples in {directory}")
    return index_path


def load_dataset(directory: str) -> List[SyntheticSample]:
    index, error = load_json_file(os.path.join(directory, "index.json"))
    if error:
        raise ConfigError("dataset_cache", error)
    samples = []
    for entry in index["samples"]:
        stem = os.path.join(directory, entry["stem"])
        image = load_tensor(f"{stem}_image.spgt").data[0]
        label = load_tensor(f"{stem}_label.spgt").data[0]
        samples.append(SyntheticSample(
            image=image.astype(np.float32),
            label=label[0].astype(np.int64),
            keyed_mask=label[1] > 0.5,
            seed=int(entry["seed"]),
            region_classes=tuple(entry["region_classes"]),
        ))
    return samples

"""Training-patch sampling with configurable center strategies.

The default strategy draws each patch center from tumor (label > 0) voxels
with probability 0.5 and from background otherwise, uniformly within each
group; uniform and per-class-equiprobable sampling are kept as comparison
strategies. Centers may land anywhere in the volume; patch extraction
zero-pads past the borders, which preserves the exact center statistics.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import SamplingError
from .volume import LabelVolume, MultiModalVolume, PatchSpec, extract_patch

STRATEGIES = ("fg_bg_balanced", "uniform", "equiprobable_classes")


@dataclass(frozen=True)
class SamplerConfig:
    patch_size: tuple = (64, 64, 64)
    foreground_probability: float = 0.5
    strategy: str = "fg_bg_balanced"
    seed: int = 0

    def __post_init__(self):
        size = tuple(int(s) for s in np.atleast_1d(self.patch_size))
        if len(size) == 1:
            size = size * 3
        if len(size) != 3 or any(s < 1 for s in size):
            raise ValueError(f"patch_size must be 3 positive integers, got {self.patch_size}")
        object.__setattr__(self, "patch_size", size)
        if not 0.0 <= self.foreground_probability <= 1.0:
            raise ValueError(f"foreground_probability {self.foreground_probability} not in [0,1]")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r} (choose from {STRATEGIES})")


@dataclass(frozen=True)
class PatchBatch:
    """Paired image/label patches plus the centers they were drawn at."""

    images: np.ndarray  # (batch, modalities, px, py, pz) float32
    labels: np.ndarray  # (batch, px, py, pz) uint8
    centers: np.ndarray  # (batch, 3) int

    def __len__(self):
        return self.images.shape[0]


def worker_seed(seed: int, worker_index: int) -> int:
    """Disjoint sub-stream seed for (seed, worker/epoch index)."""
    return int(np.random.SeedSequence((seed, worker_index)).generate_state(1)[0])


def sample_patch_centers(labels: LabelVolume, n: int, config: SamplerConfig) -> np.ndarray:
    """Draw n patch-center voxel coordinates; deterministic per config.seed."""
    rng = np.random.default_rng(config.seed)
    return sample_patch_centers_rng(labels, n, config, rng)


def sample_patch_centers_rng(labels: LabelVolume, n: int, config: SamplerConfig,
                             rng: np.random.Generator) -> np.ndarray:
    """Like sample_patch_centers but drawing from a caller-owned stream."""
    if n < 1:
        raise ValueError("n must be >= 1")
    flat_labels = labels.labels.ravel()
    if config.strategy == "uniform":
        flat = rng.integers(0, flat_labels.size, n)
    elif config.strategy == "fg_bg_balanced":
        fg = np.flatnonzero(flat_labels > 0)
        bg = np.flatnonzero(flat_labels == 0)
        p = config.foreground_probability
        if fg.size == 0 and p > 0.0:
            raise SamplingError("no foreground (label > 0) voxels to sample centers from")
        if bg.size == 0 and p < 1.0:
            raise SamplingError("no background (label 0) voxels to sample centers from")
        take_fg = rng.random(n) < p
        fg_pick = fg[rng.integers(0, fg.size, n)] if fg.size else np.zeros(n, np.int64)
        bg_pick = bg[rng.integers(0, bg.size, n)] if bg.size else np.zeros(n, np.int64)
        flat = np.where(take_fg, fg_pick, bg_pick)
    else:  # equiprobable_classes
        present = [int(c) for c in np.unique(flat_labels)]
        pools = {c: np.flatnonzero(flat_labels == c) for c in present}
        choice = rng.integers(0, len(present), n)
        flat = np.empty(n, dtype=np.int64)
        for i, c in enumerate(present):
            sel = choice == i
            k = int(sel.sum())
            if k:
                flat[sel] = pools[c][rng.integers(0, pools[c].size, k)]
    return np.stack(np.unravel_index(flat, labels.shape), axis=1)


def realized_training_distribution(labels_list, config: SamplerConfig, n_patches: int) -> dict:
    """Class fractions over every voxel of n_patches sampled label patches.

    Zero-padded out-of-volume voxels count as background: they are exactly
    what a training step sees.
    """
    if n_patches < 1:
        raise ValueError("n_patches must be >= 1")
    labels_list = list(labels_list)
    rng = np.random.default_rng(config.seed)
    num_classes = labels_list[0].num_classes
    which = rng.integers(0, len(labels_list), n_patches)
    counts = np.zeros(num_classes, dtype=np.int64)
    size = np.asarray(config.patch_size)
    for v, labels in enumerate(labels_list):
        n_here = int((which == v).sum())
        if n_here == 0:
            continue
        centers = sample_patch_centers_rng(labels, n_here, config, rng)
        for center in centers:
            origin = center - size // 2
            patch = extract_patch(labels, PatchSpec(tuple(origin), tuple(size)), "zero")
            counts += np.bincount(patch.labels.ravel(), minlength=num_classes)
    total = counts.sum()
    return {c: counts[c] / total for c in range(num_classes)}


def build_training_batch(vol: MultiModalVolume, labels: LabelVolume, centers,
                         patch_size) -> PatchBatch:
    """Extract centered, zero-padded image/label patch pairs at the given centers."""
    centers = np.atleast_2d(np.asarray(centers, dtype=int))
    if centers.size == 0:
        raise ValueError("centers must not be empty")
    if centers.shape[1] != 3:
        raise ValueError(f"centers must be (n, 3), got {centers.shape}")
    shape = np.asarray(vol.shape)
    if (centers < 0).any() or (centers >= shape).any():
        raise ValueError("centers must lie within the volume")
    if labels.shape != vol.shape:
        raise ValueError(f"volume {vol.shape} and labels {labels.shape} disagree")
    size = np.atleast_1d(np.asarray(patch_size, dtype=int))
    if size.size == 1:
        size = np.repeat(size, 3)
    images = np.empty((len(centers), vol.num_modalities, *size), dtype=np.float32)
    label_patches = np.empty((len(centers), *size), dtype=np.uint8)
    for i, center in enumerate(centers):
        spec = PatchSpec(tuple(center - size // 2), tuple(size))
        images[i] = extract_patch(vol, spec, "zero").data
        label_patches[i] = extract_patch(labels, spec, "zero").labels
    return PatchBatch(images=images, labels=label_patches, centers=centers)

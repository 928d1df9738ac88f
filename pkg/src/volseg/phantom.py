"""Synthetic multi-modal "brain + tumor" volumes with known ground truth.

Each phantom is an ellipsoidal brain inside a zero background, carrying a
nested tumor (edema shell over non-enhancing over enhancing over necrotic
core). All tumor boundaries are level sets of one warped radial field, so
the nesting holds by construction. Tissue intensities are chosen so no
single modality separates all tissue pairs; telling them apart requires
combining channels. Class imbalance is steep: background dominates and the
necrotic core is rarest.
"""

from __future__ import annotations

import json
import os

import numpy as np

from .errors import VolsegError
from .sampling import worker_seed
from .volume import LabelVolume, MultiModalVolume, save_volume, load_volume

MODALITIES = ("t1", "t1c", "t2", "flair")

# Rows: tissue; columns: modality means. Pairs like enhancing/non-enhancing
# coincide in single channels on purpose (see module docstring).
TISSUE_MEANS = np.array(
    [
        [0.00, 0.00, 0.00, 0.00],  # background (outside brain)
        [1.00, 1.00, 1.00, 1.00],  # healthy brain
        [0.45, 0.50, 1.35, 1.30],  # necrotic core        -> label 1
        [1.05, 0.95, 1.20, 1.80],  # edema                -> label 2
        [0.70, 0.60, 1.50, 1.25],  # non-enhancing core   -> label 3
        [0.75, 1.85, 1.05, 1.25],  # enhancing core       -> label 4
    ]
)
_TISSUE_OF_LABEL = {1: 2, 2: 3, 3: 4, 4: 5}
# Nested boundary radii as fractions of the gross-tumor radius, inside out.
_CORE_FRACTIONS = (0.32, 0.55, 0.78)
_LABELS_INSIDE_OUT = (1, 4, 3, 2)  # necrotic, enhancing, non-enhancing, edema


def min_tissue_gap() -> float:
    """Smallest Euclidean distance between two tissue mean vectors."""
    gaps = [
        np.linalg.norm(TISSUE_MEANS[i] - TISSUE_MEANS[j])
        for i in range(len(TISSUE_MEANS))
        for j in range(i + 1, len(TISSUE_MEANS))
    ]
    return float(min(gaps))


def _as_size(size) -> tuple:
    arr = np.atleast_1d(np.asarray(size, dtype=int))
    if arr.size == 1:
        arr = np.repeat(arr, 3)
    if arr.size != 3:
        raise ValueError(f"size must be a scalar or 3 integers, got {size!r}")
    return tuple(int(s) for s in arr)


def _warp_field(coords, amplitude, freqs, phases):
    """Multiplicative low-frequency sinusoidal radius modulation."""
    warp = np.ones_like(coords[0])
    for axis in range(3):
        warp += amplitude * np.sin(freqs[axis] * coords[axis] + phases[axis])
    return warp


def generate_phantom(seed: int, size, tumor_fraction_target: float = 0.05,
                     noise_sigma: float = 0.1):
    """Build one subject; deterministic per seed.

    Returns (MultiModalVolume, LabelVolume). The realized tumor fraction is
    calibrated by rank statistics, so it matches the target up to voxel
    quantization. Raises if the tumor cannot fit inside the brain.
    """
    size = _as_size(size)
    if any(s < 32 for s in size):
        raise ValueError(f"size must be >= 32 per axis, got {size}")
    if not 0.0 < tumor_fraction_target <= 0.2:
        raise ValueError(f"tumor_fraction_target {tumor_fraction_target} not in (0, 0.2]")
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be >= 0")
    rng = np.random.default_rng(seed)
    n_vox = int(np.prod(size))
    grids = np.meshgrid(*(np.arange(s, dtype=np.float64) for s in size), indexing="ij")

    # brain: warped ellipsoid around the volume center
    brain_center = np.array([0.5 * (s - 1) for s in size]) + rng.uniform(-1.5, 1.5, 3)
    brain_axes = np.array([0.42 * s for s in size]) * rng.uniform(0.95, 1.05, 3)
    brain_coords = [(g - c) / a for g, c, a in zip(grids, brain_center, brain_axes)]
    brain_u = np.sqrt(sum(c**2 for c in brain_coords))
    brain_u *= _warp_field(grids, 0.04, 2 * np.pi * rng.uniform(0.5, 1.5, 3) / np.mean(size),
                           rng.uniform(0, 2 * np.pi, 3))
    brain = brain_u <= 1.0

    # gross tumor: one warped radial field, thresholded at nested radii
    r0 = (3.0 * tumor_fraction_target * n_vox / (4.0 * np.pi)) ** (1.0 / 3.0)
    aniso = rng.uniform(0.85, 1.18, 3)
    aniso /= np.prod(aniso) ** (1.0 / 3.0)
    tumor_radii = r0 * aniso
    max_offset = 0.80 * brain_axes - 1.25 * tumor_radii.max()
    if (max_offset <= 0).any():
        raise VolsegError(
            f"tumor_fraction_target {tumor_fraction_target} unachievable: equivalent "
            f"radius {r0:.1f} does not fit inside brain axes {np.round(brain_axes, 1)}"
        )
    tumor_center = brain_center + rng.uniform(-1, 1, 3) * np.minimum(max_offset, 0.35 * brain_axes)
    tumor_coords = [(g - c) / r for g, c, r in zip(grids, tumor_center, tumor_radii)]
    tumor_u = np.sqrt(sum(c**2 for c in tumor_coords))
    tumor_u *= _warp_field(grids, 0.05, 2 * np.pi * rng.uniform(1.0, 2.0, 3) / np.mean(size),
                           rng.uniform(0, 2 * np.pi, 3))

    k = max(int(round(tumor_fraction_target * n_vox)), 8)
    threshold = np.partition(tumor_u.ravel(), k - 1)[k - 1]
    tumor = tumor_u <= threshold
    if (tumor & ~brain).any():
        raise VolsegError("tumor escapes the brain; lower tumor_fraction_target")

    labels = np.zeros(size, dtype=np.uint8)
    cuts = [f * threshold for f in _CORE_FRACTIONS] + [threshold]
    lower = -np.inf
    for label, cut in zip(_LABELS_INSIDE_OUT, cuts):
        labels[(tumor_u > lower) & (tumor_u <= cut)] = label
        lower = cut
    present = set(np.unique(labels))
    missing = {1, 2, 3, 4} - present
    if missing:
        raise VolsegError(
            f"tumor too small to realize classes {sorted(missing)}; "
            "raise tumor_fraction_target or size"
        )

    tissue = np.where(brain, 1, 0)
    for label, row in _TISSUE_OF_LABEL.items():
        tissue[labels == label] = row
    data = np.zeros((len(MODALITIES),) + tuple(size), dtype=np.float32)
    for m in range(len(MODALITIES)):
        channel = TISSUE_MEANS[tissue, m]
        if noise_sigma > 0:
            channel = channel + noise_sigma * rng.standard_normal(size)
        data[m] = np.where(brain, channel, 0.0).astype(np.float32)
    vol = MultiModalVolume(data, MODALITIES)
    return vol, LabelVolume(labels, 5)


def make_phantom_dataset(n_subjects: int, seed: int, size, out_dir,
                         tumor_fraction_target: float = 0.05,
                         noise_sigma: float = 0.1) -> str:
    """Generate and persist n subjects; returns the manifest path."""
    if n_subjects < 2:
        raise ValueError("n_subjects must be >= 2")
    os.makedirs(out_dir, exist_ok=True)
    subjects = []
    for i in range(n_subjects):
        vol, labels = generate_phantom(worker_seed(seed, i), size,
                                       tumor_fraction_target, noise_sigma)
        sid = f"subject_{i:03d}"
        image_name = f"{sid}_image.vseg"
        labels_name = f"{sid}_labels.vseg"
        save_volume(os.path.join(out_dir, image_name), vol)
        save_volume(os.path.join(out_dir, labels_name), labels)
        subjects.append({"id": sid, "image": image_name, "labels": labels_name})
    manifest = {
        "subjects": subjects,
        "seed": seed,
        "size": list(_as_size(size)),
        "tumor_fraction_target": tumor_fraction_target,
        "noise_sigma": noise_sigma,
    }
    manifest_path = os.path.join(out_dir, "manifest.json")
    with open(manifest_path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2)
    return manifest_path


def read_manifest(manifest_path) -> list:
    """[(subject_id, image_path, labels_path)] with paths resolved."""
    with open(manifest_path, "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    base = os.path.dirname(os.path.abspath(manifest_path))
    return [
        (s["id"], os.path.join(base, s["image"]), os.path.join(base, s["labels"]))
        for s in manifest["subjects"]
    ]


def load_subjects(manifest_path) -> list:
    """[(subject_id, MultiModalVolume, LabelVolume)] for every manifest entry."""
    out = []
    for sid, image_path, labels_path in read_manifest(manifest_path):
        out.append((sid, load_volume(image_path), load_volume(labels_path)))
    return out

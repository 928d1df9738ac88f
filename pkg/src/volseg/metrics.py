"""Overlap metrics over tumor regions and individual classes.

Regions group the tumor labels the way clinical evaluation does: "whole"
is every tumor structure, "core" drops edema, "enhancing" is the enhancing
core alone. Dice uses the convention dice(empty, empty) = 1; precision and
recall are reported as None (undefined) when their denominator is empty
rather than silently zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .volume import LabelVolume


@dataclass(frozen=True)
class RegionSpec:
    name: str
    labels: frozenset


WHOLE = RegionSpec("whole", frozenset({1, 2, 3, 4}))
CORE = RegionSpec("core", frozenset({1, 3, 4}))  # all tumor structures except edema
ENHANCING = RegionSpec("enhancing", frozenset({4}))
REGIONS = (WHOLE, CORE, ENHANCING)

CLASS_NAMES = {0: "else", 1: "necrotic", 2: "edema", 3: "non_enhancing", 4: "enhancing"}


@dataclass(frozen=True)
class OverlapMetrics:
    """Dice / precision / recall; None marks an undefined (empty-denominator) value."""

    dice: float | None
    precision: float | None
    recall: float | None


@dataclass(frozen=True)
class RegionReport:
    """Per-region and per-class overlap metrics plus overall voxel accuracy."""

    regions: dict
    per_class: dict
    accuracy: float


def binarize_region(labels: LabelVolume, region: RegionSpec) -> np.ndarray:
    """Boolean mask: voxel is true iff its label belongs to the region."""
    return np.isin(labels.labels, sorted(region.labels))


def overlap_metrics(pred_mask: np.ndarray, true_mask: np.ndarray) -> OverlapMetrics:
    pred_mask = np.asarray(pred_mask, dtype=bool)
    true_mask = np.asarray(true_mask, dtype=bool)
    if pred_mask.shape != true_mask.shape:
        raise ValueError(f"mask shapes differ: {pred_mask.shape} vs {true_mask.shape}")
    n_pred = int(pred_mask.sum())
    n_true = int(true_mask.sum())
    n_both = int((pred_mask & true_mask).sum())
    if n_pred + n_true == 0:
        dice = 1.0
    else:
        dice = 2.0 * n_both / (n_pred + n_true)
    precision = n_both / n_pred if n_pred else None
    recall = n_both / n_true if n_true else None
    return OverlapMetrics(dice=dice, precision=precision, recall=recall)


def region_report(pred: LabelVolume, truth: LabelVolume) -> RegionReport:
    """Full evaluation of a predicted segmentation against ground truth."""
    if pred.shape != truth.shape:
        raise ValueError(f"prediction {pred.shape} and truth {truth.shape} disagree")
    regions = {
        region.name: overlap_metrics(
            binarize_region(pred, region), binarize_region(truth, region)
        )
        for region in REGIONS
    }
    num_classes = max(pred.num_classes, truth.num_classes)
    per_class = {
        c: overlap_metrics(pred.labels == c, truth.labels == c)
        for c in range(num_classes)
    }
    accuracy = float((pred.labels == truth.labels).mean())
    return RegionReport(regions=regions, per_class=per_class, accuracy=accuracy)

"""Patch-based training loop: splitting, optimizers, curves, checkpointing.

Each epoch draws patches_per_epoch fresh patch centers (balanced sampling by
default), runs dense per-voxel cross-entropy over whole patches, and updates
weights with Adam or SGD+momentum. The per-epoch RNG is derived from
(seed, epoch), and optimizer state rides along in checkpoints, so a resumed
run reproduces an uninterrupted one bit-exactly in single-worker mode.
"""

from __future__ import annotations

import math
import os
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import TrainingDiverged
from .netexec import (WeightSet, compute_loss, load_checkpoint, loss_and_grad,
                      save_checkpoint, update_running_stats)
from .sampling import SamplerConfig, sample_patch_centers_rng
from .volume import LabelVolume, MultiModalVolume, PatchSpec, extract_patch

OPTIMIZERS = ("adaptive_moments", "sgd_momentum")
_VAL_STREAM_TAG = 0x56414C  # distinct sub-stream for validation patch draws


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 10
    patches_per_epoch: int = 40
    epochs: int = 10
    learning_rate: float = 1e-3
    optimizer: str = "adaptive_moments"
    class_weights: tuple | None = None
    seed: int = 0
    split_ratio: float = 0.6
    val_patches: int | None = None  # defaults to patches_per_epoch
    sampler: SamplerConfig = field(default_factory=SamplerConfig)

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.patches_per_epoch < 1:
            raise ValueError("patches_per_epoch must be >= 1")
        if not 0.0 < self.split_ratio < 1.0:
            raise ValueError("split_ratio must lie in (0, 1)")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"unknown optimizer {self.optimizer!r} (choose from {OPTIMIZERS})")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.class_weights is not None:
            object.__setattr__(self, "class_weights", tuple(float(w) for w in self.class_weights))

    @property
    def voxels_per_epoch(self) -> int:
        """Voxel throughput per epoch: patches_per_epoch * patch volume."""
        return self.patches_per_epoch * int(np.prod(self.sampler.patch_size))


@dataclass(frozen=True)
class TrainingCurves:
    """Per-epoch losses and wall-clock seconds (seconds are not reproducible)."""

    train_loss: tuple
    val_loss: tuple
    seconds: tuple

    def __post_init__(self):
        if not (len(self.train_loss) == len(self.val_loss) == len(self.seconds)):
            raise ValueError("curve lengths disagree")
        if not all(math.isfinite(v) for v in self.train_loss + self.val_loss):
            raise ValueError("curves contain non-finite losses")


def curves_to_csv(curves: TrainingCurves, start_epoch: int = 0) -> str:
    """Seed-reproducible curves document (timing is kept out on purpose)."""
    lines = ["epoch,train_loss,val_loss"]
    for i, (tr, va) in enumerate(zip(curves.train_loss, curves.val_loss)):
        lines.append(f"{start_epoch + i},{tr!r},{va!r}")
    return "\n".join(lines) + "\n"


def timing_to_csv(curves: TrainingCurves, start_epoch: int = 0) -> str:
    lines = ["epoch,seconds"]
    for i, sec in enumerate(curves.seconds):
        lines.append(f"{start_epoch + i},{sec:.3f}")
    return "\n".join(lines) + "\n"


def split_dataset(subject_ids, ratio: float, seed: int):
    """Disjoint, exhaustive train/validation split; train gets round(ratio*N)."""
    ids = list(subject_ids)
    if len(ids) < 2:
        raise ValueError("need at least 2 subjects to split")
    if not 0.0 < ratio < 1.0:
        raise ValueError("ratio must lie in (0, 1)")
    n_train = int(math.floor(ratio * len(ids) + 0.5))
    perm = np.random.default_rng(seed).permutation(len(ids))
    train = [ids[i] for i in perm[:n_train]]
    val = [ids[i] for i in perm[n_train:]]
    return train, val


# -- optimizers ---------------------------------------------------------------

_ADAM_B1, _ADAM_B2, _ADAM_EPS = 0.9, 0.999, 1e-8
_SGD_MOMENTUM = 0.9


def _init_opt_state(config: TrainConfig, weights: WeightSet) -> dict:
    state = {"t": np.int64(0)}
    for key in weights.learnable_keys():
        if config.optimizer == "adaptive_moments":
            state[f"m.{key}"] = np.zeros_like(weights.tensors[key])
            state[f"v.{key}"] = np.zeros_like(weights.tensors[key])
        else:
            state[f"mom.{key}"] = np.zeros_like(weights.tensors[key])
    return state


def _apply_update(config: TrainConfig, weights: WeightSet, grads: dict, state: dict):
    """One optimizer step; returns (new tensors dict, new state dict)."""
    lr = weights.dtype().type(config.learning_rate)
    tensors = dict(weights.tensors)
    new_state = dict(state)
    t = int(state["t"]) + 1
    new_state["t"] = np.int64(t)
    for key in weights.learnable_keys():
        g = grads[key]
        w = tensors[key]
        if config.optimizer == "adaptive_moments":
            m = _ADAM_B1 * state[f"m.{key}"] + (1 - _ADAM_B1) * g
            v = _ADAM_B2 * state[f"v.{key}"] + (1 - _ADAM_B2) * g * g
            m_hat = m / (1 - _ADAM_B1**t)
            v_hat = v / (1 - _ADAM_B2**t)
            tensors[key] = (w - lr * m_hat / (np.sqrt(v_hat) + _ADAM_EPS)).astype(w.dtype)
            new_state[f"m.{key}"] = m.astype(w.dtype)
            new_state[f"v.{key}"] = v.astype(w.dtype)
        else:
            buf = _SGD_MOMENTUM * state[f"mom.{key}"] + g
            tensors[key] = (w - lr * buf).astype(w.dtype)
            new_state[f"mom.{key}"] = buf.astype(w.dtype)
    return tensors, new_state


# -- batching -----------------------------------------------------------------


def _as_pairs(subjects) -> list:
    """Accept (vol, labels) pairs or (id, vol, labels) triples."""
    pairs = []
    for item in subjects:
        if len(item) == 3:
            _, vol, labels = item
        else:
            vol, labels = item
        if not isinstance(vol, MultiModalVolume) or not isinstance(labels, LabelVolume):
            raise TypeError("subjects must pair a MultiModalVolume with a LabelVolume")
        pairs.append((vol, labels))
    return pairs


def _draw_epoch_centers(pairs, config: TrainConfig, rng, n: int):
    """(subject index, center) for n patches, grouped draws per subject."""
    which = rng.integers(0, len(pairs), n)
    centers = np.zeros((n, 3), dtype=np.int64)
    for s, (_, labels) in enumerate(pairs):
        sel = which == s
        k = int(sel.sum())
        if k:
            centers[sel] = sample_patch_centers_rng(labels, k, config.sampler, rng)
    return which, centers


def _extract_batch(pairs, which, centers, patch_size):
    size = np.asarray(patch_size)
    images = np.empty((len(which), pairs[0][0].num_modalities, *size), dtype=np.float32)
    labels = np.empty((len(which), *size), dtype=np.uint8)
    for i, (s, center) in enumerate(zip(which, centers)):
        vol, lab = pairs[s]
        spec = PatchSpec(tuple(center - size // 2), tuple(size))
        images[i] = extract_patch(vol, spec, "zero").data
        labels[i] = extract_patch(lab, spec, "zero").labels
    return images, labels


# -- training loop ------------------------------------------------------------


def evaluate_validation(graph, weights: WeightSet, subjects, config: TrainConfig) -> float:
    """Mean dense cross-entropy over sampled validation patches (inference BN)."""
    pairs = _as_pairs(subjects)
    weights = weights.to_inference()
    rng = np.random.default_rng(np.random.SeedSequence((config.seed, _VAL_STREAM_TAG)))
    n = config.val_patches if config.val_patches is not None else config.patches_per_epoch
    which, centers = _draw_epoch_centers(pairs, config, rng, n)
    losses = []
    for start in range(0, n, config.batch_size):
        sl = slice(start, min(start + config.batch_size, n))
        images, labels = _extract_batch(pairs, which[sl], centers[sl], config.sampler.patch_size)
        loss = compute_loss(graph, weights, images, labels, config.class_weights)
        losses.append((loss, labels.size))
    total = sum(n_vox for _, n_vox in losses)
    return float(sum(loss * n_vox for loss, n_vox in losses) / total)


def train(graph, weights: WeightSet, subjects, config: TrainConfig,
          val_subjects=None, checkpoint_dir=None, resume=None):
    """Run the training loop; returns (final WeightSet, TrainingCurves).

    val_subjects defaults to the training subjects (overfit monitoring).
    With checkpoint_dir set, one checkpoint per completed epoch is written.
    resume takes a checkpoint path and continues after its stored epoch;
    curves then cover only the resumed epochs.
    """
    pairs = _as_pairs(subjects)
    val_pairs = _as_pairs(val_subjects) if val_subjects is not None else pairs
    if not pairs:
        raise ValueError("subjects must not be empty")

    start_epoch = 0
    if resume is not None:
        weights, _, _, done_epochs, extra = load_checkpoint(resume, expected_graph=graph)
        opt_state = {k[len("opt."):]: v for k, v in extra.items() if k.startswith("opt.")}
        if not opt_state:
            raise ValueError("checkpoint carries no optimizer state; cannot resume")
        start_epoch = done_epochs
        weights = weights.to_train()
    else:
        opt_state = _init_opt_state(config, weights)

    steps_per_epoch = math.ceil(config.patches_per_epoch / config.batch_size)
    train_losses, val_losses, seconds = [], [], []
    for epoch in range(start_epoch, config.epochs):
        tic = time.perf_counter()
        rng = np.random.default_rng(np.random.SeedSequence((config.seed, epoch)))
        which, centers = _draw_epoch_centers(pairs, config, rng, config.patches_per_epoch)
        epoch_loss, epoch_vox = 0.0, 0
        for step in range(steps_per_epoch):
            sl = slice(step * config.batch_size,
                       min((step + 1) * config.batch_size, config.patches_per_epoch))
            images, labels = _extract_batch(pairs, which[sl], centers[sl],
                                            config.sampler.patch_size)
            try:
                loss, grads, batch_stats = loss_and_grad(
                    graph, weights, images, labels, config.class_weights,
                    return_batch_stats=True,
                )
            except FloatingPointError:
                raise TrainingDiverged(epoch) from None
            if not math.isfinite(loss):
                raise TrainingDiverged(epoch)
            tensors, opt_state = _apply_update(config, weights, grads, opt_state)
            weights = replace(weights, tensors=tensors)
            weights = update_running_stats(weights, batch_stats)
            epoch_loss += loss * labels.size
            epoch_vox += labels.size
        train_losses.append(epoch_loss / epoch_vox)
        val_losses.append(evaluate_validation(graph, weights, val_pairs, config))
        seconds.append(time.perf_counter() - tic)
        if checkpoint_dir is not None:
            os.makedirs(checkpoint_dir, exist_ok=True)
            path = os.path.join(checkpoint_dir, f"checkpoint_epoch{epoch + 1:04d}.ckpt")
            extra = {f"opt.{k}": v for k, v in opt_state.items()}
            save_checkpoint(path, weights, graph,
                            step=(epoch + 1) * steps_per_epoch, epoch=epoch + 1, extra=extra)
    curves = TrainingCurves(tuple(train_losses), tuple(val_losses), tuple(seconds))
    return weights, curves

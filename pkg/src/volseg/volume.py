"""Volumetric data types, normalization, patch extraction, and VSEG1 file IO.

Conventions: multi-modal images are float32 arrays indexed (modality, x, y, z);
label maps are uint8 arrays indexed (x, y, z) with values in {0..num_classes-1}.
Arrays are locked read-only on construction so volumes can be shared freely
across workers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateInputError, FormatError, PatchBoundsError

MAGIC = "VSEG1"
HEADER_SEP = b"\n\0"


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class MultiModalVolume:
    """A 4D image grid (modality, x, y, z) with named channels."""

    data: np.ndarray
    modality_names: tuple
    spacing_mm: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim != 4:
            raise ValueError(f"expected 4D (modality, x, y, z) data, got shape {data.shape}")
        if not np.isfinite(data).all():
            raise ValueError("volume contains NaN or Inf values")
        names = tuple(str(n) for n in self.modality_names)
        if len(names) != data.shape[0]:
            raise ValueError(
                f"{len(names)} modality names for {data.shape[0]} modalities"
            )
        spacing = tuple(float(s) for s in self.spacing_mm)
        if len(spacing) != 3 or any(s <= 0 for s in spacing):
            raise ValueError(f"spacing_mm must be 3 positive reals, got {spacing}")
        object.__setattr__(self, "data", _freeze(data))
        object.__setattr__(self, "modality_names", names)
        object.__setattr__(self, "spacing_mm", spacing)

    @property
    def shape(self) -> tuple:
        """Spatial extents (x, y, z)."""
        return self.data.shape[1:]

    @property
    def num_modalities(self) -> int:
        return self.data.shape[0]


@dataclass(frozen=True)
class LabelVolume:
    """A 3D integer grid of class labels."""

    labels: np.ndarray
    num_classes: int = 5

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 3:
            raise ValueError(f"expected 3D labels, got shape {labels.shape}")
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise ValueError(
                f"label values must lie in [0, {self.num_classes}), "
                f"found range [{labels.min()}, {labels.max()}]"
            )
        object.__setattr__(self, "labels", _freeze(labels.astype(np.uint8)))

    @property
    def shape(self) -> tuple:
        return self.labels.shape


@dataclass(frozen=True)
class PatchSpec:
    """A patch location: corner voxel plus per-axis size."""

    origin: tuple
    size: tuple

    def __post_init__(self):
        origin = tuple(int(v) for v in np.atleast_1d(self.origin))
        size = tuple(int(v) for v in np.atleast_1d(self.size))
        if len(size) == 1:
            size = size * 3
        if len(origin) != 3 or len(size) != 3:
            raise ValueError("origin and size must have 3 components")
        if any(s <= 0 for s in size):
            raise ValueError(f"patch size must be positive, got {size}")
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "size", size)


def normalize_modalities(vol: MultiModalVolume, mask_mode: str = "nonzero") -> MultiModalVolume:
    """Standardize each modality to zero mean, unit variance over masked voxels.

    mask_mode "nonzero" computes statistics over that modality's nonzero voxels
    and leaves zero voxels untouched (skull-stripped data keeps background at 0);
    "all" uses every voxel.
    """
    if mask_mode not in ("nonzero", "all"):
        raise ValueError(f"unknown mask_mode {mask_mode!r}")
    out = np.empty_like(vol.data)
    for m in range(vol.num_modalities):
        channel = vol.data[m]
        mask = channel != 0 if mask_mode == "nonzero" else np.ones(channel.shape, bool)
        values = channel[mask].astype(np.float64)
        if values.size < 2:
            raise DegenerateInputError(
                f"modality {vol.modality_names[m]!r}: fewer than 2 masked voxels"
            )
        mean = values.mean()
        var = values.var()
        if var == 0.0:
            raise DegenerateInputError(
                f"modality {vol.modality_names[m]!r} is constant under the mask"
            )
        scaled = (channel.astype(np.float64) - mean) / np.sqrt(var)
        if mask_mode == "nonzero":
            out[m] = np.where(mask, scaled, 0.0).astype(np.float32)
        else:
            out[m] = scaled.astype(np.float32)
    return MultiModalVolume(out, vol.modality_names, vol.spacing_mm)


def _crop_with_padding(data: np.ndarray, origin, size, pad_policy: str) -> np.ndarray:
    """Crop the trailing 3 axes of `data`, zero-filling out-of-bounds voxels."""
    spatial = data.shape[-3:]
    lo = np.asarray(origin, dtype=int)
    hi = lo + np.asarray(size, dtype=int)
    if pad_policy == "error":
        if (lo < 0).any() or (hi > spatial).any():
            raise PatchBoundsError(
                f"patch [{tuple(lo)}..{tuple(hi)}) exceeds volume extents {spatial}"
            )
    elif pad_policy != "zero":
        raise ValueError(f"unknown pad_policy {pad_policy!r}")
    out = np.zeros(data.shape[:-3] + tuple(size), dtype=data.dtype)
    src_lo = np.maximum(lo, 0)
    src_hi = np.minimum(hi, spatial)
    if (src_lo < src_hi).all():
        dst_lo = src_lo - lo
        dst_hi = dst_lo + (src_hi - src_lo)
        src = tuple(slice(a, b) for a, b in zip(src_lo, src_hi))
        dst = tuple(slice(a, b) for a, b in zip(dst_lo, dst_hi))
        out[(...,) + dst] = data[(...,) + src]
    return out


def extract_patch(vol, spec: PatchSpec, pad_policy: str = "error"):
    """Extract a patch from an image or label volume; returns the same kind."""
    if isinstance(vol, MultiModalVolume):
        patch = _crop_with_padding(vol.data, spec.origin, spec.size, pad_policy)
        return MultiModalVolume(patch, vol.modality_names, vol.spacing_mm)
    if isinstance(vol, LabelVolume):
        patch = _crop_with_padding(vol.labels, spec.origin, spec.size, pad_policy)
        return LabelVolume(patch, vol.num_classes)
    raise TypeError(f"expected MultiModalVolume or LabelVolume, got {type(vol).__name__}")


def class_histogram(labels: LabelVolume) -> dict:
    """Per-class voxel fractions; one entry per class, summing to 1."""
    counts = np.bincount(labels.labels.ravel(), minlength=labels.num_classes)
    total = labels.labels.size
    return {c: counts[c] / total for c in range(labels.num_classes)}


def _format_header(fields: dict) -> bytes:
    lines = [f"{key}={value}" for key, value in fields.items()]
    return ("\n".join(lines)).encode("utf-8") + HEADER_SEP


def _parse_header(blob: bytes) -> tuple:
    if HEADER_SEP not in blob:
        raise FormatError("missing header terminator")
    head, payload = blob.split(HEADER_SEP, 1)
    fields = {}
    for line in head.decode("utf-8").splitlines():
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"malformed header line {line!r}")
        key, value = line.split("=", 1)
        fields[key] = value
    if fields.get("magic") != MAGIC:
        raise FormatError(f"bad magic {fields.get('magic')!r}")
    return fields, payload


def _payload_bytes(spatial_arr: np.ndarray) -> bytes:
    # Declared payload order: slowest-to-fastest (modality,) z, y, x.
    return np.ascontiguousarray(spatial_arr.swapaxes(-1, -3)).tobytes()


def _payload_to_array(raw: bytes, dtype, shape) -> np.ndarray:
    flat = np.frombuffer(raw, dtype=dtype)
    swapped = shape[:-3] + (shape[-1], shape[-2], shape[-3])
    return np.ascontiguousarray(flat.reshape(swapped).swapaxes(-1, -3))


def save_volume(path, vol) -> None:
    """Write an image or label volume in VSEG1 format (bit-exact round trip)."""
    if isinstance(vol, MultiModalVolume):
        fields = {
            "magic": MAGIC,
            "kind": "image",
            "dims": " ".join(str(d) for d in vol.shape),
            "modality_names": ",".join(vol.modality_names),
            "spacing_mm": " ".join(repr(s) for s in vol.spacing_mm),
            "dtype": "float32",
            "byte_order": "little",
        }
        payload = _payload_bytes(vol.data.astype("<f4"))
    elif isinstance(vol, LabelVolume):
        fields = {
            "magic": MAGIC,
            "kind": "label",
            "dims": " ".join(str(d) for d in vol.shape),
            "num_classes": str(vol.num_classes),
            "dtype": "uint8",
            "byte_order": "little",
        }
        payload = _payload_bytes(vol.labels)
    else:
        raise TypeError(f"cannot save {type(vol).__name__}")
    with open(path, "wb") as fh:
        fh.write(_format_header(fields))
        fh.write(payload)


def load_volume(path):
    """Read a VSEG1 file back into a MultiModalVolume or LabelVolume."""
    with open(path, "rb") as fh:
        blob = fh.read()
    fields, payload = _parse_header(blob)
    try:
        kind = fields["kind"]
        dims = tuple(int(d) for d in fields["dims"].split())
        dtype = fields["dtype"]
    except KeyError as exc:
        raise FormatError(f"missing header field {exc}") from None
    if fields.get("byte_order", "little") != "little":
        raise FormatError(f"unsupported byte order {fields.get('byte_order')!r}")
    if len(dims) != 3:
        raise FormatError(f"dims must have 3 components, got {fields['dims']!r}")

    if kind == "image":
        if dtype != "float32":
            raise FormatError(f"image dtype must be float32, got {dtype!r}")
        names = tuple(fields.get("modality_names", "").split(","))
        spacing = tuple(float(s) for s in fields.get("spacing_mm", "1 1 1").split())
        shape = (len(names),) + dims
        expected = int(np.prod(shape)) * 4
        if len(payload) != expected:
            raise FormatError(
                f"payload holds {len(payload)} bytes, header declares {expected}"
            )
        data = _payload_to_array(payload, "<f4", shape)
        return MultiModalVolume(data, names, spacing)
    if kind == "label":
        if dtype != "uint8":
            raise FormatError(f"label dtype must be uint8, got {dtype!r}")
        num_classes = int(fields.get("num_classes", 5))
        expected = int(np.prod(dims))
        if len(payload) != expected:
            raise FormatError(
                f"payload holds {len(payload)} bytes, header declares {expected}"
            )
        labels = _payload_to_array(payload, np.uint8, dims)
        return LabelVolume(labels, num_classes)
    raise FormatError(f"unknown kind {kind!r}")

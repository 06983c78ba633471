"""Dense volumetric containers and the plumbing shared by every other module.

Spatial arrays are stored as numpy arrays indexed ``[x, y, z]`` (and
``[x, y, z, c]`` for multi-channel fields).  The canonical flat ordering is
x fastest, then y, then z, then channel, i.e. Fortran order over
``(W, H, D, C)``.  That ordering is what :func:`flatten` produces and what
the CVOL file payload holds.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence, Tuple, Union

import numpy as np

PROB_EPS = 1e-7

Dims = Tuple[int, int, int]


class VolumeError(ValueError):
    """Raised for malformed volumes, bad ranges and out-of-bounds windows."""


def _as_dims(dims: Sequence[int]) -> Dims:
    d = tuple(int(v) for v in dims)
    if len(d) != 3 or any(v <= 0 for v in d):
        raise VolumeError(f"dims must be three positive integers, got {dims!r}")
    return d  # type: ignore[return-value]


@dataclass(frozen=True)
class Volume:
    """A 3D scalar field with voxel spacing in millimetres."""

    data: np.ndarray
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 3:
            raise VolumeError(f"volume data must be 3D, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise VolumeError("volume contains non-finite values")
        arr = arr.copy()
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))

    @property
    def dims(self) -> Dims:
        return tuple(self.data.shape)  # type: ignore[return-value]

    @property
    def voxels(self) -> np.ndarray:
        return self.data.ravel(order="F")

    @classmethod
    def from_voxels(cls, voxels, dims, spacing=(1.0, 1.0, 1.0)) -> "Volume":
        dims = _as_dims(dims)
        v = np.asarray(voxels)
        if v.size != dims[0] * dims[1] * dims[2]:
            raise VolumeError(f"expected {np.prod(dims)} voxels, got {v.size}")
        return cls(v.reshape(dims, order="F"), spacing)


@dataclass(frozen=True)
class OneHotMask:
    """Binary multi-label target of shape ``(W, H, D, C)``; no background channel."""

    bits: np.ndarray
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        arr = np.asarray(self.bits)
        if arr.ndim != 4 or arr.shape[3] < 1:
            raise VolumeError(f"mask must be (W,H,D,C) with C >= 1, got {arr.shape}")
        if not np.all((arr == 0) | (arr == 1)):
            raise VolumeError("mask values must be 0 or 1")
        arr = arr.astype(np.uint8)
        arr.setflags(write=False)
        object.__setattr__(self, "bits", arr)
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))

    @property
    def dims(self) -> Dims:
        return tuple(self.bits.shape[:3])  # type: ignore[return-value]

    @property
    def channels(self) -> int:
        return int(self.bits.shape[3])

    def is_disjoint(self) -> bool:
        return bool(self.bits.sum(axis=3).max(initial=0) <= 1)


@dataclass(frozen=True)
class ProbField:
    """Sigmoid activations of shape ``(W, H, D, C)``, clamped to ``[eps, 1-eps]``."""

    values: np.ndarray
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        arr = np.asarray(self.values, dtype=np.float64)
        if arr.ndim != 4:
            raise VolumeError(f"probability field must be (W,H,D,C), got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise VolumeError("probability field contains non-finite values")
        arr = clamp_probs(arr)
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))

    @property
    def dims(self) -> Dims:
        return tuple(self.values.shape[:3])  # type: ignore[return-value]

    @property
    def channels(self) -> int:
        return int(self.values.shape[3])


@dataclass(frozen=True)
class SubVolumeSpec:
    origin: Tuple[int, int, int]
    size: Tuple[int, int, int]
    stride: Tuple[int, int, int] = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        origin = tuple(int(v) for v in self.origin)
        size = _as_dims(self.size)
        stride = size if self.stride is None else tuple(int(v) for v in self.stride)
        if len(origin) != 3 or any(v < 0 for v in origin):
            raise VolumeError(f"origin must be three nonnegative integers, got {self.origin!r}")
        if len(stride) != 3 or any(not 1 <= s <= w for s, w in zip(stride, size)):
            raise VolumeError(f"stride {stride} must lie in [1, size] per axis (size {size})")
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "size", size)
        object.__setattr__(self, "stride", stride)

    def slices(self) -> Tuple[slice, slice, slice]:
        return tuple(slice(o, o + s) for o, s in zip(self.origin, self.size))  # type: ignore[return-value]

    def fits(self, dims: Sequence[int]) -> bool:
        return all(o + s <= d for o, s, d in zip(self.origin, self.size, dims))


def clamp_probs(p: np.ndarray, eps: float = PROB_EPS) -> np.ndarray:
    return np.clip(np.asarray(p, dtype=np.float64), eps, 1.0 - eps)


def minmax_normalize(v: Volume, lo: float, hi: float) -> Volume:
    """Map ``[lo, hi]`` linearly onto ``[0, 1]`` and clip."""
    if hi == lo:
        raise VolumeError(f"degenerate intensity range lo == hi == {lo}")
    if hi < lo:
        raise VolumeError(f"hi ({hi}) must exceed lo ({lo})")
    out = (v.data.astype(np.float64) - lo) / (hi - lo)
    return Volume(np.clip(out, 0.0, 1.0), v.spacing)


def self_normalize(v: Volume) -> Volume:
    """Per-window min-max pass; a constant window maps to zeros."""
    lo, hi = float(v.data.min()), float(v.data.max())
    if hi == lo:
        return Volume(np.zeros(v.dims), v.spacing)
    return minmax_normalize(v, lo, hi)


def one_hot_encode(labels: Union[Volume, np.ndarray], num_classes: int) -> OneHotMask:
    """Label 0 is background; label ``c + 1`` sets channel ``c``."""
    spacing = labels.spacing if isinstance(labels, Volume) else (1.0, 1.0, 1.0)
    lab = np.asarray(labels.data if isinstance(labels, Volume) else labels)
    if num_classes < 1:
        raise VolumeError("num_classes must be >= 1")
    if lab.size and (lab.min() < 0 or lab.max() > num_classes):
        raise VolumeError(f"label values must lie in [0, {num_classes}]")
    if np.any(lab != np.round(lab)):
        raise VolumeError("labels must be integers")
    lab = lab.astype(np.int64)
    bits = (lab[..., None] == np.arange(1, num_classes + 1)).astype(np.uint8)
    return OneHotMask(bits, spacing)


def decode(mask: OneHotMask) -> np.ndarray:
    """Inverse of :func:`one_hot_encode` for disjoint masks."""
    if not mask.is_disjoint():
        raise VolumeError("cannot decode overlapping channels to a label map")
    labels = np.zeros(mask.dims, dtype=np.int64)
    for c in range(mask.channels):
        labels[mask.bits[..., c] == 1] = c + 1
    return labels


def flatten(field_: Union[OneHotMask, ProbField, np.ndarray]) -> np.ndarray:
    """Channel-major, x-fastest flattening of a ``(W, H, D, C)`` field."""
    if isinstance(field_, OneHotMask):
        arr = field_.bits
    elif isinstance(field_, ProbField):
        arr = field_.values
    else:
        arr = np.asarray(field_)
    return arr.ravel(order="F")


def unflatten(flat: np.ndarray, dims: Sequence[int], channels: int) -> np.ndarray:
    dims = _as_dims(dims)
    flat = np.asarray(flat)
    n = dims[0] * dims[1] * dims[2] * channels
    if flat.size != n:
        raise VolumeError(f"expected {n} elements, got {flat.size}")
    return flat.reshape((*dims, channels), order="F")


def extract_subvolume(v: Volume, spec: SubVolumeSpec) -> Volume:
    if not spec.fits(v.dims):
        raise VolumeError(f"window {spec.origin}+{spec.size} exceeds volume dims {v.dims}")
    return Volume(v.data[spec.slices()], v.spacing)


def extract_mask_window(m: OneHotMask, spec: SubVolumeSpec) -> OneHotMask:
    if not spec.fits(m.dims):
        raise VolumeError(f"window {spec.origin}+{spec.size} exceeds mask dims {m.dims}")
    return OneHotMask(m.bits[spec.slices()], m.spacing)


def insert_subvolume(v: Volume, spec: SubVolumeSpec, patch: Volume) -> Volume:
    """Return a copy of ``v`` with ``patch`` written at ``spec.origin``."""
    if not spec.fits(v.dims) or patch.dims != spec.size:
        raise VolumeError("patch does not match the window or the window is out of bounds")
    out = np.array(v.data, copy=True)
    out[spec.slices()] = patch.data
    return Volume(out, v.spacing)

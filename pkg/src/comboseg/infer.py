"""Sliding-window inference with max-fusion of overlapping windows.

A voxel is labelled foreground for a channel iff at least one window that
covers it produced an activation strictly above the threshold.  Keeping the
running per-voxel maximum is enough to decide that.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable, List, Union

import numpy as np

from .volume import OneHotMask, SubVolumeSpec, Volume, VolumeError, self_normalize


class IncompleteSweepError(RuntimeError):
    pass


def _triple(v) -> tuple:
    if np.isscalar(v):
        return (int(v),) * 3
    t = tuple(int(x) for x in v)
    if len(t) != 3:
        raise VolumeError(f"expected a scalar or three values, got {v!r}")
    return t


def axis_origins(dim: int, window: int, stride: int) -> List[int]:
    origins = list(range(0, dim - window + 1, stride))
    if origins[-1] != dim - window:
        origins.append(dim - window)
    return origins


def plan_windows(dims, window, stride) -> List[SubVolumeSpec]:
    """Windows covering every voxel; the last window on each axis is pulled
    back to end flush with the volume instead of padding."""
    dims, window, stride = _triple(dims), _triple(window), _triple(stride)
    for d, w, s in zip(dims, window, stride):
        if w > d:
            raise VolumeError(f"window {window} larger than volume {dims}")
        if not 1 <= s <= w:
            raise VolumeError(f"stride {stride} must lie in [1, window] per axis")
    per_axis = [axis_origins(d, w, s) for d, w, s in zip(dims, window, stride)]
    return [SubVolumeSpec(o, window, stride) for o in itertools.product(*per_axis)]


@dataclass
class FusionAccumulator:
    maxima: np.ndarray
    coverage: np.ndarray

    @classmethod
    def empty(cls, dims, channels: int) -> "FusionAccumulator":
        dims = _triple(dims)
        return cls(np.zeros((*dims, channels)), np.zeros(dims, dtype=np.int64))

    def copy(self) -> "FusionAccumulator":
        return FusionAccumulator(self.maxima.copy(), self.coverage.copy())


def fuse(acc: FusionAccumulator, spec: SubVolumeSpec, window_probs: np.ndarray) -> FusionAccumulator:
    """Fold one window's ``(w, h, d, C)`` activations into ``acc`` in place."""
    probs = np.asarray(window_probs, dtype=np.float64)
    if not spec.fits(acc.coverage.shape):
        raise VolumeError(f"window {spec.origin}+{spec.size} outside {acc.coverage.shape}")
    if probs.shape != (*spec.size, acc.maxima.shape[3]):
        raise VolumeError(f"window activations {probs.shape} do not match {spec.size} x {acc.maxima.shape[3]}")
    sl = spec.slices()
    np.maximum(acc.maxima[sl], probs, out=acc.maxima[sl])
    acc.coverage[sl] += 1
    return acc


def finalize_labels(acc: FusionAccumulator, threshold: float = 0.5) -> OneHotMask:
    if np.any(acc.coverage == 0):
        raise IncompleteSweepError(f"{int(np.sum(acc.coverage == 0))} voxels were never covered")
    return OneHotMask((acc.maxima > threshold).astype(np.uint8))


Predictor = Callable[[np.ndarray], np.ndarray]


def _as_predictor(model) -> Predictor:
    if hasattr(model, "predict"):
        return model.predict
    return model


def sweep(model: Union[Predictor, object], volume: Volume, window, stride,
          channels: int = None, normalize_windows: bool = False, batch: int = 8) -> FusionAccumulator:
    """Run ``model`` over every planned window and max-fuse the outputs.

    ``model`` is a :class:`~comboseg.net.Network` or any callable mapping a
    ``(B, w, h, d, 1)`` batch to ``(B, w, h, d, C)`` activations.
    """
    predict = _as_predictor(model)
    specs = plan_windows(volume.dims, window, stride)
    acc = None
    for start in range(0, len(specs), batch):
        chunk = specs[start:start + batch]
        xs = []
        for spec in chunk:
            win = volume.data[spec.slices()]
            if normalize_windows:
                win = self_normalize(Volume(win)).data
            xs.append(win[..., None])
        probs = predict(np.stack(xs))
        if acc is None:
            acc = FusionAccumulator.empty(volume.dims, channels or probs.shape[-1])
        for spec, pr in zip(chunk, probs):
            fuse(acc, spec, pr)
    return acc


def predict_volume(model, volume: Volume, window, stride, threshold: float = 0.5,
                   normalize_windows: bool = False) -> OneHotMask:
    acc = sweep(model, volume, window, stride, normalize_windows=normalize_windows)
    mask = finalize_labels(acc, threshold)
    return OneHotMask(mask.bits, volume.spacing)

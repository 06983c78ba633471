"""Synthetic multi-organ phantoms and the organ/background sub-volume sampler.

Organs are solid ellipsoids of fixed brightness on a dark noisy background.
Random draws come from numpy's PCG64 with two independent streams per
phantom, one for geometry and presence and one for intensity noise.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import List, Optional, Tuple, Union

import numpy as np
from scipy.ndimage import gaussian_filter

from .volume import OneHotMask, SubVolumeSpec, Volume, VolumeError


class PlacementError(RuntimeError):
    pass


class SamplingError(RuntimeError):
    pass


@dataclass(frozen=True)
class OrganSpec:
    id: int
    radii_mm: Tuple[float, float, float]
    intensity: float
    center: Union[Tuple[float, float, float], str] = "random"
    presence_prob: float = 1.0
    name: str = ""

    def __post_init__(self):
        if any(r <= 0 for r in self.radii_mm):
            raise ValueError(f"organ {self.id}: radii must be positive")
        if not 0.0 <= self.presence_prob <= 1.0:
            raise ValueError(f"organ {self.id}: presence_prob must lie in [0, 1]")
        if isinstance(self.center, str):
            if self.center != "random":
                raise ValueError(f"organ {self.id}: center must be 'random' or fractional coords")
        elif any(not 0.0 <= c <= 1.0 for c in self.center):
            raise ValueError(f"organ {self.id}: fractional center must lie in [0, 1]^3")


# Calibrated on a 64^3 grid of 1 mm voxels to the per-organ foreground
# fractions brain .64%, heart .14%, kidneys .08/.09%, bladder .09%.
_REFERENCE_ORGANS = (
    ("brain", (8.0, 8.0, 6.25), 0.95),
    ("heart", (5.0, 4.5, 4.0), 0.80),
    ("left_kidney", (3.2, 3.5, 4.5), 0.65),
    ("right_kidney", (3.5, 3.5, 4.6), 0.50),
    ("bladder", (4.0, 4.0, 3.5), 0.35),
)


def default_organs(dims=(64, 64, 64), spacing=(1.0, 1.0, 1.0), n_organs: int = 5,
                   presence_prob: float = 1.0) -> List[OrganSpec]:
    """Reference organs rescaled so their volume fractions hold on ``dims``."""
    scale = [d * s / 64.0 for d, s in zip(dims, spacing)]
    organs = []
    for i, (name, radii, inten) in enumerate(_REFERENCE_ORGANS[:n_organs]):
        r = tuple(ri * si for ri, si in zip(radii, scale))
        organs.append(OrganSpec(i, r, inten, "random", presence_prob, name))
    return organs


@dataclass(frozen=True)
class PhantomConfig:
    dims: Tuple[int, int, int] = (64, 64, 64)
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    organs: Tuple[OrganSpec, ...] = field(default_factory=lambda: tuple(default_organs()))
    background: float = 0.1
    noise_sigma: float = 0.05
    blur_sigma: float = 0.0
    seed: int = 0
    max_retries: int = 200

    def __post_init__(self):
        object.__setattr__(self, "organs", tuple(self.organs))
        ids = sorted(o.id for o in self.organs)
        if ids != list(range(len(ids))):
            raise ValueError(f"organ ids must be 0..C-1, got {ids}")


def _streams(seed: int):
    ss = np.random.SeedSequence(seed)
    geo, noise = ss.spawn(2)
    return np.random.Generator(np.random.PCG64(geo)), np.random.Generator(np.random.PCG64(noise))


def ellipsoid_mask(dims, spacing, center_mm, radii_mm) -> np.ndarray:
    """Voxels whose centres fall inside the ellipsoid."""
    axes = [(np.arange(n) + 0.5) * s for n, s in zip(dims, spacing)]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    q = sum(((g - c) / r) ** 2 for g, c, r in zip((gx, gy, gz), center_mm, radii_mm))
    return q <= 1.0


def generate_phantom(cfg: PhantomConfig) -> Tuple[Volume, OneHotMask]:
    """Return ``(image, mask)``; absent organs leave their channel empty."""
    geo, noise = _streams(cfg.seed)
    extent = [n * s for n, s in zip(cfg.dims, cfg.spacing)]
    bits = np.zeros((*cfg.dims, len(cfg.organs)), dtype=np.uint8)
    occupied = np.zeros(cfg.dims, dtype=bool)
    image = np.full(cfg.dims, cfg.background, dtype=np.float64)
    for organ in sorted(cfg.organs, key=lambda o: o.id):
        present = geo.random() < organ.presence_prob
        if any(2 * r > e for r, e in zip(organ.radii_mm, extent)):
            raise PlacementError(f"organ {organ.id} does not fit in the volume")
        if not present:
            continue
        for _ in range(cfg.max_retries if organ.center == "random" else 1):
            if organ.center == "random":
                center = [geo.uniform(r, e - r) for r, e in zip(organ.radii_mm, extent)]
            else:
                center = [c * e for c, e in zip(organ.center, extent)]
            inside = ellipsoid_mask(cfg.dims, cfg.spacing, center, organ.radii_mm)
            # one-voxel gap keeps organs from touching
            grown = ellipsoid_mask(cfg.dims, cfg.spacing, center,
                                   [r + max(cfg.spacing) for r in organ.radii_mm])
            if inside.any() and not (grown & occupied).any():
                break
        else:
            raise PlacementError(f"could not place organ {organ.id} after {cfg.max_retries} tries")
        bits[..., organ.id] = inside
        occupied |= inside
        image[inside] = organ.intensity
    if cfg.blur_sigma > 0:
        image = gaussian_filter(image, cfg.blur_sigma / np.asarray(cfg.spacing), mode="nearest")
    image = image + noise.normal(0.0, cfg.noise_sigma, size=cfg.dims)
    return Volume(image, cfg.spacing), OneHotMask(bits, cfg.spacing)


def generate_cases(cfg: PhantomConfig, n: int) -> List[Tuple[Volume, OneHotMask]]:
    """``n`` phantoms; phantom ``i`` uses seed stream ``(cfg.seed, i)``."""
    out = []
    for i in range(n):
        seed = int(np.random.SeedSequence([cfg.seed, i]).generate_state(1)[0])
        out.append(generate_phantom(replace(cfg, seed=seed)))
    return out


def _window_sums(fg: np.ndarray, size) -> np.ndarray:
    """Foreground count of every window of ``size``, indexed by origin."""
    s = np.pad(fg.astype(np.int64), ((1, 0), (1, 0), (1, 0))).cumsum(0).cumsum(1).cumsum(2)
    a, b, c = size
    return (s[a:, b:, c:] - s[:-a, b:, c:] - s[a:, :-b, c:] - s[a:, b:, :-c]
            + s[:-a, :-b, c:] + s[:-a, b:, :-c] + s[a:, :-b, :-c] - s[:-a, :-b, :-c])


DESK_SAMPLING = (8, 8, (32, 32, 32))
FULL_SAMPLING = (100, 100, (80, 80, 80))


def sample_training_windows(mask: OneHotMask, n_per_organ: int = DESK_SAMPLING[0],
                            n_background: int = DESK_SAMPLING[1], size=DESK_SAMPLING[2],
                            rng: Optional[np.random.Generator] = None) -> List[Tuple[SubVolumeSpec, Optional[int]]]:
    """Window placements: ``n_per_organ`` touching each present organ, then
    ``n_background`` with no foreground at all.  The second element names the
    targeted organ channel, or ``None`` for background windows."""
    rng = rng if rng is not None else np.random.default_rng(0)
    size = tuple(int(s) for s in size)
    dims = mask.dims
    if any(s > d for s, d in zip(size, dims)):
        raise VolumeError(f"window {size} larger than volume {dims}")
    hi = [d - s for d, s in zip(dims, size)]
    out: List[Tuple[SubVolumeSpec, Optional[int]]] = []
    for c in range(mask.channels):
        vox = np.argwhere(mask.bits[..., c])
        if len(vox) == 0:
            continue
        for _ in range(n_per_organ):
            v = vox[rng.integers(len(vox))]
            origin = [int(rng.integers(max(0, p - s + 1), min(p, h) + 1)) for p, s, h in zip(v, size, hi)]
            out.append((SubVolumeSpec(tuple(origin), size), c))
    if n_background:
        empty = np.argwhere(_window_sums(mask.bits.any(axis=3), size) == 0)
        if len(empty) == 0:
            raise SamplingError(f"no foreground-free window of size {size} exists")
        for i in rng.integers(len(empty), size=n_background):
            out.append((SubVolumeSpec(tuple(int(v) for v in empty[i]), size), None))
    return out


def sample_training_subvolumes(vol: Volume, mask: OneHotMask, n_per_organ: int = DESK_SAMPLING[0],
                               n_background: int = DESK_SAMPLING[1], size=DESK_SAMPLING[2],
                               rng: Optional[np.random.Generator] = None):
    """Extracted ``(Volume, OneHotMask)`` pairs for the placements above."""
    rng = rng if rng is not None else np.random.default_rng(0)
    pairs = []
    for spec, _ in sample_training_windows(mask, n_per_organ, n_background, size, rng):
        sl = spec.slices()
        pairs.append((Volume(vol.data[sl], vol.spacing), OneHotMask(mask.bits[sl], mask.spacing)))
    return pairs


def foreground_fraction(mask: OneHotMask) -> float:
    return float(mask.bits.sum()) / float(np.prod(mask.dims))

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from comboseg.synth import (
    OrganSpec,
    PhantomConfig,
    PlacementError,
    SamplingError,
    _window_sums,
    default_organs,
    ellipsoid_mask,
    foreground_fraction,
    generate_cases,
    generate_phantom,
    sample_training_subvolumes,
    sample_training_windows,
)
from comboseg.volume import OneHotMask, VolumeError


def small_cfg(**kw):
    dims = kw.pop("dims", (32, 32, 32))
    return PhantomConfig(dims=dims, organs=tuple(default_organs(dims, n_organs=kw.pop("n", 3),
                                                                presence_prob=kw.pop("pp", 1.0))), **kw)


def test_default_foreground_fraction():
    vol, mask = generate_phantom(PhantomConfig(seed=0))
    assert vol.dims == (64, 64, 64) and mask.channels == 5
    assert 0.005 <= foreground_fraction(mask) <= 0.015
    assert mask.is_disjoint()


def test_same_seed_bit_identical():
    a = generate_phantom(small_cfg(seed=7))
    b = generate_phantom(small_cfg(seed=7))
    assert np.array_equal(a[0].data, b[0].data)
    assert np.array_equal(a[1].bits, b[1].bits)
    c = generate_phantom(small_cfg(seed=8))
    assert not np.array_equal(a[0].data, c[0].data)


def test_noise_does_not_move_organs():
    # geometry and noise come from separate streams
    a = generate_phantom(small_cfg(seed=3, noise_sigma=0.0))
    b = generate_phantom(small_cfg(seed=3, noise_sigma=0.2))
    assert np.array_equal(a[1].bits, b[1].bits)


def test_absent_organs():
    _, mask = generate_phantom(small_cfg(pp=0.0))
    assert mask.bits.sum() == 0 and mask.channels == 3


def test_missing_organ_rate():
    cases = generate_cases(small_cfg(dims=(24, 24, 24), pp=0.5, seed=1), 40)
    present = np.array([m.bits.reshape(-1, 3).any(0) for _, m in cases])
    assert 0.3 < present.mean() < 0.7


@pytest.mark.parametrize("radii", [(4, 4, 4), (5, 4, 6), (6.5, 4.5, 5)])
def test_ellipsoid_volume(radii):
    m = ellipsoid_mask((20, 20, 20), (1, 1, 1), (10, 10, 10), radii)
    analytic = 4 / 3 * math.pi * np.prod(radii)
    assert abs(m.sum() - analytic) / analytic < 0.10


def test_ellipsoid_anisotropic_spacing():
    m = ellipsoid_mask((20, 20, 10), (1, 1, 2), (10, 10, 10), (5, 5, 5))
    analytic = 4 / 3 * math.pi * 125 / 2
    assert abs(m.sum() - analytic) / analytic < 0.10


def test_organ_too_large():
    cfg = PhantomConfig(dims=(8, 8, 8), organs=(OrganSpec(0, (5, 1, 1), 0.9),))
    with pytest.raises(PlacementError):
        generate_phantom(cfg)


def test_organ_validation():
    with pytest.raises(ValueError):
        OrganSpec(0, (0, 1, 1), 0.5)
    with pytest.raises(ValueError):
        OrganSpec(0, (1, 1, 1), 0.5, presence_prob=1.5)
    with pytest.raises(ValueError):
        PhantomConfig(organs=(OrganSpec(1, (2, 2, 2), 0.5),))


def test_fixed_center():
    cfg = PhantomConfig(dims=(10, 10, 10), organs=(OrganSpec(0, (2, 2, 2), 0.9, (0.5, 0.5, 0.5)),),
                        noise_sigma=0.0)
    vol, mask = generate_phantom(cfg)
    assert mask.bits[5, 5, 5, 0] == 1 and mask.bits[0, 0, 0, 0] == 0
    assert vol.data[5, 5, 5] == 0.9


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(2, 6))
def test_window_sums_match_direct(seed, w):
    rng = np.random.default_rng(seed)
    fg = rng.random((8, 7, 6)) < 0.1
    sums = _window_sums(fg, (w, w, w))
    for idx in np.ndindex(*sums.shape):
        x, y, z = idx
        assert sums[idx] == fg[x:x + w, y:y + w, z:z + w].sum()


def test_windows_target_organs_and_background():
    _, mask = generate_phantom(small_cfg(seed=2))
    rng = np.random.default_rng(0)
    wins = sample_training_windows(mask, 8, 8, (8, 8, 8), rng)
    assert len(wins) == 3 * 8 + 8
    for spec, organ in wins:
        assert spec.fits(mask.dims)
        sub = mask.bits[spec.slices()]
        if organ is None:
            assert sub.sum() == 0
        else:
            assert sub[..., organ].sum() > 0


def test_full_scale_counts_accepted():
    _, mask = generate_phantom(small_cfg(seed=4))
    wins = sample_training_windows(mask, 100, 100, (8, 8, 8), np.random.default_rng(1))
    assert len(wins) == 3 * 100 + 100


def test_desk_default_sampling():
    vol, mask = generate_phantom(PhantomConfig(seed=6))
    pairs = sample_training_subvolumes(vol, mask)
    assert len(pairs) == 5 * 8 + 8
    assert all(v.dims == (32, 32, 32) for v, _ in pairs)


def test_background_impossible():
    bits = np.ones((6, 6, 6, 1), np.uint8)
    with pytest.raises(SamplingError):
        sample_training_windows(OneHotMask(bits), 1, 1, (4, 4, 4), np.random.default_rng(0))


def test_window_larger_than_volume():
    bits = np.zeros((4, 4, 4, 1), np.uint8)
    with pytest.raises(VolumeError):
        sample_training_windows(OneHotMask(bits), 1, 1, (5, 4, 4), np.random.default_rng(0))


def test_subvolumes_pair_image_and_mask():
    vol, mask = generate_phantom(small_cfg(seed=5, noise_sigma=0.0))
    pairs = sample_training_subvolumes(vol, mask, 2, 2, (8, 8, 8), np.random.default_rng(3))
    assert len(pairs) == 3 * 2 + 2
    for v, m in pairs:
        assert v.dims == m.dims == (8, 8, 8)
        # organ voxels carry organ intensity, never the background level
        if m.bits.any():
            assert np.all(v.data[m.bits.any(-1).astype(bool)] > 0.3)

import math

import numpy as np
import pytest

from comboseg.experiments import (
    Trial,
    beta_fnr_spearman,
    beta_sweep,
    desk_setup,
    run_trial,
    score,
)
from comboseg.synth import foreground_fraction
from comboseg.volume import OneHotMask


class Oracle:
    """Predicts a fixed mask regardless of input."""

    def __init__(self, bits):
        self.bits = bits.astype(np.float64)
        self.calls = 0

    def predict(self, x):
        self.calls += 1
        return np.broadcast_to(self.bits[: x.shape[1], : x.shape[2], : x.shape[3]],
                               (x.shape[0],) + x.shape[1:4] + self.bits.shape[-1:])


def test_desk_setup_is_imbalanced():
    s = desk_setup()
    tr, te = s.cases()
    assert len(tr) == 4 and len(te) == 3
    assert all(foreground_fraction(m) <= 0.01 for _, m in tr + te)
    assert s.train.eps == 1e-8 and s.train.rho == 0.95 and s.train.lr == 1.0
    # train and test phantoms differ
    assert not np.array_equal(tr[0][1].bits, te[0][1].bits)


def test_score_perfect_prediction():
    s = desk_setup(dims=(16, 16, 16), window=(16, 16, 16))
    _, te = s.cases()
    vol, gt = te[0]
    res = score(Oracle(gt.bits), [(vol, gt)], (16, 16, 16), (16, 16, 16))
    assert res["dice"] == 1.0 and res["fnr"] == 0.0 and res["fpr"] == 0.0 and res["hd_mm"] == 0.0


def test_score_pools_missing_organs():
    gt = np.zeros((4, 4, 4, 2), np.uint8)
    gt[:2, :2, :2, 0] = 1
    pred = gt.copy()
    pred[2:, 2:, 2:, 1] = 1  # 8 false positives on an absent organ
    from comboseg.volume import Volume
    res = score(Oracle(pred), [(Volume(np.zeros((4, 4, 4))), OneHotMask(gt))], 4, 4)
    assert res["fpr"] == 1.0
    assert res["dice"] == pytest.approx(0.5)  # organ0 perfect, organ1 empty gt vs non-empty pred


def test_spearman_direction():
    rows = [{"beta": b, "fnr": f} for b, f in [(0.3, 0.4), (0.3, 0.2), (0.5, 0.25), (0.7, 0.1), (0.9, 0.05)]]
    assert beta_fnr_spearman(rows) == pytest.approx(-1.0)
    rows[-1]["fnr"] = 0.9
    # per-beta means .3 .25 .1 .9 -> ranks 3 2 1 4, sum d^2 = 8, rho = 1 - 6*8/(4*15)
    assert beta_fnr_spearman(rows) == pytest.approx(0.2)


def test_sweep_requires_two_betas():
    with pytest.raises(ValueError):
        beta_sweep(desk_setup(), [0.5], [0])


def test_sweep_reuses_done_rows():
    sentinel = {"beta": 0.5, "seed": 0, "fnr": 0.1}
    s = desk_setup(dims=(16, 16, 16), window=(8, 8, 8), widths=(2,), steps=1)
    rows = beta_sweep(s, [0.5, 0.7], [0], done={(0.5, 0): sentinel})
    assert rows[0] is sentinel and rows[1]["beta"] == 0.7


def test_trial_is_deterministic_without_bn():
    s = desk_setup(dims=(16, 16, 16), window=(8, 8, 8), widths=(2,), steps=3)
    from dataclasses import replace
    s = replace(s, train=replace(s.train, net=replace(s.train.net, batch_norm=False)))
    data = s.cases()
    t = Trial.make("combo", {"alpha": 0.5, "beta": 0.5}, 1)
    a, b = run_trial(s, t, data), run_trial(s, t, data)
    assert a == b or all((math.isnan(a[k]) and math.isnan(b[k])) or a[k] == b[k] for k in a)

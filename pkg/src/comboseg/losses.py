"""Segmentation losses as (value, d value / d p) pairs over flattened fields.

Every loss takes flattened predictions ``p`` and binary targets ``t`` of the
same length and returns a :class:`LossResult`.  Lower is better.  Gradients
are derived by hand from each loss definition; :func:`finite_difference_gradient`
is the independent check.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, Mapping, Optional, Sequence, Union

import numpy as np

from .volume import PROB_EPS


class LossError(ValueError):
    pass


@dataclass(frozen=True)
class LossResult:
    value: float
    grad: np.ndarray


@dataclass(frozen=True)
class ComboParams:
    """Mixing weight ``alpha`` (cross-entropy share), FN/FP weight ``beta``, Dice smoothing."""

    alpha: float = 0.5
    beta: float = 0.5
    smooth: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise LossError(f"alpha must lie in [0, 1], got {self.alpha}")
        _check_beta(self.beta)
        if self.smooth < 0:
            raise LossError(f"smooth must be nonnegative, got {self.smooth}")


@dataclass(frozen=True)
class FocalParams:
    alpha_f: float = 0.25
    gamma: float = 2.0

    def __post_init__(self):
        if not 0.0 < self.alpha_f <= 1.0:
            raise LossError(f"alpha_f must lie in (0, 1], got {self.alpha_f}")
        if self.gamma < 0:
            raise LossError(f"gamma must be nonnegative, got {self.gamma}")


# beta presets per imaging regime; < 0.5 punishes false positives harder
BETA_PRESETS: Dict[str, float] = {
    "pet": 0.4,
    "mri": 0.6,
    "ultrasound": 0.7,
    "fn_heavy": 0.9,
}


def _check_beta(beta: float) -> None:
    if not 0.0 <= beta <= 1.0:
        raise LossError(f"beta must lie in [0, 1], got {beta}")


def _prep(p, t, clamp: bool = True):
    p = np.asarray(p, dtype=np.float64).ravel()
    t = np.asarray(t, dtype=np.float64).ravel()
    if p.shape != t.shape:
        raise LossError(f"length mismatch: p has {p.size} elements, t has {t.size}")
    if p.size == 0:
        raise LossError("empty input")
    if clamp:
        p = np.clip(p, PROB_EPS, 1.0 - PROB_EPS)
    return p, t


def cross_entropy_mean(p, t, clamp: bool = True) -> LossResult:
    """Binary cross entropy averaged over all N = classes x voxels elements."""
    p, t = _prep(p, t, clamp)
    n = p.size
    value = -np.sum(t * np.log(p) + (1 - t) * np.log1p(-p)) / n
    grad = -(t / p - (1 - t) / (1 - p)) / n
    return LossResult(float(value), grad)


def weighted_binary_ce(p, t, beta: float, clamp: bool = True) -> LossResult:
    """Cross entropy with ``beta`` on the missed-foreground term and ``1 - beta`` on the false-alarm term."""
    _check_beta(beta)
    p, t = _prep(p, t, clamp)
    n = p.size
    value = -np.sum(beta * t * np.log(p) + (1 - beta) * (1 - t) * np.log1p(-p)) / n
    grad = -(beta * t / p - (1 - beta) * (1 - t) / (1 - p)) / n
    return LossResult(float(value), grad)


def _dice_parts(p, t, smooth):
    inter = float(np.sum(p * t))
    denom = float(np.sum(p) + np.sum(t)) + smooth
    num = 2.0 * inter + smooth
    return num, denom


def soft_dice(p, t, smooth: float = 1.0, clamp: bool = False) -> float:
    """(2 sum(p t) + S) / (sum(p) + sum(t) + S) over the whole flattened field."""
    p, t = _prep(p, t, clamp)
    num, denom = _dice_parts(p, t, smooth)
    return num / denom


def soft_dice_grad(p, t, smooth: float = 1.0, clamp: bool = False) -> np.ndarray:
    p, t = _prep(p, t, clamp)
    num, denom = _dice_parts(p, t, smooth)
    return (2.0 * t * denom - num) / denom**2


def dice_loss(p, t, smooth: float = 1.0, one_minus: bool = False, clamp: bool = False) -> LossResult:
    """Negated soft Dice, or ``1 - soft Dice`` with ``one_minus``; gradients coincide."""
    p, t = _prep(p, t, clamp)
    num, denom = _dice_parts(p, t, smooth)
    d = num / denom
    grad = -(2.0 * t * denom - num) / denom**2
    return LossResult(float(1.0 - d if one_minus else -d), grad)


def gdl_default_weights(t, channels: int, floor: float = 1e-8) -> np.ndarray:
    """Inverse squared reference volume per class."""
    t = np.asarray(t, dtype=np.float64).reshape(channels, -1)
    return 1.0 / np.maximum(t.sum(axis=1) ** 2, floor)


def generalized_dice_loss(
    p,
    t,
    channels: int,
    weights: Optional[Sequence[float]] = None,
    smooth: float = 1.0,
    clamp: bool = False,
) -> LossResult:
    """Class-weighted Dice over a channel-major flattened field.

    ``1 - (2 sum_l w_l sum_n r p + S) / (sum_l w_l sum_n (r + p) + S)``.
    With one class and unit weight this is ``1 - soft_dice``.
    """
    p, t = _prep(p, t, clamp)
    if channels < 1 or p.size % channels:
        raise LossError(f"{p.size} elements cannot be split into {channels} channels")
    w = gdl_default_weights(t, channels) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.shape != (channels,):
        raise LossError(f"expected {channels} class weights, got {w.shape}")
    if not np.all(np.isfinite(w)) or np.any(w < 0):
        raise LossError("class weights must be finite and nonnegative")
    if not np.any(w > 0):
        raise LossError("all class weights are zero")
    pc = p.reshape(channels, -1)
    tc = t.reshape(channels, -1)
    num = 2.0 * float(np.sum(w * np.sum(pc * tc, axis=1))) + smooth
    den = float(np.sum(w * np.sum(pc + tc, axis=1))) + smooth
    # d/dp_ln of num/den = w_l (2 r_ln den - num) / den^2
    grad = -(w[:, None] * (2.0 * tc * den - num)) / den**2
    return LossResult(float(1.0 - num / den), grad.ravel())


def f_beta_loss(p, t, beta_f: float, smooth: float = 1.0, clamp: bool = False) -> LossResult:
    """Negated soft F-beta score; ``beta_f > 1`` weighs recall above precision."""
    if not beta_f > 0:
        raise LossError(f"beta_f must be positive, got {beta_f}")
    p, t = _prep(p, t, clamp)
    b2 = beta_f * beta_f
    tp = float(np.sum(p * t))
    fn = float(np.sum(t * (1 - p)))
    fp = float(np.sum(p * (1 - t)))
    num = (1 + b2) * tp + smooth
    den = (1 + b2) * tp + b2 * fn + fp + smooth
    # d den / d p_j = (1 + b2) t - b2 t + (1 - t) = 1
    grad = -((1 + b2) * t * den - num) / den**2
    return LossResult(float(-num / den), grad)


def focal_loss(p, t, fp: FocalParams = FocalParams(), clamp: bool = True) -> LossResult:
    p, t = _prep(p, t, clamp)
    a, g = fp.alpha_f, fp.gamma
    n = p.size
    logp, log1mp = np.log(p), np.log1p(-p)
    pos = a * t * (1 - p) ** g * logp
    neg = (1 - a) * (1 - t) * p**g * log1mp
    value = -np.sum(pos + neg) / n
    # d/dp[(1-p)^g ln p] = -g (1-p)^(g-1) ln p + (1-p)^g / p
    # d/dp[p^g ln(1-p)]  =  g p^(g-1) ln(1-p) - p^g / (1-p)
    if g == 0:
        dpos = 1.0 / p
        dneg = -1.0 / (1 - p)
    else:
        dpos = -g * (1 - p) ** (g - 1) * logp + (1 - p) ** g / p
        dneg = g * p ** (g - 1) * log1mp - p**g / (1 - p)
    grad = -(a * t * dpos + (1 - a) * (1 - t) * dneg) / n
    return LossResult(float(value), grad)


def combo_loss(
    p,
    t,
    cp: ComboParams = ComboParams(),
    channels: Optional[int] = None,
    per_class_dice: bool = False,
    clamp: bool = True,
) -> LossResult:
    """``alpha * WCE(beta) - (1 - alpha) * soft_dice``.

    By default the Dice term is a single term over the flattened multi-channel
    field.  ``per_class_dice`` sums one Dice term per channel instead, which
    needs ``channels``.
    """
    p, t = _prep(p, t, clamp)
    ce = weighted_binary_ce(p, t, cp.beta, clamp=False)
    if per_class_dice:
        if channels is None or p.size % channels:
            raise LossError("per-class Dice needs a channel count dividing the input length")
        pc, tc = p.reshape(channels, -1), t.reshape(channels, -1)
        d = sum(soft_dice(pc[c], tc[c], cp.smooth) for c in range(channels))
        dgrad = np.concatenate([soft_dice_grad(pc[c], tc[c], cp.smooth) for c in range(channels)])
    else:
        d = soft_dice(p, t, cp.smooth)
        dgrad = soft_dice_grad(p, t, cp.smooth)
    value = cp.alpha * ce.value - (1 - cp.alpha) * d
    grad = cp.alpha * ce.grad - (1 - cp.alpha) * dgrad
    return LossResult(float(value), grad)


LossFn = Callable[..., LossResult]


def finite_difference_gradient(loss_fn: Callable, p, t, h: float = 1e-5) -> np.ndarray:
    """Central differences of ``loss_fn(p, t)`` with respect to each ``p_j``.

    ``loss_fn`` may return a :class:`LossResult` or a bare scalar.  Near the
    ends of (0, 1) the step is shrunk per element so perturbations stay inside
    the open interval; no clamping is applied to perturbed inputs.
    """
    if not 1e-6 <= h <= 1e-3:
        raise LossError(f"step h must lie in [1e-6, 1e-3], got {h}")
    p = np.array(p, dtype=np.float64).ravel()
    t = np.asarray(t, dtype=np.float64).ravel()

    def value(q):
        r = loss_fn(q, t)
        return float(r.value if isinstance(r, LossResult) else r)

    grad = np.empty_like(p)
    for j in range(p.size):
        hj = h
        if 0.0 < p[j] < 1.0:
            hj = min(h, p[j] / 10, (1 - p[j]) / 10)
        orig = p[j]
        p[j] = orig + hj
        up = value(p)
        p[j] = orig - hj
        down = value(p)
        p[j] = orig
        grad[j] = (up - down) / (2 * hj)
    return grad


def max_relative_error(analytic, numeric, floor: float = 1e-8) -> float:
    """``max |a - n| / max(|a|, |n|, floor)`` elementwise."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    scale = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / scale))


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    # split by sign so exp never overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def logit_gradient(loss_fn: Callable[..., LossResult], z, t) -> np.ndarray:
    """d loss / d z where ``p = sigmoid(z)``, via the sigmoid derivative."""
    z = np.atleast_1d(np.asarray(z, dtype=np.float64))
    p = sigmoid(z)
    res = loss_fn(p, t)
    return res.grad * p * (1 - p)


# -- config-driven selection ------------------------------------------------

LOSS_NAMES = ("ce", "wce", "dice", "gdl", "fbeta", "focal", "combo")


def make_loss(name: str, params: Optional[Mapping[str, Union[float, str]]] = None,
              channels: int = 1) -> Callable[[np.ndarray, np.ndarray], LossResult]:
    """Bind a loss by config name.

    Recognised keys: ``alpha beta smooth gamma alpha_f beta_f``.  ``beta`` may
    also be a preset name from :data:`BETA_PRESETS`.
    """
    params = dict(params or {})
    name = name.lower()

    def num(key, default):
        v = params.get(key, default)
        if key == "beta" and isinstance(v, str) and v in BETA_PRESETS:
            return BETA_PRESETS[v]
        return float(v)

    smooth = num("smooth", 1.0)
    if name == "ce":
        return cross_entropy_mean
    if name == "wce":
        beta = num("beta", 0.5)
        _check_beta(beta)
        return lambda p, t: weighted_binary_ce(p, t, beta)
    if name == "dice":
        return lambda p, t: dice_loss(p, t, smooth)
    if name == "gdl":
        return lambda p, t: generalized_dice_loss(p, t, channels, smooth=smooth)
    if name == "fbeta":
        beta_f = num("beta_f", 1.0)
        if not beta_f > 0:
            raise LossError(f"beta_f must be positive, got {beta_f}")
        return lambda p, t: f_beta_loss(p, t, beta_f, smooth)
    if name == "focal":
        fp = FocalParams(num("alpha_f", 0.25), num("gamma", 2.0))
        return lambda p, t: focal_loss(p, t, fp)
    if name == "combo":
        cp = ComboParams(num("alpha", 0.5), num("beta", 0.5), smooth)
        return lambda p, t: combo_loss(p, t, cp)
    raise LossError(f"unknown loss {name!r}; expected one of {', '.join(LOSS_NAMES)}")

"""Training loop, evaluation and the gradient-check suites."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from . import losses as L
from .infer import predict_volume
from .metrics import OrganReport, confusion, dice_score, organ_report
from .net import AdadeltaState, Network, NetworkConfig, NonFiniteGradient
from .synth import sample_training_windows
from .volume import OneHotMask, SubVolumeSpec, Volume, self_normalize

log = logging.getLogger(__name__)

Case = Tuple[Volume, OneHotMask]


class TrainingError(RuntimeError):
    pass


def to_flat(field_: np.ndarray) -> np.ndarray:
    """``(B, X, Y, Z, C)`` -> per sample, channel-major, x-fastest."""
    return np.asarray(field_).transpose(0, 4, 3, 2, 1).ravel()


def from_flat(flat: np.ndarray, shape) -> np.ndarray:
    b, x, y, z, c = shape
    return np.asarray(flat).reshape(b, c, z, y, x).transpose(0, 4, 3, 2, 1)


@dataclass(frozen=True)
class TrainConfig:
    loss: str = "combo"
    loss_params: Mapping[str, float] = field(default_factory=lambda: {"alpha": 0.5, "beta": 0.5, "smooth": 1.0})
    net: NetworkConfig = NetworkConfig()
    steps: int = 500
    window: Tuple[int, int, int] = (32, 32, 32)
    n_per_organ: int = 8
    n_background: int = 8
    n_random: int = 0
    batch_size: int = 1
    rho: float = 0.95
    eps: float = 1e-8
    lr: float = 1.0
    normalize_windows: bool = False
    eval_every: int = 0
    eval_stride: Optional[Tuple[int, int, int]] = None
    threshold: float = 0.5
    seed: int = 0


@dataclass
class TrainResult:
    net: Network
    final_net: Network
    losses: List[float]
    best_step: int
    best_val_dice: float


def _window_stream(cases: Sequence[Case], cfg: TrainConfig, rng: np.random.Generator):
    """Endless shuffled passes over organ-targeted, background and uniformly
    placed windows.  Uniform windows keep the volume's own class balance."""
    while True:
        pool = []
        for ci, (_, mask) in enumerate(cases):
            for spec, _ in sample_training_windows(mask, cfg.n_per_organ, cfg.n_background, cfg.window, rng):
                pool.append((ci, spec))
            hi = [d - w for d, w in zip(mask.dims, cfg.window)]
            for _ in range(cfg.n_random):
                origin = tuple(int(rng.integers(0, h + 1)) for h in hi)
                pool.append((ci, SubVolumeSpec(origin, cfg.window)))
        if not pool:
            raise TrainingError("no training windows could be sampled")
        for i in rng.permutation(len(pool)):
            yield pool[i]


def _prepare(vol: Volume, normalize: bool) -> np.ndarray:
    return (self_normalize(vol).data if normalize else vol.data)[..., None]


def mean_dice(net: Network, cases: Sequence[Case], window, stride, threshold=0.5,
              normalize_windows=False) -> float:
    """Dice pooled over channels per case, averaged over cases."""
    scores = []
    for vol, gt in cases:
        pred = predict_volume(net, vol, window, stride, threshold, normalize_windows)
        scores.append(float(dice_score(confusion(pred, gt).pooled())))
    return float(np.mean(scores))


def train(cfg: TrainConfig, cases: Sequence[Case], val_cases: Sequence[Case] = (),
          on_step: Optional[Callable[[int, float], None]] = None) -> TrainResult:
    """Fixed-step ADADELTA training on sampled sub-volumes.

    With ``eval_every`` and validation cases the network with the best
    validation Dice is returned as ``net``; otherwise ``net`` is the final one.
    """
    if not cases:
        raise TrainingError("no training cases")
    net = Network(cfg.net)
    loss_fn = L.make_loss(cfg.loss, cfg.loss_params, channels=cfg.net.class_channels)
    opt = AdadeltaState(rho=cfg.rho, eps=cfg.eps, lr=cfg.lr)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    stream = _window_stream(cases, cfg, rng)
    stride = cfg.eval_stride or cfg.window
    best, best_step, best_dice = net.copy(), 0, -math.inf
    history: List[float] = []
    for step in range(1, cfg.steps + 1):
        xs, ts = [], []
        for _ in range(cfg.batch_size):
            ci, spec = next(stream)
            vol, mask = cases[ci]
            sl = spec.slices()
            xs.append(_prepare(Volume(vol.data[sl], vol.spacing), cfg.normalize_windows))
            ts.append(mask.bits[sl].astype(np.float64))
        x, t = np.stack(xs), np.stack(ts)
        p, cache = net.forward(x, "train")
        res = loss_fn(to_flat(p), to_flat(t))
        if not math.isfinite(res.value):
            raise TrainingError(f"non-finite loss at step {step}")
        grads = net.backward(cache, from_flat(res.grad, p.shape))
        try:
            net.apply_gradients(opt, grads)
        except NonFiniteGradient as exc:
            raise TrainingError(f"non-finite gradient at step {step}: {exc}") from None
        history.append(res.value)
        if on_step:
            on_step(step, res.value)
        if cfg.eval_every and val_cases and step % cfg.eval_every == 0:
            d = mean_dice(net, val_cases, cfg.window, stride, cfg.threshold, cfg.normalize_windows)
            log.info("step %d loss %.5f val dice %.4f", step, res.value, d)
            if d > best_dice:
                best, best_step, best_dice = net.copy(), step, d
    if not (cfg.eval_every and val_cases):
        best, best_step = net.copy(), cfg.steps
        best_dice = math.nan
    return TrainResult(best, net, history, best_step, best_dice)


def evaluate(net: Network, cases: Sequence[Case], window, stride, threshold: float = 0.5,
             normalize_windows: bool = False, organ_names=None) -> Tuple[OrganReport, List[OneHotMask]]:
    preds = [predict_volume(net, vol, window, stride, threshold, normalize_windows) for vol, _ in cases]
    return organ_report(zip(preds, [gt for _, gt in cases]), organ_names), preds


# -- gradient checks ----------------------------------------------------------

LOSS_CHECKS: Dict[str, Callable] = {
    "ce": lambda p, t: L.cross_entropy_mean(p, t, clamp=False),
    "wce": lambda p, t: L.weighted_binary_ce(p, t, 0.4, clamp=False),
    "dice": lambda p, t: L.dice_loss(p, t, 1.0),
    "gdl": lambda p, t: L.generalized_dice_loss(p, t, 2, weights=[0.8, 1.6]),
    "fbeta": lambda p, t: L.f_beta_loss(p, t, 2.0, 1.0),
    "focal": lambda p, t: L.focal_loss(p, t, L.FocalParams(0.25, 2.0), clamp=False),
    "combo": lambda p, t: L.combo_loss(p, t, L.ComboParams(0.5, 0.4, 1.0), clamp=False),
}


def loss_gradcheck(n_pairs: int = 100, max_n: int = 64, seed: int = 0, h: float = 1e-5,
                   checks: Optional[Mapping[str, Callable]] = None) -> Dict[str, float]:
    """Worst relative error between analytic and central-difference gradients per loss.

    Inputs are random with ``p`` uniform in [0.01, 0.99]; lengths are even so
    the two-class GDL split always applies.
    """
    rng = np.random.default_rng(seed)
    worst = {}
    for name, fn in (checks or LOSS_CHECKS).items():
        err = 0.0
        for _ in range(n_pairs):
            n = 2 * int(rng.integers(1, max_n // 2 + 1))
            p = rng.uniform(0.01, 0.99, size=n)
            t = (rng.random(n) < rng.uniform(0.05, 0.95)).astype(np.float64)
            num = L.finite_difference_gradient(fn, p, t, h)
            err = max(err, L.max_relative_error(fn(p, t).grad, num))
        worst[name] = err
    return worst


def parameter_gradcheck(net: Network, x: np.ndarray, t: np.ndarray, loss_fn: Callable,
                        h: float = 1e-5, floor: float = 1e-7) -> Dict[str, float]:
    """Backprop vs central differences over every parameter, BN in eval mode.

    Returns the worst relative error per parameter tensor.
    """
    x = np.asarray(x, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)

    def value():
        return loss_fn(to_flat(net.predict(x)), to_flat(t)).value

    p, cache = net.forward(x, "eval", keep_cache=True)
    res = loss_fn(to_flat(p), to_flat(t))
    grads = net.backward(cache, from_flat(res.grad, p.shape))
    out = {}
    for k, arr in net.params.items():
        flat = arr.reshape(-1)
        num = np.empty(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = value()
            flat[i] = orig - h
            down = value()
            flat[i] = orig
            num[i] = (up - down) / (2 * h)
        out[k] = L.max_relative_error(grads[k].reshape(-1), num, floor)
    return out


def tiny_gradcheck_setup(seed: int = 0, size: int = 4, widths=(2,), channels: int = 1):
    """Network with perturbed BN statistics plus a random input and target."""
    rng = np.random.default_rng(seed)
    net = Network(NetworkConfig(1, channels, tuple(widths), True, seed))
    for k in net.params:
        if k.endswith(".b") or k.endswith(".beta"):
            net.params[k] = rng.normal(0, 0.1, net.params[k].shape)
        if k.endswith(".gamma"):
            net.params[k] = rng.uniform(0.5, 1.5, net.params[k].shape)
    for k in net.bn_stats:
        if k.endswith(".mean"):
            net.bn_stats[k] = rng.normal(0, 0.2, net.bn_stats[k].shape)
        else:
            net.bn_stats[k] = rng.uniform(0.5, 2.0, net.bn_stats[k].shape)
    x = rng.random((1, size, size, size, 1))
    t = (rng.random((1, size, size, size, channels)) < 0.3).astype(np.float64)
    return net, x, t

"""A small 3D encoder-decoder in plain numpy with hand-written backward passes.

Activations are channels-last, shape ``(B, X, Y, Z, C)``.  The encoder is a
stack of ``conv3x3x3 -> batch norm -> ReLU`` blocks separated by 2x2x2 max
pooling; the decoder mirrors it with nearest-neighbour 2x2x2 up-sampling and
no skip connections.  A final 3x3x3 convolution with a sigmoid produces one
activation per organ channel.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

from .losses import sigmoid

BN_EPS = 1e-5
BN_MOMENTUM = 0.9


class NetError(ValueError):
    pass


@dataclass(frozen=True)
class NetworkConfig:
    input_channels: int = 1
    class_channels: int = 1
    encoder_widths: Tuple[int, ...] = (8, 16, 32)
    batch_norm: bool = True
    seed: int = 0

    def __post_init__(self):
        widths = tuple(int(w) for w in self.encoder_widths)
        if not widths or any(w < 1 for w in widths):
            raise NetError(f"encoder_widths must be a nonempty list of positive ints, got {self.encoder_widths!r}")
        if self.input_channels < 1 or self.class_channels < 1:
            raise NetError("channel counts must be positive")
        object.__setattr__(self, "encoder_widths", widths)

    @property
    def divisor(self) -> int:
        return 2 ** (len(self.encoder_widths) - 1)

    def conv_layers(self) -> List[Tuple[str, int, int, bool]]:
        """``(name, c_in, c_out, has_bn)`` for every convolution in order."""
        w = self.encoder_widths
        layers = []
        cin = self.input_channels
        for i, width in enumerate(w):
            layers.append((f"enc{i}", cin, width, self.batch_norm))
            cin = width
        for i in reversed(range(len(w) - 1)):
            layers.append((f"dec{i}", cin, w[i], self.batch_norm))
            cin = w[i]
        layers.append(("head", cin, self.class_channels, False))
        return layers

    def to_json(self) -> str:
        d = asdict(self)
        d["encoder_widths"] = list(self.encoder_widths)
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_json(cls, s: str) -> "NetworkConfig":
        d = json.loads(s)
        d["encoder_widths"] = tuple(d["encoder_widths"])
        return cls(**d)


# -- layer primitives ---------------------------------------------------------

_OFFSETS = [(i, j, k) for i in range(3) for j in range(3) for k in range(3)]


def conv3d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Zero-padded 'same' 3x3x3 convolution; ``w`` has shape (3, 3, 3, Cin, Cout)."""
    bsz, X, Y, Z, _ = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (1, 1), (0, 0)))
    out = np.broadcast_to(b, (bsz, X, Y, Z, b.size)).copy()
    for i, j, k in _OFFSETS:
        out += xp[:, i:i + X, j:j + Y, k:k + Z, :] @ w[i, j, k]
    return out


def conv3d_backward(x: np.ndarray, w: np.ndarray, dy: np.ndarray):
    """Returns ``(dx, dw, db)``."""
    bsz, X, Y, Z, cin = x.shape
    cout = w.shape[-1]
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (1, 1), (0, 0)))
    dxp = np.zeros_like(xp)
    dw = np.empty_like(w)
    dy2 = dy.reshape(-1, cout)
    for i, j, k in _OFFSETS:
        xs = xp[:, i:i + X, j:j + Y, k:k + Z, :].reshape(-1, cin)
        dw[i, j, k] = xs.T @ dy2
        dxp[:, i:i + X, j:j + Y, k:k + Z, :] += dy @ w[i, j, k].T
    db = dy2.sum(axis=0)
    return dxp[:, 1:-1, 1:-1, 1:-1, :], dw, db


def batch_norm_forward(x, gamma, beta, running_mean, running_var, train: bool):
    """Per-channel normalisation over batch and spatial axes.

    In train mode the batch statistics are used and the running averages are
    updated in place.  Returns ``(y, cache)``.
    """
    axes = tuple(range(x.ndim - 1))
    if train:
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        running_mean *= BN_MOMENTUM
        running_mean += (1 - BN_MOMENTUM) * mean
        running_var *= BN_MOMENTUM
        running_var += (1 - BN_MOMENTUM) * var
    else:
        mean, var = running_mean.copy(), running_var.copy()
    inv_std = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (x - mean) * inv_std
    return gamma * xhat + beta, (xhat, inv_std, gamma, train)


def batch_norm_backward(dy, cache):
    xhat, inv_std, gamma, train = cache
    axes = tuple(range(dy.ndim - 1))
    dgamma = np.sum(dy * xhat, axis=axes)
    dbeta = np.sum(dy, axis=axes)
    dxhat = dy * gamma
    if not train:
        return dxhat * inv_std, dgamma, dbeta
    m = dy.size // dy.shape[-1]
    dx = inv_std / m * (m * dxhat - dxhat.sum(axis=axes) - xhat * np.sum(dxhat * xhat, axis=axes))
    return dx, dgamma, dbeta


def maxpool_forward(x: np.ndarray):
    bsz, X, Y, Z, C = x.shape
    if X % 2 or Y % 2 or Z % 2:
        raise NetError(f"max pooling needs even spatial dims, got {(X, Y, Z)}")
    blocks = x.reshape(bsz, X // 2, 2, Y // 2, 2, Z // 2, 2, C).transpose(0, 1, 3, 5, 7, 2, 4, 6)
    blocks = blocks.reshape(bsz, X // 2, Y // 2, Z // 2, C, 8)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
    return out, idx


def maxpool_backward(dy: np.ndarray, idx: np.ndarray) -> np.ndarray:
    bsz, x2, y2, z2, C = dy.shape
    blocks = np.zeros((bsz, x2, y2, z2, C, 8), dtype=dy.dtype)
    np.put_along_axis(blocks, idx[..., None], dy[..., None], axis=-1)
    blocks = blocks.reshape(bsz, x2, y2, z2, C, 2, 2, 2).transpose(0, 1, 5, 2, 6, 3, 7, 4)
    return blocks.reshape(bsz, 2 * x2, 2 * y2, 2 * z2, C)


def upsample_forward(x: np.ndarray) -> np.ndarray:
    return x.repeat(2, axis=1).repeat(2, axis=2).repeat(2, axis=3)


def upsample_backward(dy: np.ndarray) -> np.ndarray:
    bsz, X, Y, Z, C = dy.shape
    return dy.reshape(bsz, X // 2, 2, Y // 2, 2, Z // 2, 2, C).sum(axis=(2, 4, 6))


# -- network ------------------------------------------------------------------

def glorot_bound(fan_in: int, fan_out: int) -> float:
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


def glorot_init(cfg: NetworkConfig) -> Dict[str, np.ndarray]:
    """Uniform Glorot kernels, zero biases, unit BN scale and zero shift."""
    rng = np.random.default_rng(cfg.seed)
    params: Dict[str, np.ndarray] = {}
    for name, cin, cout, has_bn in cfg.conv_layers():
        bound = glorot_bound(27 * cin, 27 * cout)
        params[f"{name}.W"] = rng.uniform(-bound, bound, size=(3, 3, 3, cin, cout))
        params[f"{name}.b"] = np.zeros(cout)
        if has_bn:
            params[f"{name}.gamma"] = np.ones(cout)
            params[f"{name}.beta"] = np.zeros(cout)
    return params


def init_bn_stats(cfg: NetworkConfig) -> Dict[str, np.ndarray]:
    stats = {}
    for name, _, cout, has_bn in cfg.conv_layers():
        if has_bn:
            stats[f"{name}.mean"] = np.zeros(cout)
            stats[f"{name}.var"] = np.ones(cout)
    return stats


@dataclass
class ForwardCache:
    entries: List[tuple] = field(default_factory=list)
    output: Optional[np.ndarray] = None
    version: int = -1


class Network:
    """Parameters, running BN statistics and the forward/backward passes."""

    def __init__(self, cfg: NetworkConfig, params=None, bn_stats=None):
        self.cfg = cfg
        self.params = glorot_init(cfg) if params is None else params
        self.bn_stats = init_bn_stats(cfg) if bn_stats is None else bn_stats
        self.version = 0

    def copy(self) -> "Network":
        return Network(self.cfg, {k: v.copy() for k, v in self.params.items()},
                       {k: v.copy() for k, v in self.bn_stats.items()})

    def _check_input(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 3:
            x = x[None, ..., None]
        elif x.ndim == 4:
            x = x[None]
        if x.ndim != 5 or x.shape[-1] != self.cfg.input_channels:
            raise NetError(f"expected (B,X,Y,Z,{self.cfg.input_channels}) input, got {x.shape}")
        div = self.cfg.divisor
        if any(s % div for s in x.shape[1:4]):
            raise NetError(f"spatial dims {x.shape[1:4]} must be divisible by {div}")
        return x

    def _block(self, name, x, has_bn, train, cache):
        y = conv3d_forward(x, self.params[f"{name}.W"], self.params[f"{name}.b"])
        bn_cache = None
        if has_bn:
            y, bn_cache = batch_norm_forward(
                y, self.params[f"{name}.gamma"], self.params[f"{name}.beta"],
                self.bn_stats[f"{name}.mean"], self.bn_stats[f"{name}.var"], train)
        if cache is not None:
            cache.entries.append(("conv", name, x, bn_cache, y > 0))
        return np.maximum(y, 0.0)

    def forward(self, x, mode: str = "eval", keep_cache: Optional[bool] = None):
        """Return ``(probs, cache)``; probs has shape (B, X, Y, Z, classes).

        ``mode="train"`` uses batch statistics and updates the running ones.
        A cache is kept in train mode, or in eval mode when ``keep_cache``.
        """
        if mode not in ("train", "eval"):
            raise NetError(f"mode must be 'train' or 'eval', got {mode!r}")
        train = mode == "train"
        keep = train if keep_cache is None else keep_cache
        cache = ForwardCache(version=self.version) if keep else None
        h = self._check_input(x)
        layers = self.cfg.conv_layers()
        n_enc = len(self.cfg.encoder_widths)
        for i, (name, _, _, has_bn) in enumerate(layers[:n_enc]):
            h = self._block(name, h, has_bn, train, cache)
            if i < n_enc - 1:
                h, idx = maxpool_forward(h)
                if cache is not None:
                    cache.entries.append(("pool", idx))
        for name, _, _, has_bn in layers[n_enc:-1]:
            h = upsample_forward(h)
            if cache is not None:
                cache.entries.append(("up",))
            h = self._block(name, h, has_bn, train, cache)
        if cache is not None:
            cache.entries.append(("head", h))
        z = conv3d_forward(h, self.params["head.W"], self.params["head.b"])
        p = sigmoid(z)
        if cache is not None:
            cache.output = p
        return p, cache

    def predict(self, x) -> np.ndarray:
        return self.forward(x, "eval", keep_cache=False)[0]

    def backward(self, cache: Optional[ForwardCache], dp: np.ndarray) -> Dict[str, np.ndarray]:
        """Gradients of the loss for every parameter given ``dL/dp``."""
        if cache is None or cache.output is None:
            raise NetError("backward needs the cache of a forward pass")
        if cache.version != self.version:
            raise NetError("stale cache: parameters changed since the forward pass")
        dp = np.asarray(dp, dtype=np.float64)
        if dp.shape != cache.output.shape:
            raise NetError(f"upstream gradient shape {dp.shape} != output shape {cache.output.shape}")
        grads: Dict[str, np.ndarray] = {}
        p = cache.output
        dz = dp * p * (1 - p)
        entries = list(cache.entries)
        _, h = entries.pop()
        dh, grads["head.W"], grads["head.b"] = conv3d_backward(h, self.params["head.W"], dz)
        for entry in reversed(entries):
            kind = entry[0]
            if kind == "conv":
                _, name, x, bn_cache, active = entry
                dy = dh * active
                if bn_cache is not None:
                    dy, grads[f"{name}.gamma"], grads[f"{name}.beta"] = batch_norm_backward(dy, bn_cache)
                dh, grads[f"{name}.W"], grads[f"{name}.b"] = conv3d_backward(x, self.params[f"{name}.W"], dy)
            elif kind == "pool":
                dh = maxpool_backward(dh, entry[1])
            else:
                dh = upsample_backward(dh)
        return {k: grads[k] for k in self.params}

    def apply_gradients(self, state: "AdadeltaState", grads: Dict[str, np.ndarray]) -> None:
        adadelta_step(state, self.params, grads)
        self.version += 1

    def n_params(self) -> int:
        return int(sum(v.size for v in self.params.values()))


# -- optimiser ----------------------------------------------------------------

@dataclass
class AdadeltaState:
    rho: float = 0.95
    eps: float = 1e-8
    lr: float = 1.0
    eg2: Dict[str, np.ndarray] = field(default_factory=dict)
    edx2: Dict[str, np.ndarray] = field(default_factory=dict)


class NonFiniteGradient(FloatingPointError):
    pass


def adadelta_step(state: AdadeltaState, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray]) -> None:
    """One in-place ADADELTA update of ``params`` and the accumulators."""
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient for {k}; step rejected")
        if params[k].shape != g.shape:
            raise NetError(f"gradient shape {g.shape} != parameter shape {params[k].shape} for {k}")
    rho, eps = state.rho, state.eps
    for k, g in grads.items():
        eg2 = state.eg2.setdefault(k, np.zeros_like(g))
        edx2 = state.edx2.setdefault(k, np.zeros_like(g))
        eg2 *= rho
        eg2 += (1 - rho) * g * g
        dx = -np.sqrt(edx2 + eps) / np.sqrt(eg2 + eps) * g
        edx2 *= rho
        edx2 += (1 - rho) * dx * dx
        params[k] += state.lr * dx


# -- checkpoint ---------------------------------------------------------------

CKPT_MAGIC = b"CNET"
CKPT_VERSION = 1


def save_checkpoint(path: Union[str, Path], net: Network) -> None:
    """Header ``"CNET" | version u32 | config length u32 | config JSON`` then
    every parameter and BN statistic as little-endian float64 in declaration order."""
    cfg = net.cfg.to_json().encode()
    parts = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(cfg)), cfg]
    for arrays in (net.params, net.bn_stats):
        for v in arrays.values():
            parts.append(np.ascontiguousarray(v, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path: Union[str, Path]) -> Network:
    buf = Path(path).read_bytes()
    if buf[:4] != CKPT_MAGIC:
        raise NetError(f"{path}: not a CNET checkpoint")
    version, n = struct.unpack_from("<II", buf, 4)
    if version != CKPT_VERSION:
        raise NetError(f"{path}: unsupported checkpoint version {version}")
    cfg = NetworkConfig.from_json(buf[12:12 + n].decode())
    net = Network(cfg)
    offset = 12 + n
    for arrays in (net.params, net.bn_stats):
        for k, v in arrays.items():
            size = v.size * 8
            if offset + size > len(buf):
                raise NetError(f"{path}: truncated checkpoint")
            arrays[k] = np.frombuffer(buf, dtype="<f8", count=v.size, offset=offset).reshape(v.shape).copy()
            offset += size
    if offset != len(buf):
        raise NetError(f"{path}: trailing bytes in checkpoint")
    return net


def params_equal(a: Network, b: Network) -> bool:
    return all(np.array_equal(a.params[k], b.params[k]) for k in a.params) and \
        all(np.array_equal(a.bn_stats[k], b.bn_stats[k]) for k in a.bn_stats)


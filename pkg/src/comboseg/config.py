"""Run configuration: plain-text ``key = value`` files plus flag overrides."""
from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Tuple

from . import losses as L


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    # data
    data: str = "data"
    test_data: str = ""
    out: str = "out"
    checkpoint: str = ""
    n_cases: int = 4
    dims: Tuple[int, int, int] = (32, 32, 32)
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    organs: int = 3
    presence_prob: float = 1.0
    noise_sigma: float = 0.05
    blur_sigma: float = 1.0
    # loss
    loss: str = "combo"
    alpha: float = 0.5
    beta: float = 0.5
    smooth: float = 1.0
    gamma: float = 2.0
    alpha_f: float = 0.25
    beta_f: float = 1.0
    # network and optimizer
    widths: Tuple[int, ...] = (8, 16)
    batch_norm: bool = True
    rho: float = 0.95
    eps: float = 1e-8
    lr: float = 1.0
    # training schedule
    steps: int = 500
    batch_size: int = 2
    window: Tuple[int, int, int] = (16, 16, 16)
    stride: Tuple[int, int, int] = (8, 8, 8)
    threshold: float = 0.5
    n_per_organ: int = 8
    n_background: int = 8
    n_random: int = 0
    normalize_windows: bool = False
    val_cases: int = 0
    eval_every: int = 0
    seed: int = 0
    # sweep and gradcheck
    betas: Tuple[float, ...] = (0.3, 0.5, 0.7, 0.9)
    seeds: Tuple[int, ...] = (0,)
    jobs: int = 1
    tolerance: float = 1e-4
    param_tolerance: float = 1e-3
    mutate: str = ""

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.loss not in L.LOSS_NAMES:
            raise ConfigError(f"unknown loss {self.loss!r}; choose from {', '.join(L.LOSS_NAMES)}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}")
        if not 0.0 <= self.beta <= 1.0:
            raise ConfigError(f"beta must lie in [0, 1], got {self.beta}")
        if any(not 0.0 <= b <= 1.0 for b in self.betas):
            raise ConfigError("every sweep beta must lie in [0, 1]")
        if not 0.0 < self.threshold < 1.0:
            raise ConfigError(f"threshold must lie in (0, 1), got {self.threshold}")
        if not 0.0 <= self.presence_prob <= 1.0:
            raise ConfigError("presence_prob must lie in [0, 1]")
        for name in ("steps", "n_cases", "val_cases", "eval_every", "n_per_organ", "n_background", "n_random"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        for name in ("organs", "batch_size", "jobs"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be at least 1")
        if not self.widths or any(w < 1 for w in self.widths):
            raise ConfigError("widths must be a non-empty list of positive ints")
        div = 2 ** (len(self.widths) - 1)
        if any(w < 1 or w % div for w in self.window):
            raise ConfigError(f"window {self.window} must be divisible by {div} for {len(self.widths)} stages")
        if any(s < 1 for s in self.stride) or any(d < 1 for d in self.dims):
            raise ConfigError("stride and dims must be positive")
        if any(s <= 0 for s in self.spacing):
            raise ConfigError("spacing must be positive")
        if self.mutate not in ("", "combo-sign"):
            raise ConfigError(f"unknown mutation {self.mutate!r}")

    def loss_params(self) -> Dict[str, float]:
        return {"alpha": self.alpha, "beta": self.beta, "smooth": self.smooth, "gamma": self.gamma,
                "alpha_f": self.alpha_f, "beta_f": self.beta_f}

    def header_lines(self) -> List[str]:
        """Every field as ``key=value`` followed by the build id."""
        lines = [f"{f.name}={format_value(getattr(self, f.name))}" for f in fields(self)]
        return lines + [f"build={build_id()}"]


def format_value(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(format_value(x) for x in v)
    return repr(v) if isinstance(v, float) else str(v)


def _field_types() -> Dict[str, Any]:
    defaults = RunConfig.__dataclass_fields__
    return {name: f.default for name, f in defaults.items()}


def parse_value(key: str, text: str) -> Any:
    """Coerce ``text`` to the type of the field's default."""
    types = _field_types()
    if key not in types:
        raise ConfigError(f"unknown config key {key!r}")
    default = types[key]
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if isinstance(default, tuple):
            items = [x for x in text.replace(" ", "").split(",") if x]
            kind = type(default[0]) if default else float
            vals = tuple(kind(x) for x in items)
            if len(default) == 3 and key in ("dims", "spacing", "window", "stride") and len(vals) == 1:
                vals = vals * 3
            if key in ("dims", "spacing", "window", "stride") and len(vals) != 3:
                raise ValueError(f"{key} needs 1 or 3 values")
            return vals
        return type(default)(text)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {text!r} ({exc})") from None


def read_config_file(path) -> Dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment."""
    out: Dict[str, str] = {}
    for n, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected key = value")
        k, v = line.split("=", 1)
        out[k.strip().replace("-", "_")] = v.strip()
    return out


def build_config(file_values: Optional[Mapping[str, str]] = None,
                 overrides: Optional[Mapping[str, str]] = None) -> RunConfig:
    """Defaults, then the config file, then flag overrides; validated once."""
    merged: Dict[str, Any] = {}
    for source in (file_values or {}), (overrides or {}):
        for k, v in source.items():
            merged[k] = parse_value(k, v) if isinstance(v, str) else v
    return RunConfig(**merged)


def field_names() -> Iterable[str]:
    return [f.name for f in fields(RunConfig)]


_BUILD_ID: Optional[str] = None


def build_id() -> str:
    """Git-style id: SHA-1 over the package sources, so it changes with the code."""
    global _BUILD_ID
    if _BUILD_ID is None:
        h = hashlib.sha1()
        root = Path(__file__).parent
        for p in sorted(root.glob("*.py")):
            h.update(p.name.encode())
            h.update(p.read_bytes())
        _BUILD_ID = h.hexdigest()[:12]
    return _BUILD_ID


def replace(cfg: RunConfig, **kw) -> RunConfig:
    return dataclasses.replace(cfg, **kw)

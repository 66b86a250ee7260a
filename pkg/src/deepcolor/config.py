"""Run configuration: a flat ``key = value`` text file plus flag overrides (flags win)."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Any, Mapping, Optional

from .loss import LossConfig
from .net import ConfigError, NetConfig
from .postprocess import PostConfig
from .synth import AugmentConfig


@dataclass(frozen=True)
class RunConfig:
    # network
    depth: int = 3
    base_channels: int = 8
    colors: int = 9
    input_channels: int = 1
    use_batchnorm: bool = False
    # coloring loss
    margin: float = 21.0
    mu: float = 7.0
    halo_metric: str = "euclidean"
    background_weight: float = 1.0
    # postprocessing
    tau: int = 0
    rho: float = 0.0
    merge_metric: str = "min_set_distance"
    connectivity: int = 4
    # optimization
    lr: float = 1e-3
    lr_min: float = 0.0  # > 0 enables cosine decay from lr down to lr_min over iters
    iters: int = 1000
    batch: int = 8
    seed: int = 0
    patch: int = 0
    rotate: bool = True
    flip: bool = True
    checkpoint_every: int = 0
    # data
    train_dir: str = ""
    val_dir: str = ""

    def net(self) -> NetConfig:
        return NetConfig(self.depth, self.base_channels, self.colors, self.input_channels,
                         self.use_batchnorm).validate()

    def loss(self) -> LossConfig:
        return LossConfig(margin=self.margin, halo_weight=self.mu, colors=self.colors,
                          halo_metric=self.halo_metric, background_weight=self.background_weight)

    def post(self) -> PostConfig:
        return PostConfig(self.tau, self.rho, self.merge_metric, self.connectivity)

    def augment(self) -> AugmentConfig:
        return AugmentConfig(patch=(self.patch, self.patch) if self.patch else None,
                             rotate=self.rotate, flip=self.flip)

    def validate(self) -> "RunConfig":
        self.net()
        try:
            self.loss()
            self.post()
        except ValueError as e:
            raise ConfigError(str(e)) from None
        if self.lr <= 0 or self.iters < 0 or self.batch < 1:
            raise ConfigError(f"need lr > 0, iters >= 0, batch >= 1 (got {self.lr}, {self.iters}, {self.batch})")
        if not 0 <= self.lr_min <= self.lr:
            raise ConfigError(f"need 0 <= lr_min <= lr, got lr_min={self.lr_min}")
        if self.patch and self.patch % 2 ** self.depth:
            raise ConfigError(f"patch {self.patch} must be divisible by 2**depth = {2 ** self.depth}")
        return self

    def lr_at(self, iteration: int) -> float:
        """Learning rate for step ``iteration`` (0-based)."""
        if not self.lr_min or self.iters <= 1:
            return self.lr
        t = min(iteration, self.iters - 1) / (self.iters - 1)
        return self.lr_min + 0.5 * (self.lr - self.lr_min) * (1.0 + math.cos(math.pi * t))

    def to_dict(self) -> dict:
        return asdict(self)

    def with_overrides(self, overrides: Mapping[str, Any]) -> "RunConfig":
        clean = {k: v for k, v in overrides.items() if v is not None}
        return replace(self, **_coerce(clean))

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "RunConfig":
        return cls(**_coerce(d))

    @classmethod
    def load(cls, path, overrides: Optional[Mapping[str, Any]] = None) -> "RunConfig":
        cfg = cls.from_dict(parse_kv(Path(path).read_text()))
        return cfg.with_overrides(overrides or {})


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _to_bool(v) -> bool:
    if isinstance(v, bool):
        return v
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {v!r}")


def _coerce(d: Mapping[str, Any]) -> dict:
    out = {}
    for k, v in d.items():
        key = k.replace("-", "_")
        if key not in _FIELDS:
            raise ConfigError(f"unknown config key {k!r}")
        kind = type(_FIELDS[key].default)
        try:
            out[key] = _to_bool(v) if kind is bool else kind(v)
        except (TypeError, ValueError):
            raise ConfigError(f"config key {k!r}: cannot read {v!r} as {kind.__name__}") from None
    return out


def parse_kv(text: str) -> dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment; blank lines ignored."""
    out = {}
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected 'key = value', got {raw!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def format_kv(d: Mapping[str, Any]) -> str:
    return "".join(f"{k} = {v}\n" for k, v in d.items())

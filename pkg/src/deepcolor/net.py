"""U-Net style coloring network.

Topology for ``depth = d`` and ``base_channels = b`` (channels ``c_l = b * 2**l``)::

    stem      conv3x3 in -> c_0, ReLU                         (full resolution)
    down_l    conv3x3 stride 2, c_l -> c_{l+1}, ReLU          l = 0 .. d-1
    bottom    conv3x3 c_d -> c_d, ReLU
    up_l      convT 2x2 stride 2, c_{l+1} -> c_l, ReLU        l = d-1 .. 0
    dec_l     concat(up_l, skip_l) -> conv3x3 2c_l -> c_l, ReLU
    head      conv1x1 c_0 -> colors, channel softmax

``skip_l`` is the stem output for ``l = 0`` and ``down_{l-1}`` otherwise.
Channel 0 of the output is the background color.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .rng import make_rng
from .tensor import Tensor


class ConfigError(ValueError):
    code = "E_CONFIG"


@dataclass(frozen=True)
class NetConfig:
    depth: int = 3
    base_channels: int = 8
    colors: int = 9
    input_channels: int = 1
    use_batchnorm: bool = False
    kernel_size: int = 3

    def validate(self) -> "NetConfig":
        if self.depth < 1:
            raise ConfigError(f"depth must be >= 1, got {self.depth}")
        if self.base_channels < 1:
            raise ConfigError(f"base_channels must be >= 1, got {self.base_channels}")
        if self.colors < 2:
            raise ConfigError(f"colors must be >= 2, got {self.colors}")
        if self.input_channels < 1:
            raise ConfigError(f"input_channels must be >= 1, got {self.input_channels}")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigError(f"kernel_size must be odd and positive, got {self.kernel_size}")
        return self

    def channels(self, level: int) -> int:
        return self.base_channels * 2 ** level

    def check_input(self, h: int, w: int) -> None:
        q = 2 ** self.depth
        if h % q or w % q:
            raise T.ShapeError(f"input size {h}x{w} must be divisible by 2**depth = {q}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


@dataclass
class NetworkParams:
    """Named trainable tensors plus non-trainable buffers (batch-norm statistics)."""

    config: NetConfig
    tensors: "OrderedDict[str, Tensor]" = field(default_factory=OrderedDict)
    buffers: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)

    def count(self) -> int:
        return sum(t.data.size for t in self.tensors.values())

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]


def _layers(cfg: NetConfig) -> list[tuple[str, str, int, int, int]]:
    """(name, kind, c_in, c_out, kernel) in forward order."""
    k = cfg.kernel_size
    c = cfg.channels
    out = [("stem", "conv", cfg.input_channels, c(0), k)]
    for lv in range(cfg.depth):
        out.append((f"down{lv}", "conv", c(lv), c(lv + 1), k))
    out.append(("bottom", "conv", c(cfg.depth), c(cfg.depth), k))
    for lv in reversed(range(cfg.depth)):
        out.append((f"up{lv}", "convT", c(lv + 1), c(lv), 2))
        out.append((f"dec{lv}", "conv", 2 * c(lv), c(lv), k))
    out.append(("head", "conv", c(0), cfg.colors, 1))
    return out


def build(config: NetConfig, seed: int) -> NetworkParams:
    """He-initialized parameters (normal, std = sqrt(2 / fan_in)); biases start at zero."""
    config.validate()
    rng = make_rng(seed, "net-init")
    params = NetworkParams(config)
    for name, kind, cin, cout, k in _layers(config):
        if kind == "conv":
            shape = (cout, cin, k, k)
            fan_in = cin * k * k
        else:
            shape = (cin, cout, k, k)
            fan_in = cin * k * k // 4
        params.tensors[f"{name}.weight"] = Tensor(rng.normal(0.0, T.he_std(fan_in), size=shape),
                                                  requires_grad=True)
        params.tensors[f"{name}.bias"] = Tensor(np.zeros(cout), requires_grad=True)
        if config.use_batchnorm and name != "head":
            params.tensors[f"{name}.bn_gamma"] = Tensor(np.ones(cout), requires_grad=True)
            params.tensors[f"{name}.bn_beta"] = Tensor(np.zeros(cout), requires_grad=True)
            params.buffers[f"{name}.bn_mean"] = np.zeros(cout)
            params.buffers[f"{name}.bn_var"] = np.ones(cout)
    return params


def _block(params: NetworkParams, name: str, y: Tensor, training: bool,
           record: Optional[list]) -> Tensor:
    if params.config.use_batchnorm:
        y = T.batch_norm(y, params[f"{name}.bn_gamma"], params[f"{name}.bn_beta"],
                         params.buffers[f"{name}.bn_mean"], params.buffers[f"{name}.bn_var"],
                         training)
    if record is not None:
        record.append(y.data)
    return T.relu(y)


def forward(params: NetworkParams, image, training: bool = False,
            record: Optional[list] = None) -> Tensor:
    """Map an image (C_in,H,W) or batch (N,C_in,H,W) to color probabilities of the same spatial size.

    ``record``, if given, receives every pre-activation array (used to stay
    clear of ReLU kinks in gradient checks).
    """
    cfg = params.config
    x = T.as_tensor(image)
    if x.ndim not in (3, 4):
        raise T.ShapeError(f"forward: expected (C,H,W) or (N,C,H,W), got {x.shape}")
    cin = x.shape[-3]
    if cin != cfg.input_channels:
        raise T.ShapeError(f"forward: image has {cin} channels, network expects {cfg.input_channels}")
    cfg.check_input(*x.shape[-2:])
    pad = cfg.kernel_size // 2

    def conv(name, inp, stride=1, p=pad):
        return T.conv2d(inp, params[f"{name}.weight"], stride=stride, padding=p,
                        bias=params[f"{name}.bias"])

    h = _block(params, "stem", conv("stem", x), training, record)
    skips = [h]
    for lv in range(cfg.depth):
        h = _block(params, f"down{lv}", conv(f"down{lv}", h, stride=2), training, record)
        skips.append(h)
    h = _block(params, "bottom", conv("bottom", h), training, record)
    for lv in reversed(range(cfg.depth)):
        up = T.conv_transpose2d(h, params[f"up{lv}.weight"], stride=2, bias=params[f"up{lv}.bias"])
        up = _block(params, f"up{lv}", up, training, record)
        h = _block(params, f"dec{lv}", conv(f"dec{lv}", T.concat_channels(up, skips[lv])),
                   training, record)
    logits = conv("head", h, p=0)
    return T.channel_softmax(logits)


def receptive_field(config: NetConfig) -> tuple[int, int]:
    """Extent ``(before, after)`` of input pixels that can reach one output pixel.

    An output pixel at row ``r`` depends only on input rows in
    ``[r - before, r + after]`` (same for columns). Each feature map is
    tracked as (jump, before, after): a k x k conv at jump J widens both
    sides by ``(k // 2) * J``; a 2x2/stride-2 transposed conv from jump J
    to J/2 widens only ``before`` by J/2; concatenation takes the max.
    """
    config.validate()
    r = config.kernel_size // 2
    jump, a, b = 1, r, r
    skips = [(jump, a, b)]
    for _ in range(config.depth):
        a, b = a + r * jump, b + r * jump
        jump *= 2
        skips.append((jump, a, b))
    a, b = a + r * jump, b + r * jump
    for lv in reversed(range(config.depth)):
        jump //= 2
        a = a + jump
        _, sa, sb = skips[lv]
        a, b = max(a, sa), max(b, sb)
        a, b = a + r * jump, b + r * jump
    return a, b

"""Convolutional gate networks.

Each gate of the recurrent cell is a small CNN: a 3x3 head conv, a stack of
residual body blocks, and a 3x3 tail conv followed by the gate activation.
All convs are stride 1 with same padding, so H and W are preserved.

Two body block kinds are available:

``plain``
    ``x + relu(conv3x3(x))``
``distill``
    a lightweight channel-split block: after a first conv, a quarter of the
    channels is kept as a shortcut, the rest goes through another conv, and
    the two parts are concatenated and fused by a 1x1 conv before the
    residual add.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

KERNEL = 3
BLOCK_KINDS = ("plain", "distill")
FINAL_ACTIVATIONS = ("sigmoid", "relu", "tanh", "none")


class ConfigError(ValueError):
    """Invalid configuration value."""


@dataclass(frozen=True)
class ConvBlockSpec:
    in_channels: int
    hidden_channels: int = 16
    out_channels: int = 1
    num_blocks: int = 3
    block_kind: str = "plain"
    final_activation: str = "none"

    def validate(self) -> None:
        for field in ("in_channels", "hidden_channels", "out_channels", "num_blocks"):
            v = getattr(self, field)
            if not isinstance(v, (int, np.integer)) or v < 1:
                raise ConfigError(f"{field} must be an integer >= 1, got {v!r}")
        if self.block_kind not in BLOCK_KINDS:
            raise ConfigError(f"block_kind must be one of {BLOCK_KINDS}, got {self.block_kind!r}")
        if self.final_activation not in FINAL_ACTIVATIONS:
            raise ConfigError(
                f"final_activation must be one of {FINAL_ACTIVATIONS}, got {self.final_activation!r}"
            )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ConvBlockSpec":
        return cls(**d)


def distilled_channels(hidden: int) -> int:
    return max(1, hidden // 4)


def parameter_count(spec: ConvBlockSpec) -> int:
    """Closed-form number of scalar parameters for ``spec``."""
    k2 = KERNEL * KERNEL
    h = spec.hidden_channels
    head = spec.in_channels * h * k2 + h
    tail = h * spec.out_channels * k2 + spec.out_channels
    if spec.block_kind == "plain":
        block = h * h * k2 + h
    else:
        r = h - distilled_channels(h)
        block = (h * h * k2 + h) + (r * r * k2 + r) + (h * h + h)
    return head + (spec.num_blocks - 1) * block + tail


class Backbone:
    """A gate CNN with named parameters.

    ``name`` identifies the gate (``reset``, ``denoise``, ...) in error
    messages.
    """

    def __init__(self, spec: ConvBlockSpec, params: Dict[str, Tensor], name: str = "backbone"):
        self.spec = spec
        self.params = params
        self.name = name

    @property
    def parameters(self) -> List[Tensor]:
        return list(self.params.values())

    def named_parameters(self):
        return list(self.params.items())

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def forward(self, x: Tensor) -> Tensor:
        spec = self.spec
        if x.ndim != 4 or x.shape[1] != spec.in_channels:
            raise ShapeError(
                f"{self.name} gate expects [B, {spec.in_channels}, H, W] input, got {x.shape}"
            )
        p = self.params
        pad = KERNEL // 2
        h = T.relu(T.conv2d(x, p["head.w"], p["head.b"], 1, pad))
        for i in range(1, spec.num_blocks):
            pre = f"block{i}."
            if spec.block_kind == "plain":
                h = h + T.relu(T.conv2d(h, p[pre + "conv.w"], p[pre + "conv.b"], 1, pad))
            else:
                d = distilled_channels(spec.hidden_channels)
                c1 = T.relu(T.conv2d(h, p[pre + "conv1.w"], p[pre + "conv1.b"], 1, pad))
                kept = T.channel_slice(c1, 0, d)
                rest = T.channel_slice(c1, d, spec.hidden_channels)
                c2 = T.relu(T.conv2d(rest, p[pre + "conv2.w"], p[pre + "conv2.b"], 1, pad))
                fused = T.conv2d(T.concat([kept, c2]), p[pre + "fuse.w"], p[pre + "fuse.b"], 1, 0)
                h = h + fused
        out = T.conv2d(h, p["tail.w"], p["tail.b"], 1, pad)
        return T.activation(spec.final_activation, out)

    __call__ = forward

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        for k, p in self.params.items():
            arr = np.asarray(state[k])
            if arr.shape != p.shape:
                raise ShapeError(f"{self.name}.{k}: checkpoint shape {arr.shape} != {p.shape}")
            p.data = arr.astype(p.dtype).copy()

    def spec_json(self) -> str:
        return json.dumps(self.spec.to_dict(), sort_keys=True)


def _conv_shapes(spec: ConvBlockSpec):
    k = KERNEL
    h = spec.hidden_channels
    shapes = [("head", (h, spec.in_channels, k, k))]
    for i in range(1, spec.num_blocks):
        if spec.block_kind == "plain":
            shapes.append((f"block{i}.conv", (h, h, k, k)))
        else:
            r = h - distilled_channels(h)
            shapes.append((f"block{i}.conv1", (h, h, k, k)))
            shapes.append((f"block{i}.conv2", (r, r, k, k)))
            shapes.append((f"block{i}.fuse", (h, h, 1, 1)))
    shapes.append(("tail", (spec.out_channels, h, k, k)))
    return shapes


def build_backbone(spec: ConvBlockSpec, seed: int, dtype=np.float32, name: str = "backbone",
                   rng: Optional[np.random.Generator] = None, tail_gain: float = 1.0,
                   tail_bias: float = 0.0) -> Backbone:
    """Build a backbone with Kaiming (fan-in) normal weights and zero biases.

    ``tail_gain`` scales the last conv's weights and ``tail_bias`` fills its
    bias, which sets where the output activation starts out.
    """
    spec.validate()
    rng = rng if rng is not None else np.random.default_rng(seed)
    params: Dict[str, Tensor] = {}
    for prefix, shape in _conv_shapes(spec):
        fan_in = shape[1] * shape[2] * shape[3]
        w = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
        b = np.zeros(shape[0])
        if prefix == "tail":
            w *= tail_gain
            b[:] = tail_bias
        params[prefix + ".w"] = Tensor(w.astype(dtype), requires_grad=True)
        params[prefix + ".b"] = Tensor(b.astype(dtype), requires_grad=True)
    return Backbone(spec, params, name=name)

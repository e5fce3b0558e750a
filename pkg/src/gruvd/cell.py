"""Recurrent denoising cells.

``GruVdModel.step`` computes, for the current noisy frame ``x``, its noise
std map ``delta`` and the previous output ``y_prev``::

    r = sigmoid_net(concat(delta, |x - y_prev|))          relevance weight
    s = relu_net(concat(r * y_prev, x, delta))            initial denoised frame
    f = sigmoid_net(concat(s, y_prev, r, delta))          fusion weight
    y = (1 - f) * y_prev + f * s

``GruModel`` is the classic convolutional GRU used as an ablation baseline:
the candidate uses tanh and the gates see only ``x`` and ``y_prev``.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import tensor as T
from .backbone import Backbone, ConfigError, ConvBlockSpec, build_backbone
from .tensor import ShapeError, Tensor

Override = Union[float, np.ndarray, Tensor]

TAIL_GAIN = 0.1
TAIL_BIAS_RELU = 0.5


@dataclass
class CellState:
    y_prev: Tensor
    frame_index: int = 0


@dataclass
class CellOutput:
    y: Tensor
    s: Tensor
    r: Tensor
    f: Tensor


@dataclass(frozen=True)
class ModelConfig:
    """Shape of a recurrent denoiser.

    ``update_extra_inputs=False`` drops ``r`` and ``delta`` from the update
    gate input, leaving the GRU-style ``concat(s, y_prev)``.
    """

    kind: str = "gru_vd"
    channels: int = 1
    hidden: int = 16
    blocks: int = 3
    block_kind: str = "plain"
    update_extra_inputs: bool = True

    def validate(self) -> None:
        if self.kind not in ("gru_vd", "gru"):
            raise ConfigError(f"model kind must be 'gru_vd' or 'gru', got {self.kind!r}")
        if self.channels not in (1, 3):
            raise ConfigError(f"channels must be 1 or 3, got {self.channels}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def _tensor(v, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(v, Tensor):
        return v
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(v, dtype=dtype))


def _forced(value: Override, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.broadcast_to(np.asarray(value, dtype=like.dtype), like.shape).copy())


def _expand_delta(delta: Tensor, C: int, gate: str) -> Tensor:
    if delta.shape[1] == C:
        return delta
    if delta.shape[1] == 1:
        return T.repeat_channels(delta, C)
    raise ShapeError(f"{gate} gate input: delta has {delta.shape[1]} channels, expected 1 or {C}")


def _check_frame(x: Tensor, y_prev: Tensor, gate: str) -> None:
    if x.ndim != 4:
        raise ShapeError(f"{gate} gate input: frame must be [B, C, H, W], got {x.shape}")
    if x.shape != y_prev.shape:
        raise ShapeError(f"{gate} gate input: frame {x.shape} does not match carry {y_prev.shape}")


def _check_delta(x: Tensor, delta: Tensor) -> None:
    if delta.ndim != 4 or delta.shape[0] != x.shape[0] or delta.shape[2:] != x.shape[2:]:
        raise ShapeError(f"reset gate input: delta {delta.shape} does not match frame {x.shape}")


class _Model:
    config: ModelConfig
    nets: Dict[str, Backbone]

    @property
    def parameters(self) -> List[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_parameters(self) -> List[Tuple[str, Tensor]]:
        return [(f"{g}.{k}", p) for g, net in self.nets.items() for k, p in net.params.items()]

    def num_parameters(self) -> int:
        return sum(net.num_parameters() for net in self.nets.values())

    def zero_grad(self) -> None:
        for p in self.parameters:
            p.grad = None

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {k: p.data for k, p in self.named_parameters()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        missing = [k for k, _ in self.named_parameters() if k not in state]
        if missing:
            raise ShapeError(f"checkpoint lacks parameters {missing[:4]}")
        for g, net in self.nets.items():
            net.load_state_dict({k[len(g) + 1:]: v for k, v in state.items() if k.startswith(g + ".")})

    @property
    def dtype(self):
        return self.parameters[0].dtype


class GruVdModel(_Model):
    def __init__(self, reset_net: Backbone, denoise_net: Backbone, update_net: Backbone,
                 config: Optional[ModelConfig] = None):
        self.reset_net = reset_net
        self.denoise_net = denoise_net
        self.update_net = update_net
        self.nets = {"reset": reset_net, "denoise": denoise_net, "update": update_net}
        C = reset_net.spec.out_channels
        self.config = config or ModelConfig(
            channels=C,
            hidden=reset_net.spec.hidden_channels,
            blocks=reset_net.spec.num_blocks,
            block_kind=reset_net.spec.block_kind,
            update_extra_inputs=update_net.spec.in_channels == 4 * C,
        )

    @property
    def channels(self) -> int:
        return self.config.channels

    def step(self, x, delta, state: CellState, overrides: Optional[Dict[str, Override]] = None) -> CellOutput:
        return gru_vd_step(self, x, delta, state, overrides)


class GruModel(_Model):
    def __init__(self, reset_net: Backbone, cand_net: Backbone, update_net: Backbone,
                 config: Optional[ModelConfig] = None):
        self.reset_net = reset_net
        self.cand_net = cand_net
        self.update_net = update_net
        self.nets = {"reset": reset_net, "cand": cand_net, "update": update_net}
        C = reset_net.spec.out_channels
        self.config = config or ModelConfig(kind="gru", channels=C, hidden=reset_net.spec.hidden_channels,
                                            blocks=reset_net.spec.num_blocks,
                                            block_kind=reset_net.spec.block_kind)

    @property
    def channels(self) -> int:
        return self.config.channels

    def step(self, x, delta, state: CellState, overrides: Optional[Dict[str, Override]] = None) -> CellOutput:
        return gru_step(self, x, state, overrides)


def gate_specs(config: ModelConfig) -> Dict[str, ConvBlockSpec]:
    """Backbone specs of each gate for ``config``."""
    C = config.channels
    common = dict(hidden_channels=config.hidden, out_channels=C, num_blocks=config.blocks,
                  block_kind=config.block_kind)
    if config.kind == "gru":
        return {
            "reset": ConvBlockSpec(in_channels=2 * C, final_activation="sigmoid", **common),
            "cand": ConvBlockSpec(in_channels=2 * C, final_activation="tanh", **common),
            "update": ConvBlockSpec(in_channels=2 * C, final_activation="sigmoid", **common),
        }
    return {
        "reset": ConvBlockSpec(in_channels=2 * C, final_activation="sigmoid", **common),
        "denoise": ConvBlockSpec(in_channels=3 * C, final_activation="relu", **common),
        "update": ConvBlockSpec(in_channels=(4 if config.update_extra_inputs else 2) * C,
                                final_activation="sigmoid", **common),
    }


def build_model(config: ModelConfig, seed: int, dtype=np.float32) -> Union[GruVdModel, GruModel]:
    config.validate()
    rng = np.random.default_rng(seed)
    nets = []
    for name, spec in gate_specs(config).items():
        # gates start near 0.5 and the ReLU output starts mid-range, away from its dead zone
        bias = TAIL_BIAS_RELU if spec.final_activation == "relu" else 0.0
        nets.append(build_backbone(spec, seed, dtype=dtype, name=name, rng=rng,
                                   tail_gain=TAIL_GAIN, tail_bias=bias))
    cls = GruModel if config.kind == "gru" else GruVdModel
    return cls(*nets, config=config)


def init_state(x0) -> CellState:
    """Initial carry: the first noisy frame itself."""
    x0 = _tensor(x0)
    return CellState(y_prev=Tensor(x0.data.copy()), frame_index=0)


def gru_vd_step(m: GruVdModel, x, delta, state: CellState,
                overrides: Optional[Dict[str, Override]] = None) -> CellOutput:
    """One GRU-VD step. ``overrides`` may pin ``r``, ``s`` or ``f`` to constants (test hook)."""
    overrides = overrides or {}
    y_prev = state.y_prev
    x = _tensor(x, y_prev)
    delta = _tensor(delta, y_prev)
    _check_frame(x, y_prev, "reset")
    _check_delta(x, delta)
    C = x.shape[1]
    if C != m.channels:
        raise ShapeError(f"reset gate input: model expects {m.channels} channels, frame has {C}")
    d = _expand_delta(delta, C, "reset")

    if "r" in overrides:
        r = _forced(overrides["r"], x)
    else:
        r = m.reset_net(T.concat([d, T.abs_(x - y_prev)]))
    marked = r * y_prev
    if "s" in overrides:
        s = _forced(overrides["s"], x)
    else:
        s = m.denoise_net(T.concat([marked, x, d]))
    if "f" in overrides:
        f = _forced(overrides["f"], x)
    else:
        upd = [s, y_prev, r, d] if m.config.update_extra_inputs else [s, y_prev]
        f = m.update_net(T.concat(upd))
    y = (1.0 - f) * y_prev + f * s
    return CellOutput(y=y, s=s, r=r, f=f)


def gru_step(m: GruModel, x, state: CellState,
             overrides: Optional[Dict[str, Override]] = None) -> CellOutput:
    """Classic GRU step with convolutional gates and a tanh candidate."""
    overrides = overrides or {}
    y_prev = state.y_prev
    x = _tensor(x, y_prev)
    _check_frame(x, y_prev, "reset")
    xy = T.concat([x, y_prev])
    r = _forced(overrides["r"], x) if "r" in overrides else m.reset_net(xy)
    s = _forced(overrides["s"], x) if "s" in overrides else m.cand_net(T.concat([x, r * y_prev]))
    f = _forced(overrides["f"], x) if "f" in overrides else m.update_net(xy)
    y = (1.0 - f) * y_prev + f * s
    return CellOutput(y=y, s=s, r=r, f=f)


def run_sequence(m, frames: Sequence[Tuple], state: Optional[CellState] = None,
                 bptt_truncate: Optional[int] = None,
                 overrides: Optional[Dict[str, Override]] = None) -> List[CellOutput]:
    """Thread the carry through ``frames`` (a list of ``(x, delta)`` pairs).

    With ``bptt_truncate=k`` the carry is detached every ``k`` frames, which
    truncates backpropagation through time; ``None`` backpropagates through
    the whole sequence.
    """
    frames = list(frames)
    if not frames:
        raise ValueError("run_sequence needs at least one frame")
    if state is None:
        state = init_state(frames[0][0])
    outputs = []
    for n, (x, delta) in enumerate(frames):
        out = m.step(x, delta, state, overrides)
        outputs.append(out)
        carry = out.y
        if bptt_truncate and (n + 1) % bptt_truncate == 0:
            carry = carry.detach()
        state = CellState(y_prev=carry, frame_index=state.frame_index + 1)
    return outputs


def run_spatial(m, frames: Sequence[Tuple]) -> List[CellOutput]:
    """Each frame processed alone with ``y_prev = x_n`` (no temporal information)."""
    return [m.step(x, delta, init_state(x)) for x, delta in frames]

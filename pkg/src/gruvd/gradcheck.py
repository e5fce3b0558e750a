"""Finite-difference verification of the full recurrent model.

Every parameter of a tiny float64 model is perturbed element by element and
the central difference of the sequence loss is compared with backprop
through the unrolled recurrence.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from . import tensor as T
from .cell import ModelConfig, build_model, run_sequence
from .noise import NoiseParams, add_noise
from .data_io import delta_for
from .tensor import Tensor, no_grad
from .training import sequence_loss


@dataclass
class GradcheckConfig:
    channels: int = 1
    size: int = 6
    hidden: int = 4
    blocks: int = 1
    seq_len: int = 3
    batch: int = 1
    block_kind: str = "plain"
    epsilon: float = 1e-5
    tolerance: float = 1e-4
    seed: int = 0
    w1: float = 0.1
    w2: float = 1.0


@dataclass
class GradcheckResult:
    per_parameter: Dict[str, float] = field(default_factory=dict)
    tolerance: float = 1e-4

    @property
    def max_error(self) -> float:
        return max(self.per_parameter.values())

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance

    def lines(self) -> List[str]:
        out = [f"{name:<28} {err:.3e} {'ok' if err < self.tolerance else 'FAIL'}"
               for name, err in self.per_parameter.items()]
        out.append(f"max relative error {self.max_error:.3e} (tolerance {self.tolerance:g}): "
                   f"{'PASS' if self.passed else 'FAIL'}")
        return out


@contextlib.contextmanager
def broken_sigmoid_gradient():
    """Test hook: make sigmoid's backward rule wrong (drops the ``1 - s`` factor)."""
    def bad_sigmoid(x):
        s = 1.0 / (1.0 + np.exp(-x.data))
        return T._make(s, "sigmoid", (x,), lambda g: (g * s,))

    saved = T._ACTIVATIONS["sigmoid"]
    T._ACTIVATIONS["sigmoid"] = bad_sigmoid
    try:
        yield
    finally:
        T._ACTIVATIONS["sigmoid"] = saved


def make_problem(cfg: GradcheckConfig):
    """Tiny float64 model plus a noisy clip and its clean targets."""
    model = build_model(ModelConfig(channels=cfg.channels, hidden=cfg.hidden, blocks=cfg.blocks,
                                    block_kind=cfg.block_kind), seed=cfg.seed, dtype=np.float64)
    rng = np.random.default_rng(cfg.seed + 1)
    shape = (cfg.batch, cfg.channels, cfg.size, cfg.size)
    params = NoiseParams(0.02, 0.01)
    frames, targets = [], []
    base = rng.uniform(0.1, 0.9, size=shape)
    for t in range(cfg.seq_len):
        clean = np.clip(base + 0.05 * rng.standard_normal(shape), 0, 1)
        noisy = add_noise(params, clean, cfg.seed * 1000 + t)
        frames.append((Tensor(noisy), Tensor(delta_for(params, noisy))))
        targets.append(Tensor(clean))
    return model, frames, targets


def check_model_gradients(cfg: Optional[GradcheckConfig] = None, inject_bug: bool = False) -> GradcheckResult:
    cfg = cfg or GradcheckConfig()
    model, frames, targets = make_problem(cfg)

    def loss_value() -> Tensor:
        outs = run_sequence(model, frames)
        return sequence_loss(outs, targets, cfg.w1, cfg.w2)[0]

    ctx = broken_sigmoid_gradient() if inject_bug else contextlib.nullcontext()
    with ctx:
        model.zero_grad()
        loss = loss_value()
        loss.backward()
        loss.release_graph()

    result = GradcheckResult(tolerance=cfg.tolerance)
    eps = cfg.epsilon
    with no_grad():
        for name, p in model.named_parameters():
            flat = p.data.reshape(-1)
            analytic = p.grad.reshape(-1)
            worst = 0.0
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                fp = loss_value().item()
                flat[i] = orig - eps
                fm = loss_value().item()
                flat[i] = orig
                num = (fp - fm) / (2 * eps)
                a = float(analytic[i])
                worst = max(worst, abs(a - num) / max(abs(a), abs(num), 1e-8))
            result.per_parameter[name] = worst
    return result

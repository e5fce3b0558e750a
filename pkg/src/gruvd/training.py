"""Loss, optimizer and the BPTT training loop."""
from __future__ import annotations

import csv
import json
import logging
import math
import struct
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .backbone import ConfigError
from .cell import ModelConfig, build_model, run_sequence
from .data_io import SequenceBatch, make_batch
from .noise import SensorProfile
from .tensor import ShapeError, Tensor, read_tensor, write_tensor

log = logging.getLogger(__name__)


class NumericalError(RuntimeError):
    """Training produced a non-finite loss or gradient."""


@dataclass
class TrainConfig:
    seq_len: int = 8
    patch: int = 32
    batch: int = 4
    lr0: float = 1e-3
    lr_decay_every: int = 1500
    lr_decay_factor: float = 10.0
    w1: float = 0.1
    w2: float = 1.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    max_epochs: int = 2000
    grad_clip: Optional[float] = 10.0
    bptt_truncate: Optional[int] = None
    checkpoint_every: int = 0
    dtype: str = "float32"

    def validate(self) -> None:
        for name in ("seq_len", "patch", "batch", "lr_decay_every", "max_epochs"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if not (self.lr0 > 0 and self.lr_decay_factor > 0):
            raise ConfigError("lr0 and lr_decay_factor must be positive")
        if self.w1 < 0 or self.w2 < 0 or self.w1 + self.w2 <= 0:
            raise ConfigError(f"loss weights must be >= 0 with a positive sum, got w1={self.w1}, w2={self.w2}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown TrainConfig fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    loss_fusion: float
    loss_init: float
    lr: float
    seconds: float


@dataclass
class TrainReport:
    rows: List[EpochRecord] = field(default_factory=list)

    @property
    def losses(self) -> List[float]:
        return [r.loss for r in self.rows]

    def write_csv(self, path, timing: bool = True) -> None:
        """``timing=False`` leaves the seconds column blank so the file is reproducible."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "loss", "loss_fusion", "loss_init", "lr", "seconds"])
            for r in self.rows:
                w.writerow([r.epoch, repr(r.loss), repr(r.loss_fusion), repr(r.loss_init), repr(r.lr),
                            f"{r.seconds:.6f}" if timing else ""])

    @classmethod
    def read_csv(cls, path) -> "TrainReport":
        rows = []
        with open(path, newline="") as fh:
            for rec in csv.DictReader(fh):
                rows.append(EpochRecord(int(rec["epoch"]), float(rec["loss"]), float(rec["loss_fusion"]),
                                        float(rec["loss_init"]), float(rec["lr"]), float(rec["seconds"] or 0.0)))
        return cls(rows)


# -- loss -----------------------------------------------------------------

def weighted_l1_loss(y: Tensor, s: Tensor, y_true: Tensor, w1: float, w2: float):
    """``w1 * mean|y - y_true| + w2 * mean|s - y_true|``.

    Returns ``(loss, fusion_term, init_term)``; the terms are unweighted means.
    """
    if not (y.shape == s.shape == y_true.shape):
        raise ShapeError(f"loss operands disagree: y {y.shape}, s {s.shape}, target {y_true.shape}")
    fusion = T.mean(T.abs_(y - y_true))
    init = T.mean(T.abs_(s - y_true))
    return T.scale(fusion, w1) + T.scale(init, w2), fusion, init


def sequence_loss(outputs, targets: Sequence[Tensor], w1: float, w2: float):
    """Weighted loss averaged over every frame of the sequence."""
    total = fus = ini = None
    for out, tgt in zip(outputs, targets):
        l, f, i = weighted_l1_loss(out.y, out.s, tgt, w1, w2)
        total = l if total is None else total + l
        fus = f.item() if fus is None else fus + f.item()
        ini = i.item() if ini is None else ini + i.item()
    n = len(outputs)
    return T.scale(total, 1.0 / n), fus / n, ini / n


# -- optimizer ---------------------------------------------------------------

@dataclass
class AdamState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], moments: AdamState, t: int,
              lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One bias-corrected Adam update, in place on ``params`` and ``moments``."""
    if t < 1:
        raise ValueError(f"Adam step index must be >= 1, got {t}")
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for k, p in params.items():
        g = grads[k]
        if k not in moments.m:
            moments.m[k] = np.zeros_like(p)
            moments.v[k] = np.zeros_like(p)
        m, v = moments.m[k], moments.v[k]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p -= (lr * (m / bc1) / (np.sqrt(v / bc2) + eps)).astype(p.dtype, copy=False)
    moments.t = t


def learning_rate(cfg: TrainConfig, epoch: int) -> float:
    return cfg.lr0 / cfg.lr_decay_factor ** (epoch // cfg.lr_decay_every)


def clip_grad_norm(grads: Dict[str, np.ndarray], max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most ``max_norm``."""
    total = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))
    if total > max_norm:
        c = max_norm / (total + 1e-12)
        for g in grads.values():
            g *= c
    return total


# -- data ----------------------------------------------------------------

class SyntheticProvider:
    """Training batches sampled from clean scenes; ``batch(epoch)`` is a pure function of ``(seed, epoch)``."""

    def __init__(self, scenes: Sequence[np.ndarray], profile: SensorProfile, iso_choices: Sequence[int],
                 crop: int, seq_len: int, batch: int, seed: int, dtype=np.float32):
        self.scenes = list(scenes)
        self.profile = profile
        self.iso_choices = list(iso_choices)
        self.crop = crop
        self.seq_len = seq_len
        self.batch_size = batch
        self.seed = seed
        self.dtype = dtype

    def batch(self, epoch: int) -> SequenceBatch:
        seed = int(np.random.SeedSequence([self.seed, epoch]).generate_state(1, np.uint64)[0])
        return make_batch(self.scenes, self.profile, self.iso_choices, self.crop, self.seq_len, seed,
                          batch=self.batch_size, dtype=self.dtype)


# -- checkpoints ---------------------------------------------------------------

PARAM_MAGIC = b"GVTP"


def _write_table(path, arrays: Dict[str, np.ndarray], header: dict) -> None:
    """Named tensor table: magic, u32 JSON length, JSON header, then tensors in name order."""
    names = list(arrays)
    meta = dict(header, names=names)
    blob = json.dumps(meta, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(PARAM_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for n in names:
            write_tensor(fh, arrays[n])


def _read_table(path) -> Tuple[Dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != PARAM_MAGIC:
            raise ValueError(f"{path}: bad parameter-table magic {magic!r} at offset 0")
        (n,) = struct.unpack("<I", fh.read(4))
        meta = json.loads(fh.read(n))
        arrays = {name: read_tensor(fh).data for name in meta["names"]}
    return arrays, meta


def save_checkpoint(ckpt_dir, model, cfg: Optional[TrainConfig] = None, moments: Optional[AdamState] = None,
                    epoch: int = 0, report: Optional[TrainReport] = None) -> Path:
    d = Path(ckpt_dir)
    d.mkdir(parents=True, exist_ok=True)
    specs = {g: net.spec.to_dict() for g, net in model.nets.items()}
    _write_table(d / "params.gvtp", model.state_dict(), {"model": model.config.to_dict(), "gates": specs})
    if moments is not None:
        _write_table(d / "adam_m.gvtp", moments.m, {})
        _write_table(d / "adam_v.gvtp", moments.v, {})
    if cfg is not None:
        (d / "train_config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    state = {"epoch": epoch, "adam_t": moments.t if moments is not None else 0}
    (d / "state.json").write_text(json.dumps(state, sort_keys=True) + "\n")
    if report is not None:
        report.write_csv(d / "report.csv", timing=False)
    return d


def load_model(ckpt_dir, dtype=np.float32):
    d = Path(ckpt_dir)
    path = d / "params.gvtp" if d.is_dir() else d
    if not path.exists():
        raise FileNotFoundError(f"no checkpoint parameters at {path}")
    arrays, meta = _read_table(path)
    config = ModelConfig.from_dict(meta["model"])
    model = build_model(config, seed=0, dtype=dtype)
    model.load_state_dict(arrays)
    return model


def load_training_state(ckpt_dir):
    d = Path(ckpt_dir)
    state = json.loads((d / "state.json").read_text())
    moments = AdamState(t=state["adam_t"])
    if (d / "adam_m.gvtp").exists():
        moments.m, _ = _read_table(d / "adam_m.gvtp")
        moments.v, _ = _read_table(d / "adam_v.gvtp")
    cfg = TrainConfig.from_dict(json.loads((d / "train_config.json").read_text()))
    report = TrainReport.read_csv(d / "report.csv") if (d / "report.csv").exists() else TrainReport()
    return cfg, moments, state["epoch"], report


# -- training loop -------------------------------------------------------------

def train_step(model, batch: SequenceBatch, cfg: TrainConfig, moments: AdamState, epoch: int,
               dtype=np.float32):
    """Forward a batch, backprop the sequence loss once, apply Adam. Returns (loss, fusion, init, lr)."""
    frames = batch.frames(dtype)
    targets = batch.targets(dtype)
    outputs = run_sequence(model, frames, bptt_truncate=cfg.bptt_truncate)
    loss, fus, ini = sequence_loss(outputs, targets, cfg.w1, cfg.w2)
    value = loss.item()
    if not math.isfinite(value):
        raise NumericalError(f"non-finite loss {value} at epoch {epoch}")
    model.zero_grad()
    loss.backward()
    loss.release_graph()
    named = model.named_parameters()
    grads = {k: p.grad for k, p in named}
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient in {k} at epoch {epoch}")
    if cfg.grad_clip:
        clip_grad_norm(grads, cfg.grad_clip)
    lr = learning_rate(cfg, epoch)
    adam_step({k: p.data for k, p in named}, grads, moments, moments.t + 1, lr,
              cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    return value, fus, ini, lr


def train(model, provider, cfg: TrainConfig, checkpoint_dir=None, resume: bool = False,
          on_epoch: Optional[Callable[[EpochRecord], None]] = None) -> TrainReport:
    """Run ``cfg.max_epochs`` optimizer steps (one batch each).

    With ``checkpoint_dir`` the final state is saved there, plus intermediate
    snapshots under ``epoch_<k>/`` every ``cfg.checkpoint_every`` epochs.
    ``resume=True`` continues from the state stored in ``checkpoint_dir``.
    """
    cfg.validate()
    dtype = np.dtype(cfg.dtype)
    moments = AdamState()
    report = TrainReport()
    start = 0
    if resume:
        if checkpoint_dir is None:
            raise ConfigError("resume requires a checkpoint directory")
        _, moments, start, report = load_training_state(checkpoint_dir)
        model.load_state_dict(load_model(checkpoint_dir).state_dict())
    for epoch in range(start, cfg.max_epochs):
        t0 = time.perf_counter()
        batch = provider.batch(epoch)
        loss, fus, ini, lr = train_step(model, batch, cfg, moments, epoch, dtype)
        rec = EpochRecord(epoch, loss, fus, ini, lr, time.perf_counter() - t0)
        report.rows.append(rec)
        if on_epoch is not None:
            on_epoch(rec)
        if checkpoint_dir is not None and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
            save_checkpoint(Path(checkpoint_dir) / f"epoch_{epoch + 1}", model, cfg, moments, epoch + 1, report)
            save_checkpoint(checkpoint_dir, model, cfg, moments, epoch + 1, report)
    if checkpoint_dir is not None:
        save_checkpoint(checkpoint_dir, model, cfg, moments, cfg.max_epochs, report)
    return report

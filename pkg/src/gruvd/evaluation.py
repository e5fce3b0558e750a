"""Image quality metrics and the sequence evaluation runner."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy import ndimage

from .cell import init_state, run_sequence, run_spatial
from .data_io import SequenceBatch, write_png
from .tensor import ShapeError, Tensor, no_grad

PSNR_CAP = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03

VARIANTS = ("noisy", "s_only", "fused", "gru", "spatial")


def _f64(x) -> np.ndarray:
    return np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)


def psnr(a, b, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; identical inputs give ``PSNR_CAP``."""
    a, b = _f64(a), _f64(b)
    if a.shape != b.shape:
        raise ShapeError(f"psnr operands disagree: {a.shape} vs {b.shape}")
    if peak <= 0:
        raise ValueError(f"peak must be positive, got {peak}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(peak * peak / mse))


def _gaussian_window() -> np.ndarray:
    r = SSIM_WINDOW // 2
    g = np.exp(-0.5 * (np.arange(-r, r + 1) / SSIM_SIGMA) ** 2)
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    r = len(g) // 2
    out = ndimage.correlate1d(img, g, axis=-1, mode="constant")
    out = ndimage.correlate1d(out, g, axis=-2, mode="constant")
    return out[..., r:-r, r:-r]


def ssim(a, b, peak: float = 1.0) -> float:
    """Single-scale SSIM with an 11x11 Gaussian window (sigma 1.5).

    The last two axes are spatial; any leading axes are treated as channels,
    each scored separately and averaged. The SSIM map is averaged over
    window positions that lie fully inside the image.
    """
    a, b = _f64(a), _f64(b)
    if a.shape != b.shape:
        raise ShapeError(f"ssim operands disagree: {a.shape} vs {b.shape}")
    if a.ndim < 2 or min(a.shape[-2:]) < SSIM_WINDOW:
        raise ShapeError(f"ssim needs frames of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {a.shape}")
    a = a.reshape(-1, *a.shape[-2:])
    b = b.reshape(-1, *b.shape[-2:])
    c1 = (SSIM_K1 * peak) ** 2
    c2 = (SSIM_K2 * peak) ** 2
    g = _gaussian_window()
    scores = []
    for x, y in zip(a, b):
        mx, my = _filter_valid(x, g), _filter_valid(y, g)
        sxx = _filter_valid(x * x, g) - mx * mx
        syy = _filter_valid(y * y, g) - my * my
        sxy = _filter_valid(x * y, g) - mx * my
        num = (2 * mx * my + c1) * (2 * sxy + c2)
        den = (mx * mx + my * my + c1) * (sxx + syy + c2)
        scores.append(float(np.mean(num / den)))
    return float(np.mean(scores))


def temporal_stability(outputs: Sequence, clean_static) -> np.ndarray:
    """Per-frame MSE of each output against one static clean frame."""
    ref = _f64(clean_static)
    return np.array([float(np.mean((_f64(o) - ref) ** 2)) for o in outputs])


@dataclass
class EvalReport:
    variants: List[str]
    per_frame_psnr: Dict[str, List[List[float]]] = field(default_factory=dict)
    per_frame_ssim: Dict[str, List[List[float]]] = field(default_factory=dict)

    def mean_psnr(self, variant: str) -> float:
        return float(np.mean([v for seq in self.per_frame_psnr[variant] for v in seq]))

    def mean_ssim(self, variant: str) -> float:
        return float(np.mean([v for seq in self.per_frame_ssim[variant] for v in seq]))

    def rows(self):
        return [(v, self.mean_psnr(v), self.mean_ssim(v)) for v in self.variants]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["variant", "psnr", "ssim"])
        for v, p, s in self.rows():
            w.writerow([v, repr(p), repr(s)])
        return buf.getvalue()

    def write_csv(self, path) -> None:
        Path(path).write_text(self.to_csv())

    def frames_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["variant", "sequence", "frame", "psnr", "ssim"])
        for v in self.variants:
            for i, (ps, ss) in enumerate(zip(self.per_frame_psnr[v], self.per_frame_ssim[v])):
                for t, (p, s) in enumerate(zip(ps, ss)):
                    w.writerow([v, i, t, repr(p), repr(s)])
        return buf.getvalue()

    def table(self) -> str:
        lines = [f"{'variant':<10} {'PSNR (dB)':>10} {'SSIM':>8}"]
        lines += [f"{v:<10} {p:>10.3f} {s:>8.4f}" for v, p, s in self.rows()]
        return "\n".join(lines)


def read_report_csv(path) -> Dict[str, tuple]:
    with open(path, newline="") as fh:
        return {r["variant"]: (float(r["psnr"]), float(r["ssim"])) for r in csv.DictReader(fh)}


def _variant_outputs(variant: str, model, gru_model, batch: SequenceBatch, dtype):
    frames = batch.frames(dtype)
    if variant == "noisy":
        return [x for x, _ in frames], None
    if variant in ("s_only", "fused"):
        outs = run_sequence(model, frames)
        return [o.s if variant == "s_only" else o.y for o in outs], outs
    if variant == "spatial":
        outs = run_spatial(model, frames)
        return [o.y for o in outs], outs
    if variant == "gru":
        if gru_model is None:
            raise ValueError("the 'gru' variant needs a baseline GRU model")
        outs = run_sequence(gru_model, frames)
        return [o.y for o in outs], outs
    raise ValueError(f"unknown variant {variant!r}; choose from {VARIANTS}")


def evaluate(model, sequences: Sequence[SequenceBatch], variants: Sequence[str] = ("noisy", "s_only", "fused"),
             gru_model=None, peak: float = 1.0, dump_dir=None) -> EvalReport:
    """Score each variant on each sequence (a batch of one or more aligned clips).

    ``dump_dir`` receives 8-bit PNGs of y, s, r and f for the fused variant.
    """
    variants = list(dict.fromkeys(variants))
    report = EvalReport(variants=variants)
    dtype = model.dtype if model is not None else np.float32
    for v in variants:
        report.per_frame_psnr[v] = []
        report.per_frame_ssim[v] = []
    with no_grad():
        for si, batch in enumerate(sequences):
            if model is not None and batch.clean.shape[2] != model.channels:
                raise ShapeError(
                    f"sequence {si} has {batch.clean.shape[2]} channels, model expects {model.channels}"
                )
            targets = batch.clean
            cache = {}
            for v in variants:
                key = "recurrent" if v in ("s_only", "fused") else v
                if key in cache:
                    outs = cache[key]
                    frames_out = [o.s if v == "s_only" else o.y for o in outs]
                else:
                    frames_out, outs = _variant_outputs(v, model, gru_model, batch, dtype)
                    cache[key] = outs
                ps = [psnr(f, targets[:, t], peak) for t, f in enumerate(frames_out)]
                ss = [ssim(f, targets[:, t], peak) for t, f in enumerate(frames_out)]
                report.per_frame_psnr[v].append(ps)
                report.per_frame_ssim[v].append(ss)
                if dump_dir is not None and v == "fused":
                    dump_gates(Path(dump_dir) / f"seq_{si:03d}", outs)
    return report


def dump_gates(out_dir, outputs) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for t, o in enumerate(outputs):
        for name in ("y", "s", "r", "f"):
            write_png(out / f"{name}_{t:04d}.png", getattr(o, name).data[0])

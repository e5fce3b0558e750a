"""Synthetic video, frame files and training batches.

File formats
------------
* Single frames: binary Netpbm, ``P5`` (gray) or ``P6`` (RGB), maxval 65535
  (16-bit big-endian samples) or 255 for 8-bit visual exports.
* Sequences: ``GVSQ`` container. Little-endian header ``b"GVSQ"``, then u32
  ``T, C, H, W``, then ``T*C*H*W`` little-endian u16 samples in TCHW order.
* Dataset manifest: ``manifest.json`` listing ``{file, scene, iso, seed}``
  entries plus the sensor profile used to synthesize noise.

Samples are quantized as ``floor(v * maxval + 0.5)`` after clamping to [0, 1].
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .backbone import ConfigError
from .noise import NoiseParams, SensorProfile, add_noise, lookup_iso, std_map
from .tensor import Tensor

SCENE_KINDS = ("drifting_texture", "moving_shapes", "static")
SEQ_MAGIC = b"GVSQ"


class FrameFormatError(ValueError):
    """A frame or sequence file could not be parsed."""


# -- synthetic scenes -------------------------------------------------------

@dataclass(frozen=True)
class SyntheticSceneSpec:
    kind: str = "drifting_texture"
    resolution: Tuple[int, int] = (64, 64)
    frames: int = 8
    channels: int = 1
    motion_px_per_frame: float = 0.5
    texture_seed: int = 0
    direction_deg: float = 0.0

    def validate(self) -> None:
        if self.kind not in SCENE_KINDS:
            raise ConfigError(f"scene kind must be one of {SCENE_KINDS}, got {self.kind!r}")
        if self.frames < 1:
            raise ConfigError(f"frames must be >= 1, got {self.frames}")
        if self.channels not in (1, 3):
            raise ConfigError(f"channels must be 1 or 3, got {self.channels}")
        H, W = self.resolution
        if H < 1 or W < 1:
            raise ConfigError(f"resolution must be positive, got {self.resolution}")
        if not np.isfinite(self.motion_px_per_frame):
            raise ConfigError("motion_px_per_frame must be finite")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["resolution"] = list(self.resolution)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSceneSpec":
        d = dict(d)
        d["resolution"] = tuple(d["resolution"])
        return cls(**d)


def _texture(rng: np.random.Generator, shape: Tuple[int, int], channels: int) -> np.ndarray:
    """Periodic band-limited texture in [0.05, 0.95], shape [C, H, W]."""
    base = []
    for sigma, weight in ((1.5, 0.35), (4.0, 1.0)):
        noise = rng.standard_normal(shape)
        layer = ndimage.gaussian_filter(noise, sigma, mode="wrap")
        base.append(weight * layer / layer.std())
    lum = sum(base)
    chans = [lum]
    for _ in range(channels - 1):
        extra = ndimage.gaussian_filter(rng.standard_normal(shape), 3.0, mode="wrap")
        chans.append(lum + 0.5 * extra / extra.std())
    out = np.stack(chans)
    lo, hi = out.min(), out.max()
    return 0.05 + 0.9 * (out - lo) / (hi - lo)


def _sample(tex: np.ndarray, dy: float, dx: float, H: int, W: int) -> np.ndarray:
    # bilinear sampling of a periodic texture at a sub-pixel offset
    yy, xx = np.meshgrid(np.arange(H) + dy, np.arange(W) + dx, indexing="ij")
    return np.stack([
        ndimage.map_coordinates(c, [yy, xx], order=1, mode="grid-wrap") for c in tex
    ])


def generate_scene(spec: SyntheticSceneSpec) -> np.ndarray:
    """Clean sequence ``[T, C, H, W]`` in [0, 1], deterministic in ``texture_seed``."""
    spec.validate()
    H, W = spec.resolution
    rng = np.random.default_rng(spec.texture_seed)
    tex = _texture(rng, (2 * H, 2 * W), spec.channels)
    theta = np.deg2rad(spec.direction_deg)
    vy = spec.motion_px_per_frame * np.sin(theta)
    vx = spec.motion_px_per_frame * np.cos(theta)

    if spec.kind == "static":
        frame = tex[:, :H, :W]
        return np.repeat(frame[None], spec.frames, axis=0).copy()

    if spec.kind == "drifting_texture":
        frames = [_sample(tex, t * vy, t * vx, H, W) for t in range(spec.frames)]
        return np.clip(np.stack(frames), 0.0, 1.0)

    # moving_shapes: a few flat-shaded discs gliding over a static texture
    n_shapes = 4
    centers = rng.uniform(0, 1, size=(n_shapes, 2)) * (H, W)
    radii = rng.uniform(0.08, 0.2, size=n_shapes) * min(H, W)
    angles = rng.uniform(0, 2 * np.pi, size=n_shapes)
    values = rng.uniform(0.05, 0.95, size=(n_shapes, spec.channels))
    yy, xx = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
    frames = []
    for t in range(spec.frames):
        frame = tex[:, :H, :W].copy()
        for k in range(n_shapes):
            cy = centers[k, 0] + t * spec.motion_px_per_frame * np.sin(angles[k])
            cx = centers[k, 1] + t * spec.motion_px_per_frame * np.cos(angles[k])
            # soft edge: one-pixel linear ramp
            dist = np.hypot(yy - cy, xx - cx)
            alpha = np.clip(radii[k] - dist + 0.5, 0.0, 1.0)
            frame = frame * (1 - alpha) + values[k][:, None, None] * alpha
        frames.append(frame)
    return np.clip(np.stack(frames), 0.0, 1.0)


# -- batches -------------------------------------------------------------

@dataclass
class SequenceBatch:
    clean: np.ndarray  # [B, T, C, H, W]
    noisy: np.ndarray  # [B, T, C, H, W]
    delta: np.ndarray  # [B, T, 1, H, W]
    params: List[NoiseParams] = field(default_factory=list)

    @property
    def seq_len(self) -> int:
        return self.clean.shape[1]

    def frames(self, dtype=None) -> List[Tuple[Tensor, Tensor]]:
        """``(x_t, delta_t)`` tensor pairs in time order."""
        dt = dtype or self.noisy.dtype
        return [(Tensor(np.ascontiguousarray(self.noisy[:, t], dtype=dt)),
                 Tensor(np.ascontiguousarray(self.delta[:, t], dtype=dt)))
                for t in range(self.seq_len)]

    def targets(self, dtype=None) -> List[Tensor]:
        dt = dtype or self.clean.dtype
        return [Tensor(np.ascontiguousarray(self.clean[:, t], dtype=dt)) for t in range(self.seq_len)]


def delta_for(params: NoiseParams, noisy: np.ndarray) -> np.ndarray:
    """Single-channel std map ``[..., 1, H, W]`` from a noisy ``[..., C, H, W]`` array.

    Multi-channel frames use the channel mean as the intensity proxy.
    """
    proxy = noisy if noisy.shape[-3] == 1 else noisy.mean(axis=-3, keepdims=True)
    return std_map(params, proxy)


def make_batch(scenes: Sequence[np.ndarray], profile: SensorProfile, iso_choices: Sequence[int],
               crop: int, seq_len: int, rng_seed: int, batch: Optional[int] = None,
               dtype=np.float32) -> SequenceBatch:
    """Random temporal windows and spatial crops from ``scenes`` with synthetic noise.

    Element ``i`` draws a scene, window start, crop corner, ISO and noise seed
    from a generator seeded by ``rng_seed``.
    """
    if not scenes:
        raise ConfigError("make_batch needs at least one scene")
    if not iso_choices:
        raise ConfigError("iso_choices is empty")
    B = len(scenes) if batch is None else batch
    for sc in scenes:
        T_, _, H, W = sc.shape
        if crop > min(H, W) or crop < 1:
            raise ConfigError(f"crop {crop} does not fit scene of size {H}x{W}")
        if seq_len > T_ or seq_len < 1:
            raise ConfigError(f"seq_len {seq_len} exceeds scene length {T_}")
    rng = np.random.default_rng(rng_seed)
    clean, noisy, delta, plist = [], [], [], []
    for _ in range(B):
        sc = scenes[int(rng.integers(len(scenes)))]
        T_, _, H, W = sc.shape
        t0 = int(rng.integers(T_ - seq_len + 1))
        y0 = int(rng.integers(H - crop + 1))
        x0 = int(rng.integers(W - crop + 1))
        iso = int(iso_choices[int(rng.integers(len(iso_choices)))])
        noise_seed = int(rng.integers(2**63))
        params = lookup_iso(profile, iso)
        c = np.ascontiguousarray(sc[t0:t0 + seq_len, :, y0:y0 + crop, x0:x0 + crop], dtype=np.float64)
        n = add_noise(params, c, noise_seed, signal_range=profile.signal_range)
        clean.append(c)
        noisy.append(n)
        delta.append(delta_for(params, n))
        plist.append(params)
    return SequenceBatch(
        clean=np.stack(clean).astype(dtype),
        noisy=np.stack(noisy).astype(dtype),
        delta=np.stack(delta).astype(dtype),
        params=plist,
    )


def noisy_sequence(clean: np.ndarray, params: NoiseParams, seed: int, dtype=np.float32) -> SequenceBatch:
    """Whole clean sequence ``[T, C, H, W]`` as a batch of one with noise added."""
    n = add_noise(params, clean.astype(np.float64), seed)
    return SequenceBatch(clean=clean[None].astype(dtype), noisy=n[None].astype(dtype),
                         delta=delta_for(params, n)[None].astype(dtype), params=[params])


# -- Netpbm frames -----------------------------------------------------------

def quantize(arr: np.ndarray, maxval: int) -> np.ndarray:
    return np.floor(np.clip(arr, 0.0, 1.0) * maxval + 0.5).astype(np.uint16 if maxval > 255 else np.uint8)


def write_frame(path, frame, bits: int = 16) -> None:
    """Write ``[C, H, W]`` (or ``[H, W]``) as binary PGM/PPM."""
    arr = frame.data if isinstance(frame, Tensor) else np.asarray(frame)
    if arr.ndim == 2:
        arr = arr[None]
    C, H, W = arr.shape
    if C not in (1, 3):
        raise FrameFormatError(f"Netpbm frames need 1 or 3 channels, got {C}")
    maxval = 65535 if bits == 16 else 255
    q = quantize(arr, maxval).transpose(1, 2, 0)
    header = f"{'P5' if C == 1 else 'P6'}\n{W} {H}\n{maxval}\n".encode("ascii")
    payload = q.astype(">u2").tobytes() if maxval > 255 else q.astype(np.uint8).tobytes()
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload)


def _header_tokens(buf: bytes, count: int):
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FrameFormatError(f"truncated Netpbm header at offset {pos}")
        tokens.append((buf[start:pos], start))
    return tokens, pos + 1


def read_frame(path) -> Tensor:
    """Read a binary PGM/PPM into a float32 ``[C, H, W]`` tensor in [0, 1]."""
    buf = Path(path).read_bytes()
    if buf[:2] not in (b"P5", b"P6"):
        raise FrameFormatError(f"{path}: bad Netpbm magic {buf[:2]!r} at offset 0")
    C = 1 if buf[:2] == b"P5" else 3
    tokens, data_start = _header_tokens(buf[2:], 3)
    vals = []
    for tok, off in tokens:
        try:
            vals.append(int(tok))
        except ValueError:
            raise FrameFormatError(f"{path}: non-numeric header field {tok!r} at offset {off + 2}") from None
    W, H, maxval = vals
    if W <= 0 or H <= 0 or W * H > 2**28:
        raise FrameFormatError(f"{path}: unsupported dimensions {W}x{H}")
    if not 0 < maxval <= 65535:
        raise FrameFormatError(f"{path}: maxval {maxval} out of range")
    dt = ">u2" if maxval > 255 else np.uint8
    itemsize = 2 if maxval > 255 else 1
    offset = data_start + 2
    need = W * H * C * itemsize
    if len(buf) - offset < need:
        raise FrameFormatError(f"{path}: payload truncated at offset {len(buf)}, expected {need} bytes from {offset}")
    arr = np.frombuffer(buf, dtype=dt, count=W * H * C, offset=offset).reshape(H, W, C)
    return Tensor((arr.astype(np.float64) / maxval).transpose(2, 0, 1).astype(np.float32))


# -- GVSQ sequences ----------------------------------------------------------

def write_sequence(path, seq) -> None:
    arr = seq.data if isinstance(seq, Tensor) else np.asarray(seq)
    if arr.ndim != 4:
        raise FrameFormatError(f"sequence must be [T, C, H, W], got shape {arr.shape}")
    with open(path, "wb") as fh:
        fh.write(SEQ_MAGIC)
        fh.write(struct.pack("<4I", *arr.shape))
        fh.write(quantize(arr, 65535).astype("<u2").tobytes())


def read_sequence(path) -> Tensor:
    buf = Path(path).read_bytes()
    if buf[:4] != SEQ_MAGIC:
        raise FrameFormatError(f"{path}: bad sequence magic {buf[:4]!r} at offset 0")
    if len(buf) < 20:
        raise FrameFormatError(f"{path}: header truncated at offset {len(buf)}")
    dims = struct.unpack("<4I", buf[4:20])
    n = int(np.prod(dims, dtype=np.int64))
    if n > 2**31:
        raise FrameFormatError(f"{path}: dimensions {dims} overflow")
    if len(buf) - 20 < 2 * n:
        raise FrameFormatError(f"{path}: payload truncated at offset {len(buf)}, expected {2 * n} bytes from 20")
    arr = np.frombuffer(buf, dtype="<u2", count=n, offset=20).reshape(dims)
    return Tensor((arr.astype(np.float64) / 65535).astype(np.float32))


def write_frames(path, t, bits: int = 16) -> None:
    """Write by suffix: ``.gvsq`` for ``[T, C, H, W]`` sequences, ``.pgm``/``.ppm`` for one frame."""
    if str(path).endswith(".gvsq"):
        write_sequence(path, t)
    else:
        write_frame(path, t, bits=bits)


def read_frames(path) -> Tensor:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"no such frame file: {p}")
    if p.suffix == ".gvsq":
        return read_sequence(p)
    return read_frame(p)


def write_png(path, frame) -> None:
    """8-bit PNG for visual inspection (values clamped to [0, 1])."""
    from PIL import Image

    arr = frame.data if isinstance(frame, Tensor) else np.asarray(frame)
    if arr.ndim == 3:
        arr = arr[0] if arr.shape[0] == 1 else arr.transpose(1, 2, 0)
    Image.fromarray(quantize(arr, 255)).save(path)


# -- dataset manifests -------------------------------------------------------

@dataclass
class DatasetEntry:
    file: str
    scene: SyntheticSceneSpec
    iso: int
    seed: int


@dataclass
class Dataset:
    root: Path
    entries: List[DatasetEntry]
    profile: SensorProfile

    def load_clean(self) -> List[np.ndarray]:
        return [read_sequence(self.root / e.file).data for e in self.entries]


def write_manifest(root, entries: Sequence[DatasetEntry], profile: SensorProfile) -> Path:
    root = Path(root)
    doc = {
        "version": 1,
        "profile": profile.to_dict(),
        "entries": [
            {"file": e.file, "scene": e.scene.to_dict(), "iso": e.iso, "seed": e.seed} for e in entries
        ],
    }
    path = root / "manifest.json"
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


def load_dataset(root) -> Dataset:
    root = Path(root)
    mpath = root / "manifest.json" if root.is_dir() else root
    if not mpath.exists():
        raise FileNotFoundError(f"no dataset manifest at {mpath}")
    doc = json.loads(mpath.read_text())
    entries = [
        DatasetEntry(file=e["file"], scene=SyntheticSceneSpec.from_dict(e["scene"]), iso=int(e["iso"]),
                     seed=int(e["seed"]))
        for e in doc["entries"]
    ]
    return Dataset(root=mpath.parent, entries=entries, profile=SensorProfile.from_dict(doc["profile"]))


def synthesize_dataset(out_dir, specs: Sequence[SyntheticSceneSpec], profile: SensorProfile,
                       isos: Sequence[int], seed: int) -> Dataset:
    """Generate and write clean sequences plus a manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    entries = []
    for i, spec in enumerate(specs):
        seq = generate_scene(spec)
        name = f"seq_{i:04d}.gvsq"
        write_sequence(out / name, seq)
        iso = int(isos[i % len(isos)])
        entries.append(DatasetEntry(file=name, scene=spec, iso=iso, seed=int(rng.integers(2**31))))
    write_manifest(out, entries, profile)
    return Dataset(root=out, entries=entries, profile=profile)

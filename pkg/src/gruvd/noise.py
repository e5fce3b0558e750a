"""Heteroscedastic Gaussian sensor noise.

The per-pixel noise variance is linear in the clean intensity,
``var = a * y + b``, where ``a`` scales shot noise and ``b`` is the readout
variance. Observations are ``x = y + eta`` with ``eta ~ N(0, a*y + b)``.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Tuple, Union

import numpy as np

from .backbone import ConfigError
from .tensor import Tensor

ArrayLike = Union[np.ndarray, Tensor, float]


def _arr(x: ArrayLike) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


@dataclass(frozen=True)
class NoiseParams:
    a: float
    b: float

    def __post_init__(self):
        if not (self.a >= 0 and self.b >= 0):
            raise ConfigError(f"noise parameters must be non-negative, got a={self.a}, b={self.b}")


@dataclass
class SensorProfile:
    name: str
    table: Dict[int, NoiseParams]
    signal_range: Tuple[float, float] = (0.0, 1.0)

    def __post_init__(self):
        if any((not isinstance(k, (int, np.integer))) or k <= 0 for k in self.table):
            raise ConfigError(f"ISO keys must be positive integers, got {sorted(self.table)}")

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "signal_range": list(self.signal_range),
            "table": [{"iso": iso, "a": p.a, "b": p.b} for iso, p in sorted(self.table.items())],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SensorProfile":
        table: Dict[int, NoiseParams] = {}
        for row in d["table"]:
            iso = int(row["iso"])
            if iso in table:
                raise ConfigError(f"duplicate ISO {iso} in sensor profile {d.get('name')!r}")
            table[iso] = NoiseParams(float(row["a"]), float(row["b"]))
        lo, hi = d.get("signal_range", (0.0, 1.0))
        return cls(name=d.get("name", "sensor"), table=table, signal_range=(float(lo), float(hi)))

    @classmethod
    def constant(cls, a: float, b: float, name: str = "constant", iso: int = 1600) -> "SensorProfile":
        return cls(name=name, table={iso: NoiseParams(a, b)})


def load_profile(path) -> SensorProfile:
    return SensorProfile.from_dict(json.loads(Path(path).read_text()))


def save_profile(path, profile: SensorProfile) -> None:
    Path(path).write_text(json.dumps(profile.to_dict(), indent=2))


def noise_variance(params: NoiseParams, y: ArrayLike, signal_range=(0.0, 1.0)) -> np.ndarray:
    """``a * y + b`` with ``y`` clamped below at the range minimum."""
    y = np.maximum(_arr(y), signal_range[0])
    return params.a * y + params.b


def add_noise(params: NoiseParams, y_clean: ArrayLike, rng_seed: int, clip: bool = False,
              signal_range=(0.0, 1.0)) -> np.ndarray:
    """Sample ``x = y + eta`` with per-pixel ``eta ~ N(0, a*y + b)``.

    Draws come from a Philox counter stream keyed by ``rng_seed``; pixel ``i``
    always receives the ``i``-th normal of that stream, so the result depends
    only on the seed and the array shape.
    """
    y = _arr(y_clean)
    if params.a == 0 and params.b == 0:
        return y.copy()
    var = noise_variance(params, y, signal_range)
    rng = np.random.Generator(np.random.Philox(key=int(rng_seed) & (2**64 - 1)))
    z = rng.standard_normal(y.shape)
    x = y + np.sqrt(var) * z
    if clip:
        x = np.clip(x, *signal_range)
    return x.astype(y.dtype, copy=False)


def std_map(params: NoiseParams, x_observed: ArrayLike) -> np.ndarray:
    """Per-pixel noise std estimated from the observed frame: ``sqrt(max(a*x + b, 0))``."""
    x = _arr(x_observed)
    return np.sqrt(np.maximum(params.a * x + params.b, 0)).astype(x.dtype, copy=False)


def lookup_iso(profile: SensorProfile, iso: int) -> NoiseParams:
    """Noise parameters at ``iso``.

    Between table entries ``a`` and ``b`` are interpolated linearly in
    ``log(iso)`` on ``log(a)``/``log(b)`` (geometric interpolation); outside
    the table the nearest entry is returned. If either endpoint of a
    coefficient is zero that coefficient is interpolated linearly in
    ``log(iso)`` instead.
    """
    if not profile.table:
        raise ConfigError(f"sensor profile {profile.name!r} has an empty ISO table")
    if iso <= 0:
        raise ConfigError(f"ISO must be positive, got {iso}")
    isos = sorted(profile.table)
    if iso in profile.table:
        return profile.table[iso]
    if iso <= isos[0]:
        return profile.table[isos[0]]
    if iso >= isos[-1]:
        return profile.table[isos[-1]]
    hi_idx = next(i for i, v in enumerate(isos) if v > iso)
    lo, hi = isos[hi_idx - 1], isos[hi_idx]
    t = (math.log(iso) - math.log(lo)) / (math.log(hi) - math.log(lo))
    p0, p1 = profile.table[lo], profile.table[hi]

    def interp(u: float, v: float) -> float:
        if u > 0 and v > 0:
            return math.exp((1 - t) * math.log(u) + t * math.log(v))
        return (1 - t) * u + t * v

    return NoiseParams(interp(p0.a, p1.a), interp(p0.b, p1.b))

import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gruvd.backbone import ConfigError
from gruvd.noise import (
    NoiseParams,
    SensorProfile,
    add_noise,
    load_profile,
    lookup_iso,
    noise_variance,
    save_profile,
    std_map,
)


def test_noise_variance_examples():
    assert noise_variance(NoiseParams(2, 3), 5.0) == 13
    np.testing.assert_array_equal(noise_variance(NoiseParams(0, 0.25), np.array([0.1, 0.7])), [0.25, 0.25])
    assert noise_variance(NoiseParams(1, 0), 0.0) == 0
    # below the signal range the clean value is clamped
    assert noise_variance(NoiseParams(1, 0.5), -3.0) == 0.5


def test_negative_params_rejected():
    with pytest.raises(ConfigError):
        NoiseParams(-1, 0)


def test_zero_noise_is_identity(rng):
    y = rng.uniform(size=(3, 4))
    np.testing.assert_array_equal(add_noise(NoiseParams(0, 0), y, 7), y)


def test_additive_gaussian_statistics():
    y = np.full(10**6, 0.3)
    x = add_noise(NoiseParams(0, 4), y, 42)
    assert abs(x.mean() - 0.3) < 0.01
    assert abs(x.var() / 4 - 1) < 0.02


def test_binned_variance_tracks_signal():
    y = np.linspace(0, 100, 10**6)
    x = add_noise(NoiseParams(0.5, 1.0), y, 3, signal_range=(0.0, 100.0))
    edges = np.linspace(0, 100, 11)
    for lo, hi in zip(edges[:-1], edges[1:]):
        m = (y >= lo) & (y < hi)
        resid = x[m] - y[m]
        # within a bin the mean variance is 0.5 * mean(y) + 1
        expected = 0.5 * y[m].mean() + 1
        assert abs(resid.var() / expected - 1) < 0.05


def test_add_noise_deterministic_and_unclipped(rng):
    y = rng.uniform(size=(2, 8, 8))
    p = NoiseParams(0.1, 0.01)
    a = add_noise(p, y, 99)
    np.testing.assert_array_equal(a, add_noise(p, y, 99))
    assert not np.array_equal(a, add_noise(p, y, 100))
    assert a.min() < 0 or a.max() > 1
    c = add_noise(p, y, 99, clip=True)
    assert c.min() >= 0 and c.max() <= 1


def test_std_map_examples():
    np.testing.assert_array_equal(std_map(NoiseParams(0, 9), np.zeros((2, 2))), np.full((2, 2), 3.0))
    assert std_map(NoiseParams(1, 0), np.array([16.0]))[0] == 4
    assert std_map(NoiseParams(5, 1), np.array([-1.0]))[0] == 0


@given(st.floats(0, 10), st.floats(0, 10), st.floats(-1, 2), st.floats(0, 1))
def test_std_map_monotone(a, b, x, bump):
    base = std_map(NoiseParams(a, b), np.array([x]))[0]
    assert std_map(NoiseParams(a + bump, b), np.array([x]))[0] >= base or x < 0
    assert std_map(NoiseParams(a, b + bump), np.array([x]))[0] >= base
    assert std_map(NoiseParams(a, b), np.array([x + bump]))[0] >= base
    assert base ** 2 <= max(a * x + b, 0) * (1 + 1e-12) + 1e-300


def test_lookup_iso():
    prof = SensorProfile("s", {1600: NoiseParams(1, 10), 25600: NoiseParams(16, 160)})
    assert lookup_iso(prof, 1600) == NoiseParams(1, 10)
    mid = lookup_iso(prof, 6400)
    # independent evaluation: 6400 sits halfway between 1600 and 25600 in log space
    t = (math.log(6400) - math.log(1600)) / (math.log(25600) - math.log(1600))
    assert t == pytest.approx(0.5)
    assert mid.a == pytest.approx(math.sqrt(1 * 16)) and mid.a == pytest.approx(4)
    assert mid.b == pytest.approx(math.sqrt(10 * 160)) and mid.b == pytest.approx(40)
    assert lookup_iso(prof, 100) == NoiseParams(1, 10)
    assert lookup_iso(prof, 10**6) == NoiseParams(16, 160)
    with pytest.raises(ConfigError):
        lookup_iso(SensorProfile("empty", {}), 1600)


def test_profile_json_roundtrip(tmp_path):
    prof = SensorProfile("imx", {1600: NoiseParams(1e-3, 1e-5), 3200: NoiseParams(2e-3, 4e-5)}, (0.0, 1.0))
    path = tmp_path / "p.json"
    save_profile(path, prof)
    doc = json.loads(path.read_text())
    assert set(doc) == {"name", "signal_range", "table"}
    assert doc["table"][0] == {"iso": 1600, "a": 1e-3, "b": 1e-5}
    assert load_profile(path) == prof


def test_profile_rejects_duplicates():
    with pytest.raises(ConfigError):
        SensorProfile.from_dict({"name": "x", "table": [{"iso": 1, "a": 0, "b": 1}, {"iso": 1, "a": 0, "b": 2}]})

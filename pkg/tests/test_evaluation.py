import numpy as np
import pytest

from gruvd.cell import ModelConfig, build_model, run_sequence
from gruvd.data_io import SyntheticSceneSpec, generate_scene, noisy_sequence
from gruvd.evaluation import (
    PSNR_CAP,
    evaluate,
    psnr,
    read_report_csv,
    ssim,
    temporal_stability,
)
from gruvd.noise import NoiseParams
from gruvd.tensor import ShapeError


def test_psnr_identical_is_capped():
    x = np.random.default_rng(0).uniform(size=(1, 8, 8))
    assert psnr(x, x) == PSNR_CAP == 100.0


def test_psnr_direct_values():
    a = np.zeros((4, 4))
    assert psnr(a, a + 0.1) == pytest.approx(20.0, abs=1e-12)
    assert psnr(a, a + 1.0, peak=255.0) == pytest.approx(20 * np.log10(255.0), abs=1e-12)
    assert psnr(a, a + 1.0, peak=255.0) == pytest.approx(48.1308, abs=5e-5)


def test_psnr_errors():
    with pytest.raises(ShapeError):
        psnr(np.zeros((2, 2)), np.zeros((2, 3)))
    with pytest.raises(ValueError):
        psnr(np.zeros(2), np.ones(2), peak=0)


def test_psnr_decreases_with_noise_level():
    clean = generate_scene(SyntheticSceneSpec(resolution=(32, 32), frames=1))[0]
    for seed in range(5):
        rng = np.random.default_rng(seed)
        vals = [psnr(clean + sd * rng.standard_normal(clean.shape), clean) for sd in (0.01, 0.03, 0.1, 0.3)]
        assert all(a > b for a, b in zip(vals, vals[1:]))


def test_ssim_identity_and_symmetry(rng):
    a = rng.uniform(size=(3, 20, 24))
    b = np.clip(a + 0.1 * rng.standard_normal(a.shape), 0, 1)
    assert ssim(a, a) == 1.0
    assert ssim(a, b) == ssim(b, a)
    assert -1 <= ssim(a, b) < 1


def test_ssim_constant_images():
    a, b = np.zeros((16, 16)), np.ones((16, 16))
    c1 = 0.01 ** 2
    val = ssim(a, b)
    assert 0 < val < 0.05
    assert val == pytest.approx(c1 / (1 + c1), rel=1e-9)


def test_ssim_matches_reference_implementation(rng):
    metrics = pytest.importorskip("skimage.metrics")
    a = rng.uniform(size=(27, 31))
    b = np.clip(a + 0.2 * rng.standard_normal(a.shape), 0, 1)
    ref = metrics.structural_similarity(a, b, gaussian_weights=True, sigma=1.5, use_sample_covariance=False,
                                        data_range=1.0)
    assert ssim(a, b) == pytest.approx(ref, abs=1e-10)


def test_ssim_crop_invariance(rng):
    # cropping both inputs keeps exactly the windows that lie inside the crop
    metrics = pytest.importorskip("skimage.metrics")
    a = rng.uniform(size=(30, 30))
    b = np.clip(a + 0.1 * rng.standard_normal(a.shape), 0, 1)
    _, smap = metrics.structural_similarity(a, b, gaussian_weights=True, sigma=1.5,
                                            use_sample_covariance=False, data_range=1.0, full=True)
    y0, y1, x0, x1 = 3, 25, 2, 27
    inside = smap[y0 + 5:y1 - 5, x0 + 5:x1 - 5].mean()
    assert ssim(a[y0:y1, x0:x1], b[y0:y1, x0:x1]) == pytest.approx(inside, abs=1e-10)


def test_ssim_channel_average(rng):
    a, b = rng.uniform(size=(2, 12, 12)), rng.uniform(size=(2, 12, 12))
    assert ssim(a, b) == pytest.approx(0.5 * (ssim(a[0], b[0]) + ssim(a[1], b[1])), rel=1e-14)


def test_ssim_small_frame_rejected():
    with pytest.raises(ShapeError):
        ssim(np.zeros((10, 12)), np.zeros((10, 12)))


def test_temporal_stability_series():
    clean = np.full((1, 4, 4), 0.3)
    assert np.all(temporal_stability([clean] * 3, clean) == 0)
    s = temporal_stability([clean + 0.1] * 4, clean)
    assert np.allclose(s, 0.01) and np.ptp(s) == 0


@pytest.fixture(scope="module")
def seqs():
    specs = [SyntheticSceneSpec(resolution=(16, 16), frames=3, texture_seed=i) for i in range(2)]
    return [noisy_sequence(generate_scene(s), NoiseParams(0.0, 1e-3), seed=i) for i, s in enumerate(specs)]


@pytest.fixture(scope="module")
def model():
    return build_model(ModelConfig(hidden=4, blocks=1), seed=0)


def test_noisy_variant_is_direct_psnr(seqs, model):
    rep = evaluate(model, seqs, ["noisy"])
    for si, b in enumerate(seqs):
        for t in range(3):
            assert rep.per_frame_psnr["noisy"][si][t] == psnr(b.noisy[:, t], b.clean[:, t])
    expected = np.mean([psnr(b.noisy[:, t], b.clean[:, t]) for b in seqs for t in range(3)])
    assert rep.mean_psnr("noisy") == pytest.approx(expected, rel=1e-14)


def test_zero_noise_identity_is_capped(model):
    clean = generate_scene(SyntheticSceneSpec(resolution=(16, 16), frames=2))
    rep = evaluate(model, [noisy_sequence(clean, NoiseParams(0.0, 0.0), 0)], ["noisy"])
    assert rep.mean_psnr("noisy") == PSNR_CAP


def test_variants_use_model_outputs(seqs, model):
    rep = evaluate(model, seqs, ["noisy", "s_only", "fused", "spatial"])
    outs = run_sequence(model, seqs[0].frames())
    assert rep.per_frame_psnr["fused"][0][2] == psnr(outs[2].y, seqs[0].clean[:, 2])
    assert rep.per_frame_psnr["s_only"][0][1] == psnr(outs[1].s, seqs[0].clean[:, 1])
    # the first frame's carry is x0 itself, so spatial and fused agree there
    assert rep.per_frame_psnr["spatial"][0][0] == rep.per_frame_psnr["fused"][0][0]
    assert [r[0] for r in rep.rows()] == ["noisy", "s_only", "fused", "spatial"]
    assert "PSNR" in rep.table()


def test_gru_variant(seqs, model):
    with pytest.raises(ValueError, match="gru"):
        evaluate(model, seqs, ["gru"])
    gru = build_model(ModelConfig(kind="gru", hidden=4, blocks=1), seed=1)
    rep = evaluate(model, seqs, ["gru"], gru_model=gru)
    assert np.isfinite(rep.mean_psnr("gru"))


def test_channel_mismatch(seqs):
    with pytest.raises(ShapeError):
        evaluate(build_model(ModelConfig(channels=3, hidden=4, blocks=1), seed=0), seqs, ["fused"])


def test_report_csv_deterministic(tmp_path, seqs, model):
    a = evaluate(model, seqs, ["noisy", "fused"])
    b = evaluate(model, seqs, ["noisy", "fused"])
    a.write_csv(tmp_path / "a.csv")
    b.write_csv(tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    back = read_report_csv(tmp_path / "a.csv")
    assert back["fused"] == (a.mean_psnr("fused"), a.mean_ssim("fused"))
    assert a.frames_csv().count("\n") == 1 + 2 * 2 * 3


def test_dump_gates(tmp_path, seqs, model):
    evaluate(model, seqs[:1], ["fused"], dump_dir=tmp_path)
    names = sorted(p.name for p in (tmp_path / "seq_000").iterdir())
    assert names == sorted(f"{k}_{t:04d}.png" for k in "yrsf" for t in range(3))

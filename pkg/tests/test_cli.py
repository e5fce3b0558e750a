import json

import numpy as np
import pytest

from gruvd.cli import main
from gruvd.data_io import SyntheticSceneSpec, generate_scene, load_dataset, read_frame, read_sequence, write_sequence
from gruvd.evaluation import read_report_csv


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert run("synth", "--kind", "drifting_texture", "--frames", 4, "--size", 16, "--count", 2,
               "--seed", 3, "--out", root / "data") == 0
    assert run("train", "--dataset", root / "data", "--out", root / "ck", "--epochs", 4, "--patch", 8,
               "--seq-len", 3, "--batch", 2, "--hidden", 4, "--blocks", 1,
               "--report", root / "report.csv") == 0
    return root


def test_synth_single_entry(tmp_path):
    assert run("synth", "--kind", "drifting_texture", "--frames", 8, "--size", 64, "--seed", 7,
               "--out", tmp_path / "d") == 0
    ds = load_dataset(tmp_path / "d")
    assert len(ds.entries) == 1
    assert ds.entries[0].scene.frames == 8 and ds.entries[0].scene.resolution == (64, 64)


def test_synth_is_byte_identical(tmp_path):
    for name in ("a", "b"):
        assert run("synth", "--frames", 3, "--size", 16, "--count", 2, "--seed", 7, "--out", tmp_path / name) == 0
    for f in ("manifest.json", "seq_0000.gvsq", "seq_0001.gvsq"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_synth_config_file_and_precedence(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"scene": {"kind": "static", "frames": 5}, "size": 16}))
    assert run("synth", "--config", cfg, "--frames", 2, "--out", tmp_path / "d") == 0
    spec = load_dataset(tmp_path / "d").entries[0].scene
    assert spec.kind == "static" and spec.frames == 2 and spec.resolution == (16, 16)


def test_synth_validation_exit_codes(tmp_path, capsys):
    assert run("synth", "--frames", 0, "--out", tmp_path / "x") == 2
    assert run("synth", "--count", 0, "--out", tmp_path / "x") == 2
    with pytest.raises(SystemExit) as e:
        run("synth", "--bogus-flag", "--out", tmp_path / "x")
    assert e.value.code == 2
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert run("synth", "--config", bad, "--out", tmp_path / "x") == 2


def test_output_root_env(tmp_path, monkeypatch):
    monkeypatch.setenv("GRUVD_OUTPUT_ROOT", str(tmp_path))
    assert run("synth", "--frames", 2, "--size", 16, "--out", "rel") == 0
    assert (tmp_path / "rel" / "manifest.json").exists()


def test_train_outputs(workspace):
    rows = (workspace / "report.csv").read_text().splitlines()
    assert rows[0] == "epoch,loss,loss_fusion,loss_init,lr,seconds"
    assert len(rows) == 5
    for f in ("params.gvtp", "adam_m.gvtp", "adam_v.gvtp", "train_config.json", "state.json"):
        assert (workspace / "ck" / f).exists()


def test_train_missing_dataset_is_io_error(tmp_path):
    assert run("train", "--dataset", tmp_path / "nope", "--out", tmp_path / "ck", "--epochs", 1) == 3


def test_train_bad_config_is_config_error(workspace, tmp_path):
    assert run("train", "--dataset", workspace / "data", "--out", tmp_path / "ck", "--epochs", 1,
               "--w1", 0, "--w2", 0) == 2
    assert run("train", "--dataset", workspace / "data", "--out", tmp_path / "ck", "--epochs", 1,
               "--patch", 64) == 2


def test_train_resume_matches_uninterrupted(workspace, tmp_path):
    common = ["--dataset", workspace / "data", "--patch", 8, "--seq-len", 3, "--batch", 2, "--hidden", 4,
              "--blocks", 1]
    assert run("train", *common, "--out", tmp_path / "full", "--epochs", 4) == 0
    assert run("train", *common, "--out", tmp_path / "part", "--epochs", 2) == 0
    assert run("train", *common, "--out", tmp_path / "part", "--epochs", 4, "--resume") == 0
    for f in ("params.gvtp", "adam_m.gvtp", "adam_v.gvtp", "report.csv"):
        assert (tmp_path / "full" / f).read_bytes() == (tmp_path / "part" / f).read_bytes(), f


def test_train_config_file(workspace, tmp_path):
    cfg = tmp_path / "t.json"
    cfg.write_text(json.dumps({"train": {"max_epochs": 2, "patch": 8, "seq_len": 2, "batch": 1},
                               "model": {"hidden": 4, "blocks": 1}}))
    assert run("train", "--dataset", workspace / "data", "--out", tmp_path / "ck", "--config", cfg,
               "--epochs", 3) == 0
    saved = json.loads((tmp_path / "ck" / "train_config.json").read_text())
    assert saved["max_epochs"] == 3 and saved["patch"] == 8


def test_eval_rows_and_round_trip(workspace, tmp_path, capsys):
    assert run("eval", "--checkpoint", workspace / "ck", "--dataset", workspace / "data",
               "--variants", "fused,s_only", "--out", tmp_path / "r.csv") == 0
    rows = (tmp_path / "r.csv").read_text().splitlines()
    assert len(rows) == 4 and rows[1].startswith("noisy,")
    back = read_report_csv(tmp_path / "r.csv")
    assert set(back) == {"noisy", "fused", "s_only"}
    assert "PSNR" in capsys.readouterr().out


def test_eval_is_byte_identical(workspace, tmp_path):
    for name in ("a.csv", "b.csv"):
        assert run("eval", "--checkpoint", workspace / "ck", "--dataset", workspace / "data",
                   "--out", tmp_path / name) == 0
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_eval_errors(workspace, tmp_path):
    assert run("eval", "--checkpoint", workspace / "ck", "--dataset", workspace / "data",
               "--variants", "magic") == 2
    assert run("eval", "--checkpoint", tmp_path / "none", "--dataset", workspace / "data") == 3


def test_addnoise_and_denoise(workspace, tmp_path):
    clean = tmp_path / "clean.gvsq"
    write_sequence(clean, generate_scene(SyntheticSceneSpec(resolution=(16, 16), frames=3)))
    assert run("addnoise", "--input", clean, "--out", tmp_path / "noisy.gvsq", "--a", 0, "--b", 1e-3,
               "--seed", 1) == 0
    noisy = read_sequence(tmp_path / "noisy.gvsq").data
    assert noisy.shape == (3, 1, 16, 16)
    assert run("denoise", "--checkpoint", workspace / "ck", "--input", tmp_path / "noisy.gvsq",
               "--a", 0, "--b", 1e-3, "--out", tmp_path / "plain") == 0
    assert sorted(p.name for p in (tmp_path / "plain").glob("*.pgm")) == [f"y_{t:04d}.pgm" for t in range(3)]
    assert read_sequence(tmp_path / "plain" / "denoised.gvsq").data.shape == (3, 1, 16, 16)
    assert run("denoise", "--checkpoint", workspace / "ck", "--input", tmp_path / "noisy.gvsq",
               "--a", 0, "--b", 1e-3, "--out", tmp_path / "gates", "--dump-gates") == 0
    extra = len(list((tmp_path / "gates").glob("*.pgm"))) - 3
    assert extra == 3 * 3
    assert read_frame(tmp_path / "gates" / "f_0000.pgm").data.shape == (1, 16, 16)


def test_denoise_errors(workspace, tmp_path):
    rgb = tmp_path / "rgb.gvsq"
    write_sequence(rgb, np.full((2, 3, 8, 8), 0.5))
    assert run("denoise", "--checkpoint", workspace / "ck", "--input", rgb, "--a", 0, "--b", 1e-3,
               "--out", tmp_path / "o") == 2
    mono = tmp_path / "mono.gvsq"
    write_sequence(mono, np.full((2, 1, 8, 8), 0.5))
    assert run("denoise", "--checkpoint", workspace / "ck", "--input", mono, "--out", tmp_path / "o") == 2
    assert run("denoise", "--checkpoint", workspace / "ck", "--input", tmp_path / "missing.gvsq",
               "--a", 0, "--b", 0, "--out", tmp_path / "o") == 3


def test_gradcheck_passes(capsys):
    assert run("gradcheck") == 0
    out = capsys.readouterr().out
    assert "reset.head.w" in out and "update.tail.b" in out and "PASS" in out


def test_gradcheck_negative_control(capsys):
    assert run("gradcheck", "--inject-bug") == 4
    assert "FAIL" in capsys.readouterr().out


def test_threads_flag(tmp_path):
    assert run("--threads", 1, "synth", "--frames", 2, "--size", 16, "--out", tmp_path / "d") == 0

import json
import os

import pytest
import torch

from diffcodec import cli, pipeline
from diffcodec.errors import ConfigError
from diffcodec.model import CodecModel


@pytest.fixture()
def workdir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    return tmp_path


@pytest.fixture(scope="module")
def model_ckpt(tmp_path_factory):
    torch.manual_seed(0)
    path = tmp_path_factory.mktemp("ckpt") / "model.pt"
    CodecModel().save(str(path))
    return str(path)


@pytest.fixture(scope="module")
def png_clip(tmp_path_factory):
    from conftest import make_pan_clip
    folder = tmp_path_factory.mktemp("clip") / "png"
    pipeline.save_png_folder(make_pan_clip(seed=9, frames=5, size=64),
                             str(folder))
    return str(folder)


def test_config_unknown_key_rejected(tmp_path):
    p = tmp_path / "c.ini"
    p.write_text("[model]\nbogus = 3\n")
    with pytest.raises(ConfigError):
        cli._load_config(str(p), None)
    with pytest.raises(ConfigError):
        cli._load_config(None, ["sequence.bogus=1"])
    with pytest.raises(ConfigError):
        cli._load_config(None, ["noequals"])
    cfg = cli._load_config(None, ["sequence.DS=10"])
    assert cfg["sequence"]["DS"] == "10"


def test_train_smoke_and_prerequisite(workdir, monkeypatch):
    out = workdir / "run"
    rc = cli.main(["train", "--stages", "1", "--out", str(out),
                   "--epochs-per-stage", "1",
                   "--set", "train.steps_per_epoch=2",
                   "--set", "train.n_clips=1", "--set", "train.clip_frames=3"])
    # stage 1 without a stage 0 checkpoint is a config error
    assert rc == 2
    rc = cli.main(["train", "--stages", "0", "--out", str(out),
                   "--epochs-per-stage", "1",
                   "--set", "train.steps_per_epoch=2",
                   "--set", "train.n_clips=1", "--set", "train.clip_frames=3"])
    assert rc == 0
    assert (out / "stage0.pt").exists()
    rc = cli.main(["train", "--stages", "1", "--out", str(out),
                   "--epochs-per-stage", "1",
                   "--set", "train.steps_per_epoch=2",
                   "--set", "train.n_clips=1", "--set", "train.clip_frames=3"])
    assert rc == 0
    assert (out / "stage1.pt").exists()
    assert (out / "train_log.csv").exists()
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["args"]["stages"] == "1"
    assert "train.steps_per_epoch=2" in manifest["args"]["overrides"]


def test_encode_decode_roundtrip(workdir, model_ckpt, png_clip, capsys):
    stream = workdir / "seq.dvc"
    rc = cli.main(["encode", "--model", model_ckpt, "--input", png_clip,
                   "--output", str(stream), "--DS", "6", "--D", "3",
                   "--intra-period", "4", "--lambda-index", "2.0",
                   "--out", str(workdir)])
    assert rc == 0
    text = capsys.readouterr().out
    assert "bpp " in text and "frame 0:" in text
    assert stream.exists()

    outdir = workdir / "dec"
    rc = cli.main(["decode", "--model", model_ckpt, "--input", str(stream),
                   "--output", str(outdir), "--out", str(workdir)])
    assert rc == 0
    assert len([f for f in os.listdir(outdir) if f.endswith(".png")]) == 5

    # corrupting the stream length yields a stream error, exit 3
    blob = stream.read_bytes()
    stream.write_bytes(blob[:len(blob) - 40])
    rc = cli.main(["decode", "--model", model_ckpt, "--input", str(stream),
                   "--output", str(workdir / "dec2"), "--out", str(workdir)])
    assert rc == 3


def test_missing_checkpoint_exit_code(workdir, png_clip):
    rc = cli.main(["encode", "--model", str(workdir / "nope.pt"),
                   "--input", png_clip, "--output", str(workdir / "s.dvc"),
                   "--out", str(workdir)])
    assert rc == 2


def test_eval_identity_bd(workdir, capsys):
    from diffcodec.metrics import RdCurve, RdPoint
    curve = RdCurve([RdPoint(r, q) for r, q in
                     zip((0.1, 0.2, 0.4, 0.8), (30.0, 33.0, 36.0, 39.0))])
    p = workdir / "c.json"
    p.write_text(curve.to_json())
    rc = cli.main(["eval", "--anchor", str(p), "--test", str(p),
                   "--out", str(workdir)])
    assert rc == 0
    text = capsys.readouterr().out
    assert "0.00" in text
    rc = cli.main(["eval", "--pair", f"{p}:{p}", "--pair", f"{p}:{p}",
                   "--jobs", "2", "--out", str(workdir)])
    assert rc == 0
    rc = cli.main(["eval", "--out", str(workdir)])
    assert rc == 2


def test_bench_runs(workdir, capsys):
    rc = cli.main(["bench", "--frame-size", "64x64", "--DS", "4",
                   "--repeats", "2", "--out", str(workdir)])
    assert rc == 0
    text = capsys.readouterr().out
    assert "step_ratio" in text and "pframe_speedup_pct" in text


def test_ablate_report(workdir, model_ckpt, png_clip, capsys):
    report = workdir / "ablate.csv"
    rc = cli.main(["ablate", "--model", model_ckpt, "--input", png_clip,
                   "--DS", "4", "--sweep", "D=1,2", "--report", str(report),
                   "--set", "sequence.intra_period=4",
                   "--out", str(workdir)])
    assert rc == 0
    text = capsys.readouterr().out
    for mode in ("no_diffusion", "tdir_on", "qpp_off"):
        assert mode in text
    assert report.exists() and "bpp" in report.read_text()
    rc = cli.main(["ablate", "--model", model_ckpt, "--input", png_clip,
                   "--DS", "4", "--sweep", "Q=1", "--out", str(workdir)])
    assert rc == 2

import json

import numpy as np
import pytest

from modiff.cli import main
from modiff.data import load_dataset
from modiff.metrics import BeatSet, beat_alignment_score, motion_beat_set
from modiff.model import load_checkpoint
from modiff.motion import load_motion

TINY_INI = """[train]
base_channels = 4
channel_mults = 1 1 1
heads = 1
attn_dim = 4
context_dim = 4
diffusion_steps = 20
batch_size = 2
ckpt_every = 2
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["gen-data", "--out", str(root / "data"), "--n-sequences", "3", "--seed", "1"]) == 0
    (root / "tiny.ini").write_text(TINY_INI)
    assert main(["train", "--data-dir", str(root / "data"), "--config", str(root / "tiny.ini"), "--steps", "2",
                 "--ckpt-dir", str(root / "ck")]) == 0
    return root


def test_usage_errors(capsys):
    assert main([]) == 1
    assert main(["dance"]) == 1
    assert main(["sample", "--bogus"]) == 1
    assert main(["sample", "--ckpt", "x", "--out", "y"]) == 1  # no conditioning choice
    assert "usage" in capsys.readouterr().err


def test_help_and_version(capsys):
    assert main(["--help"]) == 0
    assert main(["--version"]) == 0


def test_runtime_error(tmp_path):
    assert main(["sample", "--ckpt", str(tmp_path / "none.ckpt"), "--uncond", "--length-sec", "1",
                 "--out", str(tmp_path / "o.json")]) == 2
    assert main(["train", "--data-dir", str(tmp_path)]) == 2


def test_sample_deterministic(workspace, tmp_path):
    ck = str(workspace / "ck" / "last.ckpt")
    wav = str(workspace / "data" / "seq_000.wav")
    for name in ("a", "b"):
        assert main(["sample", "--ckpt", ck, "--audio", wav, "--seed", "7", "--out", str(tmp_path / f"{name}.json")]) == 0
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    assert load_motion(tmp_path / "a.json").n_frames == 80


def test_env_seed(workspace, tmp_path, monkeypatch):
    ck = str(workspace / "ck" / "last.ckpt")
    assert main(["sample", "--ckpt", ck, "--uncond", "--length-sec", "1", "--seed", "7",
                 "--out", str(tmp_path / "flag.json")]) == 0
    monkeypatch.setenv("MODIFF_SEED", "7")
    assert main(["sample", "--ckpt", ck, "--uncond", "--length-sec", "1", "--out", str(tmp_path / "env.json")]) == 0
    assert (tmp_path / "flag.json").read_bytes() == (tmp_path / "env.json").read_bytes()
    monkeypatch.setenv("MODIFF_SEED", "eight")
    assert main(["sample", "--ckpt", ck, "--uncond", "--length-sec", "1", "--out", str(tmp_path / "x.json")]) == 1


def test_modality_mismatch(workspace, tmp_path):
    ck = str(workspace / "ck" / "last.ckpt")
    assert main(["sample", "--ckpt", ck, "--text", "a figure", "--length-sec", "1",
                 "--out", str(tmp_path / "x.json")]) == 1


def test_edit_prefix_40(workspace, tmp_path):
    ck = str(workspace / "ck" / "last.ckpt")
    seed = tmp_path / "seed.json"
    assert main(["sample", "--ckpt", ck, "--uncond", "--length-sec", "10", "--seed", "1", "--out", str(seed)]) == 0
    assert main(["edit", "--ckpt", ck, "--seed-motion", str(seed), "--mask", "prefix:40", "--seed", "2",
                 "--out", str(tmp_path / "e.json")]) == 0
    a, b = load_motion(seed).frames, load_motion(tmp_path / "e.json").frames
    assert a.shape == b.shape == (200, 24)
    assert a[:40].tobytes() == b[:40].tobytes()
    assert not np.array_equal(a[40:], b[40:])


def test_edit_keyframes_and_bad_masks(workspace, tmp_path):
    ck = str(workspace / "ck" / "last.ckpt")
    seed = str(workspace / "data" / "seq_001.json")
    out = tmp_path / "k.json"
    assert main(["edit", "--ckpt", ck, "--seed-motion", seed, "--mask", "keyframes:0,79", "--out", str(out)]) == 0
    a, b = load_motion(seed).frames, load_motion(out).frames
    assert a[[0, 79]].tobytes() == b[[0, 79]].tobytes()
    for bad in ("prefix:x", "keyframes:", "keyframes:0,80", "middle:3", "prefix:81"):
        assert main(["edit", "--ckpt", ck, "--seed-motion", seed, "--mask", bad, "--out", str(out)]) == 1
    # canvas longer than the seed motion: kept frames must come from the seed
    assert main(["edit", "--ckpt", ck, "--seed-motion", seed, "--mask", "prefix:40", "--length-sec", "10",
                 "--out", str(out)]) == 0
    assert load_motion(out).n_frames == 200


def test_eval_self(workspace, tmp_path):
    report = tmp_path / "r.json"
    assert main(["eval", "--data-dir", str(workspace / "data"), "--report", str(report)]) == 0
    r = json.loads(report.read_text())
    examples, _ = load_dataset(workspace / "data")
    intrinsic = np.mean([beat_alignment_score(BeatSet(e.music_beats, 20), motion_beat_set(e.motion.frames, 20))
                         for e in examples])
    assert r["fid"] <= 1e-3
    assert abs(r["bas"] - intrinsic) <= 1e-9
    assert r["n_sequences"] == 3 and r["multimodality"] is None
    assert report.read_text().count("\n") == 1
    assert json.loads(json.dumps(r)) == r


def test_eval_checkpoint(workspace, tmp_path):
    report = tmp_path / "r.json"
    assert main(["eval", "--ckpt", str(workspace / "ck" / "last.ckpt"), "--data-dir", str(workspace / "data"),
                 "--report", str(report), "--k", "3"]) == 0
    r = json.loads(report.read_text())
    assert set(r) == {"bas", "fid", "diversity", "multimodality", "n_sequences", "config_hash", "source"}
    assert r["multimodality"] > 0 and r["fid"] >= 0 and 0 <= r["bas"] <= 1


def test_mel_dump(workspace, tmp_path, capsys):
    wav = str(workspace / "data" / "seq_000.wav")
    assert main(["mel", "--audio", wav, "--out", str(tmp_path / "m.npy")]) == 0
    assert np.load(tmp_path / "m.npy").shape == (126, 80)
    assert main(["mel", "--audio", wav, "--out", str(tmp_path / "m.txt")]) == 0
    assert np.array_equal(np.loadtxt(tmp_path / "m.txt"), np.load(tmp_path / "m.npy"))


def test_train_flags_and_resume(workspace, tmp_path):
    data, ini = str(workspace / "data"), str(workspace / "tiny.ini")
    ck = tmp_path / "ck"
    assert main(["train", "--data-dir", data, "--config", ini, "--steps", "2", "--seed", "5", "--no-loss-a",
                 "--no-loss-s", "--ckpt-dir", str(ck)]) == 0
    _, _, header, _ = load_checkpoint(ck / "last.ckpt")
    tc = header["extra"]["train_config"]
    assert (tc["loss_a"], tc["loss_s"], tc["loss_m"], tc["rng_seed"]) == (False, False, True, 5)
    assert (ck / "train.ini").exists() and (ck / "train_log.jsonl").exists()
    assert main(["train", "--data-dir", data, "--steps", "4", "--ckpt-dir", str(ck), "--resume",
                 str(ck / "last.ckpt")]) == 0
    _, _, header, _ = load_checkpoint(ck / "last.ckpt")
    assert header["extra"]["step"] == 4 and header["extra"]["train_config"]["loss_a"] is False


def test_text_task(workspace, tmp_path):
    ck = tmp_path / "tk"
    data = str(workspace / "data")
    # text default warm-up (500) is longer than a 1-step run
    assert main(["train", "--task", "text", "--data-dir", data, "--config", str(workspace / "tiny.ini"),
                 "--steps", "1", "--ckpt-dir", str(ck)]) == 2
    ini = tmp_path / "text.ini"
    ini.write_text(TINY_INI + "warmup_steps = 0\n")
    assert main(["train", "--task", "text", "--data-dir", data, "--config", str(ini),
                 "--steps", "1", "--ckpt-dir", str(ck)]) == 0
    assert (ck / "vocab.tsv").exists()
    out = tmp_path / "t.json"
    assert main(["sample", "--ckpt", str(ck / "last.ckpt"), "--text", "a figure waves left arm",
                 "--length-sec", "2", "--seed", "3", "--out", str(out)]) == 0
    assert load_motion(out).n_frames == 40

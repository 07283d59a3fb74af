import filecmp
import re

import numpy as np
import pytest

from sslsv.audio_io import Waveform, load_wav, save_wav
from sslsv.cli import build_parser, main
from sslsv.nn import Model, ModelConfig, serialize

COMMANDS = ["train", "evaluate", "extract", "probe", "finetune", "gradcheck", "augment-preview", "synth-data"]


def subparsers():
    parser = build_parser()
    action = next(a for a in parser._actions if a.dest == "command")
    return action.choices


@pytest.mark.parametrize("command", COMMANDS)
def test_help_lists_every_flag(command, capsys):
    assert main([command, "--help"]) == 0
    text = capsys.readouterr().out
    sub = subparsers()[command]
    for action in sub._actions:
        for flag in action.option_strings:
            assert re.search(rf"(^|\s|\[){re.escape(flag)}\b", text), flag


def test_bad_usage_exit_two(capsys):
    assert main([]) == 2
    assert main(["frobnicate"]) == 2
    assert main(["probe", "--checkpoint", "m", "--data", "d", "--label-fraction", "0"]) == 2


def test_gradcheck_passes(capsys):
    assert main(["gradcheck"]) == 0
    out = capsys.readouterr().out
    assert "info_nce" in out and "vicreg" in out and "FAIL" not in out


def test_synth_data_byte_identical(tmp_path, capsys):
    args = ["--speakers", "2", "--utts-per-speaker", "2", "--test-utts-per-speaker", "2", "--trials", "4", "--seed", "7"]
    assert main(["synth-data", "--out", str(tmp_path / "a"), *args]) == 0
    assert main(["synth-data", "--out", str(tmp_path / "b"), *args]) == 0
    cmp = filecmp.dircmp(tmp_path / "a", tmp_path / "b")

    def same(c):
        return not (c.left_only or c.right_only or c.diff_files) and all(same(s) for s in c.subdirs.values())

    for name in ("train/spk00_utt000.wav", "trials.txt", "train.tsv", "noise/music/music00.wav"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert same(cmp)


def test_seed_env_fallback(tmp_path, monkeypatch, capsys):
    args = ["--speakers", "2", "--utts-per-speaker", "1", "--test-utts-per-speaker", "2", "--trials", "2"]
    monkeypatch.setenv("SSLSV_SEED", "3")
    main(["synth-data", "--out", str(tmp_path / "env"), *args])
    main(["synth-data", "--out", str(tmp_path / "flag"), *args, "--seed", "3"])
    main(["synth-data", "--out", str(tmp_path / "other"), *args, "--seed", "4"])
    wav = "train/spk00_utt000.wav"
    assert (tmp_path / "env" / wav).read_bytes() == (tmp_path / "flag" / wav).read_bytes()
    assert (tmp_path / "env" / wav).read_bytes() != (tmp_path / "other" / wav).read_bytes()
    monkeypatch.setenv("SSLSV_SEED", "abc")
    assert main(["synth-data", "--out", str(tmp_path / "bad"), *args]) == 1


@pytest.fixture
def trained(small_corpus, tmp_path_factory, capsys):
    out = tmp_path_factory.mktemp("run")
    code = main(["train", "--data", str(small_corpus.root), "--out", str(out), "--epochs", "2",
                 "--set", "batch_size=4", "--set", "model.hidden=16", "--set", "model.rep_dim=8",
                 "--set", "model.proj_dim=16", "--set", "n_crops=2", "--workers", "2"])
    assert code == 0
    return out


def test_train_outputs(trained):
    assert {"last.ckpt", "best.model", "metrics.tsv"} <= {p.name for p in trained.iterdir()}
    assert len((trained / "metrics.tsv").read_text().splitlines()) == 3


def test_evaluate_and_extract(trained, small_corpus, tmp_path, capsys):
    assert main(["evaluate", "--checkpoint", str(trained / "best.model"),
                 "--trials", str(small_corpus.root / "trials.txt"), "--scores", str(tmp_path / "s.tsv")]) == 0
    out = capsys.readouterr().out
    assert re.search(r"EER \d+\.\d+%", out) and "minDCF" in out
    assert len((tmp_path / "s.tsv").read_text().splitlines()) == len(small_corpus.trials)

    wav = small_corpus.root / "test" / "spk00_utt000.wav"
    assert main(["extract", "--checkpoint", str(trained / "last.ckpt"), "--wav", str(wav)]) == 0
    assert len(capsys.readouterr().out.split()) == 8


def test_evaluate_shape_mismatch(trained, small_corpus, tmp_path, capsys):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("model.hidden = 16\nmodel.rep_dim = 12\nmodel.proj_dim = 16\n")
    code = main(["evaluate", "--checkpoint", str(trained / "best.model"), "--config", str(cfg),
                 "--trials", str(small_corpus.root / "trials.txt")])
    assert code == 1
    err = capsys.readouterr().err.strip()
    assert len(err.splitlines()) == 1 and "shape" in err


def test_probe_and_finetune(trained, small_corpus, tmp_path, capsys):
    root, trials = str(small_corpus.root), str(small_corpus.root / "trials.txt")
    ckpt = str(trained / "best.model")
    assert main(["probe", "--checkpoint", ckpt, "--data", root, "--trials", trials,
                 "--label-fraction", "0.5", "--n-crops", "2"]) == 0
    assert "probe EER" in capsys.readouterr().out
    assert main(["finetune", "--checkpoint", ckpt, "--data", root, "--out", str(tmp_path / "ft.model"),
                 "--epochs", "1", "--batch-size", "4", "--label-fraction", "1"]) == 0
    assert (tmp_path / "ft.model").exists()


def test_augment_preview(small_corpus, tmp_path, capsys):
    src = small_corpus.root / "test" / "spk01_utt000.wav"
    args = ["augment-preview", "--in", str(src), "--noise-dir", str(small_corpus.noise_dir),
            "--rir-dir", str(small_corpus.rir_dir), "--p-noise", "1", "--p-reverb", "1"]
    assert main([*args, "--out", str(tmp_path / "a.wav"), "--seed", "5"]) == 0
    assert main([*args, "--out", str(tmp_path / "b.wav"), "--seed", "5"]) == 0
    assert (tmp_path / "a.wav").read_bytes() == (tmp_path / "b.wav").read_bytes()
    assert len(load_wav(tmp_path / "a.wav")) == len(load_wav(src))
    assert "noise" in capsys.readouterr().out


def test_validation_errors_are_one_line(tmp_path, capsys):
    save_wav(Waveform(np.zeros(10)), tmp_path / "a.wav")
    (tmp_path / "junk.model").write_bytes(b"not a model at all")
    cases = [
        ["evaluate", "--checkpoint", str(tmp_path / "missing.model"), "--trials", "t.txt"],
        ["extract", "--checkpoint", str(tmp_path / "junk.model"), "--wav", str(tmp_path / "a.wav")],
        ["augment-preview", "--in", str(tmp_path / "a.wav"), "--out", str(tmp_path / "b.wav")],
        ["train", "--data", str(tmp_path), "--out", str(tmp_path / "o")],
    ]
    for argv in cases:
        assert main(argv) == 1, argv
        err = capsys.readouterr().err.strip()
        assert len(err.splitlines()) == 1 and "error" in err


def test_extract_rejects_bad_wav(tmp_path, capsys):
    import wave

    with wave.open(str(tmp_path / "st.wav"), "wb") as f:
        f.setnchannels(2)
        f.setsampwidth(2)
        f.setframerate(16000)
        f.writeframes(b"\x00" * 400)
    (tmp_path / "m.model").write_bytes(serialize(Model(ModelConfig(hidden=(4,), rep_dim=4, proj_dim=0))))
    assert main(["extract", "--checkpoint", str(tmp_path / "m.model"), "--wav", str(tmp_path / "st.wav")]) == 1
    assert "mono" in capsys.readouterr().err

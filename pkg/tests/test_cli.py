import json

import numpy as np
import pytest

from mrpn.cli import main
from mrpn.preproc import read_raw_matrix, write_wav

TINY = {
    "data": {
        "n_classes": 3,
        "n_actors": 4,
        "per_cell": 3,
        "modalities": [
            {"name": "video", "d_raw": 4, "t_min": 2, "t_max": 5},
            {"name": "audio", "d_raw": 3, "t_min": 2, "t_max": 5, "fuzziness": 0.4},
        ],
        "seed": 1,
    },
    "model": {"feat_dim": 4},
    "train": {"lr": 0.003, "max_epochs": 2, "batch_size": 8},
}


@pytest.fixture
def cfg_path(tmp_path):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(TINY))
    return p


def test_gen_data(cfg_path, tmp_path, capsys):
    assert main(["gen-data", "--config", str(cfg_path), "--out", str(tmp_path / "ds")]) == 0
    lines = (tmp_path / "ds" / "manifest.jsonl").read_text().splitlines()
    assert len(lines) == 2 * 3 * 4 * 3
    assert "36 samples" in capsys.readouterr().out


def test_seed_env_override(cfg_path, tmp_path, monkeypatch):
    monkeypatch.setenv("MRPN_SEED", "7")
    main(["gen-data", "--config", str(cfg_path), "--out", str(tmp_path / "a")])
    assert json.loads((tmp_path / "a" / "config.json").read_text())["seed"] == 7


@pytest.mark.parametrize("variant,strategy", [("n2", "e2e"), ("n0", "late"), ("uni-a", "e2e")])
def test_train_then_eval(cfg_path, tmp_path, capsys, variant, strategy):
    out = tmp_path / "runs"
    assert main(["train", "--variant", variant, "--strategy", strategy, "--config", str(cfg_path), "--fold", "1", "--out", str(out)]) == 0
    ckpt = next(out.glob("*.ckpt"))
    report = json.loads(ckpt.with_suffix(".json").read_text())
    assert report["fold"] == 1 and report["variant"] == variant
    capsys.readouterr()
    assert main(["eval", "--checkpoint", str(ckpt)]) == 0
    shown = capsys.readouterr().out
    assert f"accuracy {report['accuracy']:.4f}" in shown


def test_uni_late_is_rejected(cfg_path, tmp_path, capsys):
    assert main(["train", "--variant", "uni-v", "--strategy", "late", "--config", str(cfg_path), "--out", str(tmp_path)]) == 2
    assert "late fusion" in capsys.readouterr().err


def test_grid(tmp_path, capsys):
    sweep = {**TINY, "variants": ["n0", "n1"], "strategies": ["e2e"], "folds": [0, 1], "seeds": [0]}
    p = tmp_path / "sweep.json"
    p.write_text(json.dumps(sweep))
    assert main(["grid", "--config", str(p), "--out", str(tmp_path / "g")]) == 0
    assert len((tmp_path / "g" / "results.csv").read_text().splitlines()) == 1 + 4
    assert (tmp_path / "g" / "confusion_n1_e2e.pgm").exists()


def test_spectrogram(tmp_path, capsys):
    wav = tmp_path / "tone.wav"
    t = np.arange(int(1.8 * 44100)) / 44100
    write_wav(wav, 0.5 * np.sin(2 * np.pi * 1000 * t), 44100)
    out = tmp_path / "s.raw"
    assert main(["spectrogram", str(wav), "--out", str(out), "--pgm", str(tmp_path / "s.pgm")]) == 0
    m = read_raw_matrix(out)
    assert m.shape == (256, 250)
    assert np.all(np.argmax(m[:, 4:-4], axis=0) == 32)
    assert "5 segments" in capsys.readouterr().out
    assert (tmp_path / "s.pgm").read_bytes().startswith(b"P5\n250 256\n")


def test_bad_wav_reports_offset(tmp_path, capsys):
    bad = tmp_path / "bad.wav"
    bad.write_bytes(b"RIFF\0\0\0\0WAVX")
    assert main(["spectrogram", str(bad), "--out", str(tmp_path / "x.raw")]) == 2
    assert "offset 8" in capsys.readouterr().err


def test_gradcheck_reports_every_network(capsys):
    main(["gradcheck", "--seeds", "1"])
    out = capsys.readouterr().out
    for tag in ("N0", "N1", "N2"):
        assert f"{tag} mean_pool" in out and f"{tag} simple_recurrent" in out

import csv
import json
import math

import pytest

from artinoise.cli import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, main
from artinoise.numeric import load_tensor, save_tensor

SMALL = ["--set", "height=32", "--set", "width=32", "--set", "texture_u=16", "--set", "texture_v=16",
         "--set", "denoiser_widths=4,8", "--set", "decoder_widths=4,4", "--set", "sample_steps=4"]


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    assert main(["gen-data", "--out", str(out), "--clips", "4", "--seed", "3", *SMALL]) == EXIT_OK
    return out


@pytest.fixture(scope="module")
def checkpoint(dataset, tmp_path_factory):
    ckpt = tmp_path_factory.mktemp("run") / "model.ckpt"
    code = main(["train", "--data", str(dataset), "--checkpoint", str(ckpt), "--preset", "full",
                 "--set", "steps=50", "--set", "learning_rate=1e-3", *SMALL])
    assert code == EXIT_OK
    return ckpt


def test_gen_data_layout(dataset):
    clips = sorted(p for p in dataset.iterdir() if p.is_dir())
    assert len(clips) == 4
    for d in clips:
        assert load_tensor(d / "video.anwt").shape == (9, 32, 32, 3)
        assert load_tensor(d / "motion.anwt").shape == (9, 32, 32, 4)
        assert (d / "skeleton.ini").exists() and (d / "poses.anwt").exists()
    manifest = json.loads((dataset / "manifest.json").read_text())
    assert [c["name"] for c in manifest["clips"]] == [d.name for d in clips]
    assert all(isinstance(c["seed"], int) for c in manifest["clips"])
    assert "[video]" in manifest["config"]


def test_gen_data_is_reproducible(dataset, tmp_path):
    assert main(["gen-data", "--out", str(tmp_path), "--clips", "4", "--seed", "3", *SMALL]) == EXIT_OK
    for f in sorted(dataset.rglob("*")):
        if f.is_file():
            assert (tmp_path / f.relative_to(dataset)).read_bytes() == f.read_bytes(), f.name


def test_train_smoke_run(checkpoint):
    rows = list(csv.DictReader(open(checkpoint.with_suffix(".log.csv"))))
    assert len(rows) == 50
    for r in rows:
        for key in ("l_diff", "l_mc", "total"):
            assert math.isfinite(float(r[key]))
    assert (checkpoint.parent / "model.config.ini").exists()


def test_train_missing_dataset(tmp_path):
    assert main(["train", "--data", str(tmp_path / "nope"), "--checkpoint", str(tmp_path / "m.ckpt")]) == EXIT_RUNTIME


def test_animate_is_deterministic(dataset, checkpoint, tmp_path):
    clip = dataset / "clip_000"
    outs = []
    for k in range(2):
        out = tmp_path / f"run{k}"
        code = main(["animate", "--checkpoint", str(checkpoint), "--reference", str(clip / "video.anwt"),
                     "--poses", str(clip / "poses.anwt"), "--skeleton", str(clip / "skeleton.ini"),
                     "--out", str(out)])
        assert code == EXIT_OK
        outs.append((out / "video.anwt").read_bytes())
        assert len(list(out.glob("frame_*.ppm"))) == 9
    assert outs[0] == outs[1]


def test_animate_missing_checkpoint(dataset, tmp_path):
    clip = dataset / "clip_000"
    code = main(["animate", "--checkpoint", str(tmp_path / "none.ckpt"), "--reference",
                 str(clip / "video.anwt"), "--poses", str(clip / "poses.anwt")])
    assert code == EXIT_RUNTIME


def test_eval_identical_inputs(dataset, tmp_path):
    gen = tmp_path / "gen"
    for d in dataset.iterdir():
        if d.is_dir():
            (gen / d.name).mkdir(parents=True)
            save_tensor(gen / d.name / "video.anwt", load_tensor(d / "video.anwt"))
    out = tmp_path / "metrics.csv"
    assert main(["eval", "--generated", str(gen), "--truth", str(dataset), "--out", str(out), *SMALL]) == EXIT_OK
    rows = list(csv.DictReader(open(out)))
    assert len(rows) == 5
    agg = rows[-1]
    assert float(agg["l1"]) == 0.0 and float(agg["ssim"]) == 1.0 and float(agg["silhouette_iou"]) == 1.0


def test_eval_missing_file(dataset, tmp_path):
    assert main(["eval", "--generated", str(tmp_path), "--truth", str(dataset)]) == EXIT_RUNTIME


def test_sweep_gamma_rows_and_summary(dataset, checkpoint, tmp_path):
    out = tmp_path / "sweep.csv"
    code = main(["sweep-gamma", "--checkpoint", str(checkpoint), "--truth", str(dataset),
                 "--gammas", "0.0,0.1,0.5,1.0", "--out", str(out)])
    assert code == EXIT_OK
    rows = list(csv.DictReader(open(out)))
    assert [float(r["gamma"]) for r in rows] == [0.0, 0.1, 0.5, 1.0]
    summary = json.loads(out.with_suffix(".summary.json").read_text())
    best = max(rows, key=lambda r: float(r["ssim"]))
    assert summary["best_ssim_gamma"] == float(best["gamma"])


def test_dump_noise(dataset, tmp_path):
    clip = dataset / "clip_001"
    code = main(["dump-noise", "--poses", str(clip / "poses.anwt"), "--skeleton", str(clip / "skeleton.ini"),
                 "--out", str(tmp_path), *SMALL])
    assert code == EXIT_OK
    assert load_tensor(tmp_path / "noise.anwt").shape == (9, 32, 32, 8)
    assert len(list(tmp_path.glob("*.ppm"))) == 9 * 2


def test_usage_errors(capsys):
    assert main([]) == EXIT_USAGE
    assert main(["frobnicate"]) == EXIT_USAGE
    assert main(["show-config", "--set", "nonsense"]) == EXIT_USAGE
    assert main(["show-config", "--set", "video.height=33"]) == EXIT_USAGE
    assert main(["sweep-gamma", "--truth", "x", "--gammas", "0.1,2"]) == EXIT_USAGE


def test_show_config_roundtrip(tmp_path, capsys):
    assert main(["show-config", "--set", "gamma=0.3", "--set", "train.learning_rate=0.002"]) == EXIT_OK
    text = capsys.readouterr().out
    (tmp_path / "c.ini").write_text(text)
    assert main(["show-config", "--config", str(tmp_path / "c.ini")]) == EXIT_OK
    assert capsys.readouterr().out == text
    assert "gamma = 0.3" in text and "learning_rate = 0.002" in text


def test_threads_env(monkeypatch, capsys):
    monkeypatch.setenv("ARTINOISE_THREADS", "1")
    assert main(["show-config"]) == EXIT_OK

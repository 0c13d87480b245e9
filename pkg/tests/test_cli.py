import csv
import json

import numpy as np
import pytest

from latmask import cli, data
from latmask.models import Autoencoder, AutoencoderConfig, Tagger, TaggerConfig
from latmask.models.checkpoint import load

SMALL = ["--set", "data.train_per_kind=3", "--set", "data.val_per_kind=1", "--set", "data.test_per_kind=1",
         "--set", "data.duration=1.0", "--set", "run.eval_mixtures=2", "--set", "run.eval_duration=1.0"]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Output root holding untrained narrow checkpoints and two evaluation mixtures."""
    root = tmp_path_factory.mktemp("cli")
    models = root / "models"
    Autoencoder(AutoencoderConfig(channels=8, seed=3)).save(models / "autoencoder.lmk")
    for arch in ("fcn_mini", "mrs_mini"):
        Tagger(TaggerConfig(arch=arch, channels=8, seed=3)).save(models / f"tagger_{arch}.lmk")
    assert cli.main(["-q", "--set", f"run.out_dir={root}"] + SMALL + ["synth"]) == 0
    return root


def run(root, *argv):
    return cli.main(["-q", "--set", f"run.out_dir={root}"] + SMALL + list(argv))


def test_synth_writes_dataset_and_mixtures(workspace):
    lines = (workspace / "dataset" / "manifest.tsv").read_text().splitlines()
    assert len(lines) == 5 * 5
    mix = workspace / "eval_mixtures" / "mix_000"
    parts = [data.read_wav(mix / f"{k}.wav").samples for k in ("tonal_harmonic", "percussive")]
    total = data.read_wav(mix / "mixture.wav").samples
    assert np.allclose(parts[0] + parts[1], total, atol=1e-6)
    assert json.loads((workspace / "dataset" / "config.json").read_text())["data"]["train_per_kind"] == 3


def test_dry_run_writes_nothing(tmp_path, capsys):
    assert run(tmp_path / "out", "synth", "--dry-run") == 0
    out = capsys.readouterr().out.splitlines()
    assert len(out) == 25 + 2 and out[0].startswith("train\ttrain/clip_00000.wav")
    assert not (tmp_path / "out").exists()


def test_config_errors_exit_2(tmp_path, capsys):
    assert cli.main(["--config", str(tmp_path / "missing.cfg"), "synth", "--dry-run"]) == 2
    assert "missing.cfg" in capsys.readouterr().err
    assert cli.main(["--set", "separation.bogus=1", "synth", "--dry-run"]) == 2
    assert cli.main(["--set", "noequals", "synth", "--dry-run"]) == 2
    assert cli.main(["--jobs", "0", "synth", "--dry-run"]) == 2


def test_separate_outputs_and_echo(workspace):
    out = workspace / "sep"
    mix = workspace / "eval_mixtures" / "mix_000" / "mixture.wav"
    assert run(workspace, "separate", str(mix), "--tags", "percussive", "--steps", "2", "--out", str(out)) == 0
    run_dir = out / "mix_000"
    record = json.loads((run_dir / "run.json").read_text())
    assert record["config"]["steps"] == 2 and record["config"]["learning_rate"] == 5.0
    assert record["config"]["fft_sizes"] == [1024] and len(record["losses"]) == 2
    assert record["effective_config"]["separation"]["steps"] == 2
    x = data.read_wav(mix).samples.astype(np.float64)
    s_out = data.read_wav(run_dir / "residual.wav").samples.astype(np.float64)
    s_bar = data.read_wav(run_dir / "masked.wav").samples.astype(np.float64)
    assert np.linalg.norm(s_out + s_bar - x) <= 1e-5 * np.linalg.norm(x)
    assert np.array_equal(data.read_wav(run_dir / "estimate.wav").samples, s_out.astype(np.float32))


def test_separate_is_reproducible(workspace):
    mixes = [str(workspace / "eval_mixtures" / m / "mixture.wav") for m in ("mix_000", "mix_001")]
    digests = []
    for name, jobs in (("a", "1"), ("b", "2")):
        out = workspace / f"repro_{name}"
        assert run(workspace, "--jobs", jobs, "separate", *mixes, "--tags", "percussive", "--steps", "1",
                   "--fft-sizes", "256,1024", "--out", str(out)) == 0
        digests.append({p.relative_to(out).as_posix(): data.file_digest(p) for p in sorted(out.rglob("*"))
                        if p.is_file()})
    assert len(digests[0]) == 8 and digests[0] == digests[1]


def test_style_transfer_mode(workspace):
    out = workspace / "style"
    mix = workspace / "eval_mixtures" / "mix_001" / "mixture.wav"
    assert run(workspace, "separate", str(mix), "--tags", "bell_fm", "--steps", "1", "--mode", "style-transfer",
               "--out", str(out)) == 0
    record = json.loads((out / "mix_001" / "run.json").read_text())
    assert record["mode"] == "style-transfer" and len(record["final_probs"]) == 5
    assert (out / "mix_001" / "style.wav").exists()


def test_separate_bad_tag_and_missing_models(workspace, tmp_path):
    mix = str(workspace / "eval_mixtures" / "mix_000" / "mixture.wav")
    assert run(workspace, "separate", mix, "--tags", "vocals", "--out", str(tmp_path)) == 2
    assert run(tmp_path, "separate", mix, "--tags", "percussive", "--out", str(tmp_path)) == 4


def test_eval_command(workspace, tmp_path, capsys):
    out = workspace / "sep_eval"
    mixes = [str(workspace / "eval_mixtures" / m / "mixture.wav") for m in ("mix_000", "mix_001")]
    assert run(workspace, "separate", *mixes, "--tags", "percussive", "--steps", "1", "--convention", "masked",
               "--out", str(out)) == 0
    capsys.readouterr()
    assert run(workspace, "eval", str(out), str(workspace / "eval_mixtures"), "--csv", str(tmp_path / "e.csv")) == 0
    assert "percussive: mean" in capsys.readouterr().out
    with (tmp_path / "e.csv").open() as fh:
        assert len(list(csv.DictReader(fh))) == 2
    assert run(workspace, "eval", str(tmp_path / "empty"), str(workspace / "eval_mixtures")) == 1
    (out / "mix_000" / "estimate.wav").unlink()
    assert run(workspace, "eval", str(out), str(workspace / "eval_mixtures")) == 4


def test_pretrain_seed_is_reproducible(workspace):
    tiny = ["--set", "tagger.channels=8", "--set", "tagger_train.epochs=1"]
    digests = []
    for name in ("a", "b"):
        models = workspace / f"pretrained_{name}"
        assert run(workspace, "--set", f"run.models_dir={models}", *tiny, "pretrain", "tagger", "--arch", "mrs_mini",
                   "--seed", "7") == 0
        arrays, meta = load(models / "tagger_mrs_mini.lmk")
        assert meta["config"]["arch"] == "mrs_mini" and meta["config"]["seed"] == 7
        assert (models / "tagger_mrs_mini_curve.csv").exists()
        digests.append(data.file_digest(models / "tagger_mrs_mini.lmk"))
    assert digests[0] == digests[1]


def test_pretrain_autoencoder_command(workspace):
    models = workspace / "pretrained_ae"
    assert run(workspace, "--set", f"run.models_dir={models}", "--set", "autoencoder.channels=8",
               "--set", "autoencoder_train.epochs=1", "--set", "autoencoder_train.max_clips=4",
               "pretrain", "autoencoder") == 0
    meta = json.loads((models / "autoencoder.json").read_text())
    assert meta["metrics"]["loss_ratio"] > 0 and len(meta["sha256"]) == 64


def test_ablate_grid(workspace):
    out = workspace / "ablation"
    assert run(workspace, "--set", "separation.steps=1", "--set", "separation.fft_sizes=256", "ablate",
               "--out", str(out), "--dataset", str(workspace / "ablation_mixtures")) == 0
    with (out / "ablation.csv").open() as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 10
    assert {(r["tagger"], r["source_tag"]) for r in rows} == {(a, "~" + k) for a in ("fcn_mini", "mrs_mini")
                                                             for k in data.KINDS}
    assert all(np.isfinite(float(r["mean_sdri_db"])) and r["n"] == "4" for r in rows)
    # grid means recompute from the per-run evaluation
    with (out / "fcn_mini" / "eval.csv").open() as fh:
        evals = [r for r in csv.DictReader(fh) if r["source_tag"] == "~percussive"]
    grid = next(r for r in rows if r["tagger"] == "fcn_mini" and r["source_tag"] == "~percussive")
    assert float(grid["mean_sdri_db"]) == pytest.approx(np.mean([float(r["sdri_db"]) for r in evals]), abs=1e-12)

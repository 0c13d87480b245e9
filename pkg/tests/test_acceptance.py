"""End-to-end acceptance suite: one test, and one printed PASS/FAIL line, per criterion.

Criteria 4-10 use the session ``trained`` fixture (default-config
pretraining of the autoencoder and both taggers), so the first of them to
run pays for training once.
"""
import csv
import hashlib
import time

import numpy as np
import pytest
from test_autodiff import CASES
from test_dsp import mask_property_holds

from latmask import autodiff as ad
from latmask import cli, data, dsp
from latmask.config import RunConfig
from latmask.evaluation import irm_oracle, sdr_improvement
from latmask.models import tagger_var
from latmask.separation import SeparationConfig, init_state, masked_signal, separate, tag_loss

PERC = data.VOCAB.multi_hot(["percussive"])


def report(capsys, number, ok, detail):
    with capsys.disabled():
        print(f"\ncriterion {number}: {'PASS' if ok else 'FAIL'} - {detail}")
    assert ok, detail


def eval_mixtures():
    return [data.make_mixture(spec) for _, spec in cli.eval_mixture_specs(RunConfig())]


@pytest.fixture(scope="module")
def eval_runs(models):
    """Default-config separation of the 20 evaluation mixtures, timed."""
    start = time.perf_counter()
    runs = [(mix, stems, separate(mix, PERC, models)) for mix, stems, _ in eval_mixtures()]
    return runs, time.perf_counter() - start


@pytest.fixture(scope="module")
def descent_runs(models):
    """50 fixed-seed default-config runs on 2-s tonal+percussive mixtures."""
    out = []
    for seed in range(50):
        mix, _, _ = data.make_mixture(data.pair_mixture(("tonal_harmonic", "percussive"), 7000 + seed, 2.0))
        out.append((mix, separate(mix, PERC, models)))
    return out


# -- 1 -----------------------------------------------------------------------

def test_criterion_1_autodiff(capsys, tiny_models):
    start = time.perf_counter()
    worst, failed = 0.0, []
    for name, (sampler, build) in sorted(CASES.items()):
        for seed in range(10):
            x = sampler(np.random.default_rng([seed, 1]))
            r = ad.grad_check(lambda tape, v: build(tape, v, np.random.default_rng([seed, 2])), x, h=1e-6, tol=1e-4)
            worst = max(worst, r.max_rel_error)
            if not r.passed:
                failed.append(f"{name}/{seed}")

    # composite: latent -> decode -> mask -> istft -> tagger -> BCE
    cfg = SeparationConfig(fft_sizes=(256,), dtype="float64")
    mix, _, _ = data.make_mixture(data.pair_mixture(("tonal_harmonic", "percussive"), 1, 1.0))
    # a noise floor keeps activations off the ReLU kinks that exact silence lands on
    x = mix.samples + 0.01 * np.random.default_rng(5).standard_normal(mix.samples.size)
    state = init_state(x, tiny_models, cfg)

    def loss_through_mask(tape, e):
        s_bar, _ = masked_signal(tape, tiny_models, e, state, cfg)
        return tag_loss(tagger_var(tiny_models.tagger, s_bar), PERC)

    # latent coordinates are O(10) and the loss sums 8000 samples, so the step is scaled up
    # to keep round-off below the tolerance on the smallest gradient entries
    composite = ad.grad_check(loss_through_mask, state.e, h=3e-5, tol=1e-3, indices=range(0, state.e.size, 331))
    seconds = time.perf_counter() - start
    ok = not failed and composite.passed and seconds < 30
    report(capsys, 1, ok, f"{len(CASES)} primitive cases x 10 seeds, worst rel err {worst:.1e}, failures {failed}; "
                          f"composite rel err {composite.max_rel_error:.1e} (tol 1e-3, h 3e-5); {seconds:.1f} s")


# -- 2 -----------------------------------------------------------------------

def test_criterion_2_stft_round_trip(capsys):
    errors = []
    for seed in range(20):
        x = np.random.default_rng(seed).standard_normal(16000)
        y = dsp.istft(dsp.stft(x, 1024), x.size).value
        errors.append(np.linalg.norm(y - x) / np.linalg.norm(x))
    report(capsys, 2, max(errors) <= 1e-6, f"max relative L2 error {max(errors):.1e} over 20 signals")


# -- 3 -----------------------------------------------------------------------

def test_criterion_3_mask_contract(capsys):
    tape = ad.Tape()
    examples = [
        dsp.build_mask(tape.const([[3.0]]), np.array([[4.0]])).values.value[0, 0] == 3.0 / (4.0 + 1e-8),
        not np.any(dsp.build_mask(tape.const(np.zeros((2, 3))), np.ones((2, 3))).values.value),
        dsp.build_mask(tape.const([[2.0]]), np.array([[2.0]])).values.value[0, 0] == 2.0 / (2.0 + 1e-8) < 1.0,
    ]
    rng = np.random.default_rng(99)
    j = 10.0 ** rng.uniform(-5, 3, 10_000)
    x = 10.0 ** rng.uniform(-5, 3, 10_000)
    j[::50] = 0.0
    x[1::50] = j[1::50]
    props = [mask_property_holds(j[100 * k:100 * (k + 1)], x[100 * k:100 * (k + 1)], eps)
             for k, eps in enumerate(10.0 ** rng.uniform(-8, 0, 100))]
    ok = all(examples) and all(props)
    report(capsys, 3, ok, f"examples {sum(examples)}/3 exact; range and monotonicity on 10^4 triples: {all(props)}")


# -- 4 -----------------------------------------------------------------------

def test_criterion_4_models_stay_frozen(capsys, trained, models):
    files = {p.name: data.file_digest(p) for p in sorted(trained["dir"].glob("*.lmk"))}
    before = models.digests()
    for seed in range(5):
        mix, _, _ = data.make_mixture(data.pair_mixture(("tonal_harmonic", "percussive"), 900 + seed, 2.0))
        separate(mix, PERC, models)
    after = models.digests()
    files_after = {p.name: data.file_digest(p) for p in sorted(trained["dir"].glob("*.lmk"))}
    ok = before == after and files == files_after
    report(capsys, 4, ok, "in-memory and on-disk checkpoint digests identical after 5 separation runs")


# -- 5 -----------------------------------------------------------------------

def test_criterion_5_stand_in_quality(capsys, trained):
    ratio = trained["ae_report"].metrics["loss_ratio"]
    aucs = {a: r.metrics["macro_auc"] for a, r in trained["tagger_reports"].items()}
    seconds = trained["seconds"]
    ok = ratio <= 0.5 and all(v >= 0.95 for v in aucs.values()) and seconds < 15 * 60
    auc_text = ", ".join(f"{a} {v:.3f}" for a, v in aucs.items())
    report(capsys, 5, ok, f"VQ loss ratio {ratio:.3f} (<= 0.5); macro AUC {auc_text} (>= 0.95); "
                          f"pretraining {seconds / 60:.1f} min (< 15)")


# -- 6 -----------------------------------------------------------------------

def test_criterion_6_loss_descent(capsys, descent_runs):
    down = sum(r.final_loss < r.losses[0] for _, r in descent_runs)
    report(capsys, 6, down >= 45, f"final BCE < initial BCE in {down}/50 default-config runs (need >= 45)")


# -- 7 -----------------------------------------------------------------------

def test_criterion_7_separation(capsys, eval_runs):
    runs, seconds = eval_runs
    target_sdri, residual_sdri, oracle = [], [], []
    for mix, stems, r in runs:
        tonal, perc = stems[0].samples, stems[1].samples
        target_sdri.append(sdr_improvement(perc, mix.samples, r.s_bar.samples))
        residual_sdri.append(sdr_improvement(tonal, mix.samples, r.s_out.samples))
        oracle.append(irm_oracle(stems, mix).sdri[1])
    share = np.mean(np.array(target_sdri) > 0)
    ok = share >= 0.8 and seconds < 300
    report(capsys, 7, ok, f"target estimate SDRi > 0 in {share:.0%} of 20 (need >= 80%), median "
                          f"{np.median(target_sdri):.2f} dB; residual vs tonal median {np.median(residual_sdri):.2f} dB; "
                          f"IRM oracle median {np.median(oracle):.1f} dB, min {min(oracle):.1f} dB; {seconds:.0f} s")


# -- 8 -----------------------------------------------------------------------

def test_criterion_8_ablation_grid(capsys, trained, tmp_path):
    root = ["-q", "--set", f"run.models_dir={trained['dir']}", "--set", f"run.out_dir={tmp_path}"]
    code = cli.main(root + ["ablate"])
    with (tmp_path / "ablation" / "ablation.csv").open() as fh:
        rows = list(csv.DictReader(fh))
    cells = {(r["tagger"], r["source_tag"]): float(r["mean_sdri_db"]) for r in rows}
    full = len(cells) == 10 and {t for t, _ in cells} == {"fcn_mini", "mrs_mini"}
    finite = all(np.isfinite(v) for v in cells.values())
    tags = sorted({k for _, k in cells})
    fcn_wins = sum(cells.get(("fcn_mini", k), 0) > cells.get(("mrs_mini", k), 0) for k in tags)
    ok = code == 0 and full and finite
    report(capsys, 8, ok, f"{len(cells)} cells, all finite: {finite}; fcn_mini above mrs_mini in "
                          f"{fcn_wins}/{len(tags)} sources (reported, not gated)")


# -- 9 -----------------------------------------------------------------------

def test_criterion_9_conservation(capsys, eval_runs, descent_runs):
    results = [(mix, r) for mix, _, r in eval_runs[0]] + descent_runs
    worst = max(np.linalg.norm(r.s_out.samples + r.s_bar.samples - mix.samples) / np.linalg.norm(mix.samples)
                for mix, r in results)
    report(capsys, 9, worst <= 1e-5, f"max relative |s_out + s_bar - x| {worst:.1e} over {len(results)} runs")


# -- 10 ----------------------------------------------------------------------

def test_criterion_10_determinism(capsys, trained, tmp_path):
    small = ["--set", "data.train_per_kind=3", "--set", "data.val_per_kind=1", "--set", "data.test_per_kind=1",
             "--set", "run.eval_mixtures=2", "--set", "tagger_train.epochs=2", "--set", "autoencoder_train.epochs=1",
             "--set", "autoencoder_train.max_clips=4", "--set", "autoencoder.channels=8"]

    def pipeline(out):
        base = ["-q", "--set", f"run.out_dir={out}"] + small
        sep = base + ["--set", f"run.models_dir={trained['dir']}"]
        mixes = [str(out / "eval_mixtures" / m / "mixture.wav") for m in ("mix_000", "mix_001")]
        codes = [cli.main(base + ["synth"]),
                 cli.main(base + ["pretrain", "autoencoder", "--seed", "3"]),
                 cli.main(base + ["pretrain", "tagger", "--arch", "mrs_mini", "--seed", "3"]),
                 cli.main(sep + ["separate", *mixes, "--tags", "percussive", "--out", str(out / "sep")]),
                 cli.main(sep + ["separate", mixes[0], "--tags", "percussive", "--mode", "style-transfer",
                                 "--out", str(out / "style")]),
                 cli.main(base + ["eval", str(out / "sep"), str(out / "eval_mixtures"), "--csv", str(out / "e.csv")])]
        digests = {}
        for p in sorted(out.rglob("*")):
            if p.is_file():
                # JSON records embed the output root, which is all that differs between a and b
                raw = p.read_bytes().replace(str(out).encode(), b"<out>")
                digests[p.relative_to(out).as_posix()] = hashlib.sha256(raw).hexdigest()
        return codes, digests

    codes_a, a = pipeline(tmp_path / "a")
    codes_b, b = pipeline(tmp_path / "b")
    ok = codes_a == codes_b == [0] * 6 and a == b
    report(capsys, 10, ok, f"synth, pretrain x2, separate, style-transfer and eval re-run: {len(a)} artifacts, "
                           f"{sum(a[k] == b.get(k) for k in a)} identical")

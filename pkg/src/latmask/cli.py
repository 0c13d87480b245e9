"""Command-line entry point: synth, pretrain, separate, ablate, eval.

Exit codes: 0 success, 1 nothing to evaluate, 2 configuration error,
3 numerical error, 4 I/O or file-format error.  Progress goes to stderr;
every artifact is written to files together with the effective config.
"""
import argparse
import csv
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from latmask import data, dsp
from latmask.config import ENV_VAR, load_config
from latmask.errors import ConfigError, ContractError, FormatError, NumericalError, ReportError
from latmask.evaluation import evaluate_run

log = logging.getLogger("latmask")

EXIT_OK, EXIT_EMPTY, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_IO = 0, 1, 2, 3, 4
ABLATION_PER_KIND = 4


def _write_json(path, obj):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _overrides(args):
    pairs = []
    for item in args.set or ():
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        pairs.append((key.strip(), value.strip()))
    return pairs


# ---------------------------------------------------------------- mixtures

def eval_mixture_specs(cfg):
    """Fixed-seed tonal+percussive evaluation mixtures: list of (mixture_id, MixtureSpec)."""
    r = cfg.run
    out = []
    for i in range(r.eval_mixtures):
        spec = data.pair_mixture(("tonal_harmonic", "percussive"), r.eval_seed + i,
                                 r.eval_duration, cfg.data.sample_rate)
        out.append((f"mix_{i:03d}", spec))
    return out


def ablation_mixture_specs(cfg, per_kind=ABLATION_PER_KIND):
    """Each kind paired with a rotating partner; the first source is the target."""
    r = cfg.run
    out = []
    for k, kind in enumerate(data.KINDS):
        for j in range(per_kind):
            partner = data.KINDS[(k + 1 + j % (len(data.KINDS) - 1)) % len(data.KINDS)]
            spec = data.pair_mixture((kind, partner), r.eval_seed + 1000 * (k + 1) + j,
                                     r.eval_duration, cfg.data.sample_rate)
            out.append((f"{kind}_{j:02d}", spec))
    return out


def write_mixture(directory, spec):
    """mixture.wav plus one stem per tag; stems sum exactly to the mixture."""
    mixture, stems, _ = data.make_mixture(spec)
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    data.write_wav(directory / "mixture.wav", mixture)
    summed = {}
    for (kind, _, _), stem in zip(spec.sources, stems):
        summed[kind] = summed.get(kind, 0.0) + stem.samples
    for kind, samples in summed.items():
        data.write_wav(directory / f"{kind}.wav", dsp.Waveform(samples, spec.sample_rate))
    return directory


# ---------------------------------------------------------------- commands

def cmd_synth(cfg, args):
    plan = data.dataset_plan(cfg.data)
    mixes = eval_mixture_specs(cfg)
    if args.dry_run:
        for split, path, kind, seed in plan:
            print(f"{split}\t{path}\t{kind}\t{seed}")
        for mix_id, spec in mixes:
            print("eval\t" + mix_id + "\t" + " ".join(f"{k}:{s}" for k, _, s in spec.sources))
        return EXIT_OK
    out = cfg.run.resolve("dataset_dir")
    data.build_dataset(cfg.data, out)
    eval_dir = cfg.run.resolve("eval_dir")
    for mix_id, spec in mixes:
        write_mixture(eval_dir / mix_id, spec)
    _write_json(out / "config.json", cfg.echo())
    log.info("wrote %d clips to %s and %d mixtures to %s", len(plan), out, len(mixes), eval_dir)
    return EXIT_OK


def _load_dataset(cfg):
    path = cfg.run.resolve("dataset_dir")
    if not (path / "manifest.tsv").exists():
        raise FileNotFoundError(f"no dataset at {path}; run `latmask synth` first")
    return data.load_dataset(path)


def cmd_pretrain(cfg, args):
    from dataclasses import replace

    from latmask.models import pretrain_autoencoder, pretrain_tagger

    dataset = _load_dataset(cfg)
    models_dir = cfg.run.resolve("models_dir")
    models_dir.mkdir(parents=True, exist_ok=True)
    if args.which == "autoencoder":
        model_cfg, train_cfg = cfg.autoencoder, cfg.autoencoder_train
        if args.seed is not None:
            model_cfg, train_cfg = replace(model_cfg, seed=args.seed), replace(train_cfg, seed=args.seed)
        stem = "autoencoder"
        model, report = pretrain_autoencoder(dataset, train_cfg, model_cfg, models_dir / f"{stem}_curve.csv")
    else:
        arch = args.arch or cfg.tagger.arch
        model_cfg, train_cfg = replace(cfg.tagger, arch=arch), cfg.tagger_train
        if args.seed is not None:
            model_cfg, train_cfg = replace(model_cfg, seed=args.seed), replace(train_cfg, seed=args.seed)
        stem = f"tagger_{arch}"
        model, report = pretrain_tagger(dataset, arch, train_cfg, model_cfg, models_dir / f"{stem}_curve.csv")
    sha = model.save(models_dir / f"{stem}.lmk")
    _write_json(models_dir / f"{stem}.json", {"config": cfg.echo(), "metrics": report.metrics, "sha256": sha})
    log.info("%s: %s (%.1f s)", stem, json.dumps(report.metrics), report.seconds)
    print(f"{models_dir / (stem + '.lmk')}\t{sha}")
    return EXIT_OK


def load_models(cfg, arch=None):
    from latmask.models import Autoencoder, Tagger
    from latmask.separation import FrozenModels

    models_dir = cfg.run.resolve("models_dir")
    arch = arch or cfg.tagger.arch
    return FrozenModels(Autoencoder.load(models_dir / "autoencoder.lmk"),
                        Tagger.load(models_dir / f"tagger_{arch}.lmk"))


def separate_one(cfg, arch, mixture_path, tags, out_dir, mode="separate"):
    """Run one separation and write its artifacts; returns the run directory."""
    from latmask.separation import run_record, separate, style_transfer

    models = load_models(cfg, arch)
    wave = data.read_wav(mixture_path)
    target = models.tagger.vocabulary.multi_hot(tags)
    mixture_id = Path(mixture_path).parent.name
    run_dir = Path(out_dir) / mixture_id
    run_dir.mkdir(parents=True, exist_ok=True)
    common = {"mixture_id": mixture_id, "mixture": str(mixture_path), "target_tags": list(tags),
              "tagger": arch, "effective_config": cfg.echo()}
    if mode == "style-transfer":
        res = style_transfer(wave, target, models, cfg.separation)
        data.write_wav(run_dir / "style.wav", res.audio)
        _write_json(run_dir / "run.json", {**common, "mode": mode, "config": res.config,
                                           "losses": res.losses, "final_loss": res.final_loss,
                                           "initial_probs": res.initial_probs.tolist(),
                                           "final_probs": res.final_probs.tolist()})
        return run_dir
    res = separate(wave, target, models, cfg.separation)
    data.write_wav(run_dir / "estimate.wav", res.estimate)
    data.write_wav(run_dir / "masked.wav", res.s_bar)
    data.write_wav(run_dir / "residual.wav", res.s_out)
    log.info("%s: loss %.4f -> %.4f in %.2f s", mixture_id, res.losses[0] if res.losses else res.final_loss,
             res.final_loss, res.wall_time)
    _write_json(run_dir / "run.json", {**common, "mode": mode, **run_record(res, include_timing=False)})
    return run_dir


def _run_many(jobs, tasks):
    """Run (cfg, arch, mixture, tags, out, mode) tasks, in parallel across mixtures if jobs > 1."""
    if jobs <= 1 or len(tasks) <= 1:
        return [separate_one(*t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(separate_one, *zip(*tasks)))


def cmd_separate(cfg, args):
    tags = [t for t in args.tags.split(",") if t]
    if not tags:
        raise ConfigError("--tags needs at least one tag")
    out = Path(args.out) if args.out else Path(cfg.run.out_dir) / "separations"
    tasks = [(cfg, args.arch or cfg.tagger.arch, m, tags, out, args.mode) for m in args.mixture]
    for run_dir in _run_many(args.jobs, tasks):
        print(run_dir)
    return EXIT_OK


def cmd_ablate(cfg, args):
    mix_dir = Path(args.dataset) if args.dataset else Path(cfg.run.out_dir) / "ablation" / "mixtures"
    specs = ablation_mixture_specs(cfg)
    for mix_id, spec in specs:
        if not (mix_dir / mix_id / "mixture.wav").exists():
            write_mixture(mix_dir / mix_id, spec)
    out_root = Path(args.out) if args.out else Path(cfg.run.out_dir) / "ablation"
    rows = []
    for arch in args.taggers:
        run_root = out_root / arch
        tasks = [(cfg, arch, mix_dir / mix_id / "mixture.wav", [spec.sources[0][0]], run_root, "separate")
                 for mix_id, spec in specs]
        _run_many(args.jobs, tasks)
        report = evaluate_run(run_root, mix_dir, run_root / "eval.csv")
        for tag, agg in report.aggregate().items():
            rows.append({"tagger": arch, "source_tag": tag, "mean_sdri_db": agg["mean"],
                         "median_sdri_db": agg["median"], "n": agg["n"]})
    grid = out_root / "ablation.csv"
    with grid.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["tagger", "source_tag", "mean_sdri_db", "median_sdri_db", "n"])
        writer.writeheader()
        writer.writerows(rows)
    _write_json(out_root / "config.json", cfg.echo())
    for r in rows:
        print(f"{r['tagger']}\t{r['source_tag']}\t{r['mean_sdri_db']:.3f}")
    return EXIT_OK


def cmd_eval(cfg, args):
    csv_path = Path(args.csv) if args.csv else Path(args.estimates) / "eval.csv"
    report = evaluate_run(args.estimates, args.stems, csv_path)
    if not report.rows:
        print(f"no runs found under {args.estimates}", file=sys.stderr)
        return EXIT_EMPTY
    for line in report.summary_lines():
        print(line)
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser():
    parser = argparse.ArgumentParser(prog="latmask", description=__doc__.splitlines()[0])
    parser.add_argument("--config", help=f"key = value config file (default: ${ENV_VAR})")
    parser.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    parser.add_argument("--jobs", type=int, default=1, help="parallel workers across independent mixtures")
    parser.add_argument("-q", "--quiet", action="store_true", help="only warnings on stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="render the training dataset and evaluation mixtures")
    p.add_argument("--dry-run", action="store_true", help="print the clip plan and write nothing")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("pretrain", help="train the autoencoder or a tagger")
    p.add_argument("which", choices=("autoencoder", "tagger"))
    p.add_argument("--arch", choices=("fcn_mini", "mrs_mini"))
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("separate", help="latent ascent on one or more mixtures")
    p.add_argument("mixture", nargs="+", help="mixture WAV; the parent directory name is the mixture id")
    p.add_argument("--tags", required=True, help="comma-separated target tags")
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--fft-sizes", help="space- or comma-separated mask FFT sizes")
    p.add_argument("--convention", choices=("residual", "masked"))
    p.add_argument("--mode", choices=("separate", "style-transfer"), default="separate")
    p.add_argument("--arch", choices=("fcn_mini", "mrs_mini"))
    p.add_argument("--out", help="output root (default <out_dir>/separations)")
    p.set_defaults(func=cmd_separate)

    p = sub.add_parser("ablate", help="separation grid over taggers and source kinds")
    p.add_argument("--taggers", nargs="+", default=["fcn_mini", "mrs_mini"])
    p.add_argument("--dataset", help="mixture directory (created if missing)")
    p.add_argument("--out")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("eval", help="score separation runs against reference stems")
    p.add_argument("estimates")
    p.add_argument("stems")
    p.add_argument("--csv")
    p.set_defaults(func=cmd_eval)
    return parser


def _separation_overrides(args):
    pairs = []
    if getattr(args, "steps", None) is not None:
        pairs.append(("separation.steps", str(args.steps)))
    if getattr(args, "lr", None) is not None:
        pairs.append(("separation.learning_rate", str(args.lr)))
    if getattr(args, "fft_sizes", None):
        pairs.append(("separation.fft_sizes", args.fft_sizes.replace(",", " ")))
    if getattr(args, "convention", None):
        pairs.append(("separation.estimate_convention", args.convention))
    return pairs


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = load_config(args.config, _overrides(args) + _separation_overrides(args))
        if args.jobs < 1:
            raise ConfigError("--jobs must be at least 1")
        return args.func(cfg, args)
    except (ConfigError, ContractError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (FormatError, ReportError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())

"""Separation metrics: scale-invariant SDR, SDR improvement and an ideal-ratio-mask oracle.

These are simplified metrics; there are no distortion filters and no
framewise aggregation, so numbers are not comparable with full BSS-Eval
tables.

Directory conventions used by :func:`evaluate_run`::

    stems_dir/<mixture_id>/mixture.wav
    stems_dir/<mixture_id>/<tag>.wav            one per source
    results_dir/<run>/run.json                  mixture_id, target_tags, config
    results_dir/<run>/estimate.wav

A run using the ``masked`` convention is scored against the sum of its
target stems; a ``residual`` run against everything else in the mixture
(its ``source_tag`` is then written as ``~tag``).
"""
import csv
import hashlib
import json
import statistics
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from latmask import dsp
from latmask.data import read_wav
from latmask.errors import ContractError, ReportError

CLAMP_DB = 60.0
CSV_COLUMNS = ("mixture_id", "source_tag", "sdr_est_db", "sdr_mix_db", "sdri_db",
               "oracle_sdri_db", "steps", "lr", "fft_sizes", "seed")


def _arr(x):
    return np.asarray(x.samples if isinstance(x, dsp.Waveform) else x, dtype=np.float64)


def sdr(reference, estimate):
    """Scale-invariant SDR in dB, clamped to +/-60."""
    s, s_hat = _arr(reference), _arr(estimate)
    if s.shape != s_hat.shape:
        raise ContractError(f"reference and estimate lengths differ: {s.shape} vs {s_hat.shape}")
    ref_energy = float(s @ s)
    if ref_energy == 0.0:
        raise ContractError("reference signal is all zeros")
    alpha = float(s_hat @ s) / ref_energy
    target = alpha * s
    noise = s_hat - target
    num, den = float(target @ target), float(noise @ noise)
    if num == 0.0:
        return -CLAMP_DB
    if den == 0.0:
        return CLAMP_DB
    return float(np.clip(10.0 * np.log10(num / den), -CLAMP_DB, CLAMP_DB))


def sdr_improvement(reference, mixture, estimate):
    return sdr(reference, estimate) - sdr(reference, mixture)


def ideal_ratio_masks(sources, fft_size=1024, hop=None, eps=1e-8):
    """|S_i| / (sum_j |S_j| + eps) for every source, shape (n_sources, T, F)."""
    mags = np.stack([dsp.magnitude(dsp.stft(_arr(s), fft_size, hop)).value for s in sources])
    return mags / (mags.sum(axis=0) + eps)


@dataclass
class OracleResult:
    sdri: list  # per source, dB over the unprocessed mixture
    sdr: list  # per source, dB of the masked estimate itself
    masks: np.ndarray


def irm_oracle(sources, mixture, fft_size=1024, hop=None, eps=1e-8):
    """Score each source's ideal ratio mask applied to the mixture STFT (mixture phase)."""
    x = _arr(mixture)
    srcs = [_arr(s) for s in sources]
    residual = np.linalg.norm(np.sum(srcs, axis=0) - x)
    if residual > 1e-5 * max(np.linalg.norm(x), 1e-12):
        raise ContractError(f"sources do not sum to the mixture (relative error {residual / np.linalg.norm(x):.2e})")
    masks = ideal_ratio_masks(srcs, fft_size, hop, eps)
    spec = dsp.stft(x, fft_size, hop)
    sdri, sdrs = [], []
    for s, m in zip(srcs, masks):
        est = dsp.istft(dsp.apply_mask(spec.real.tape.const(m), spec), x.size).value
        sdrs.append(sdr(s, est))
        sdri.append(sdrs[-1] - sdr(s, x))
    return OracleResult(sdri, sdrs, masks)


@dataclass
class EvalReport:
    rows: list = field(default_factory=list)

    def aggregate(self):
        """source_tag -> {mean, median, n} over ``sdri_db``."""
        groups = {}
        for r in self.rows:
            groups.setdefault(r["source_tag"], []).append(r["sdri_db"])
        return {k: {"mean": float(np.mean(v)), "median": float(statistics.median(v)), "n": len(v)}
                for k, v in sorted(groups.items())}

    def write_csv(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS, extrasaction="ignore")
            writer.writeheader()
            writer.writerows(self.rows)

    def summary_lines(self):
        return [f"{tag}: mean {a['mean']:.3f} dB, median {a['median']:.3f} dB (n={a['n']})"
                for tag, a in self.aggregate().items()]


def read_csv(path):
    with Path(path).open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        for k in ("sdr_est_db", "sdr_mix_db", "sdri_db", "oracle_sdri_db", "lr"):
            r[k] = float(r[k])
        r["steps"], r["seed"] = int(r["steps"]), int(r["seed"])
    return rows


def config_digest(config):
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()[:16]


def evaluate_run(results_dir, stems_dir, csv_path=None):
    """Score every run under ``results_dir`` against stems in ``stems_dir``."""
    results_dir, stems_dir = Path(results_dir), Path(stems_dir)
    runs = sorted(p.parent for p in results_dir.glob("*/run.json"))
    missing, rows = [], []
    for run in runs:
        record = json.loads((run / "run.json").read_text())
        mix_id = record["mixture_id"]
        tags = list(record["target_tags"])
        mix_dir = stems_dir / mix_id
        needed = [mix_dir / "mixture.wav"] + [mix_dir / f"{t}.wav" for t in tags]
        absent = [str(p) for p in needed if not p.exists()]
        if not (run / "estimate.wav").exists():
            absent.append(str(run / "estimate.wav"))
        if absent:
            missing.extend(absent)
            continue
        mixture = read_wav(mix_dir / "mixture.wav").samples.astype(np.float64)
        stems = {p.stem: read_wav(p).samples.astype(np.float64)
                 for p in sorted(mix_dir.glob("*.wav")) if p.stem != "mixture"}
        target = np.sum([stems[t] for t in tags], axis=0)
        others = [v for k, v in stems.items() if k not in tags]
        rest = np.sum(others, axis=0) if others else mixture - target
        cfg = record.get("config", {})
        convention = cfg.get("estimate_convention", record.get("estimate_convention", "residual"))
        reference, label, side = (target, "+".join(tags), 0) if convention == "masked" else (rest, "~" + "+".join(tags), 1)
        estimate = read_wav(run / "estimate.wav").samples.astype(np.float64)[:mixture.size]
        sources = [target, mixture - target]
        oracle = irm_oracle(sources, mixture, int(max(cfg.get("fft_sizes", [1024])))).sdri[side]
        est_db, mix_db = sdr(reference, estimate), sdr(reference, mixture)
        rows.append({
            "mixture_id": mix_id, "source_tag": label, "sdr_est_db": est_db, "sdr_mix_db": mix_db,
            "sdri_db": est_db - mix_db, "oracle_sdri_db": oracle, "steps": cfg.get("steps", 0),
            "lr": cfg.get("learning_rate", 0.0),
            "fft_sizes": " ".join(str(n) for n in cfg.get("fft_sizes", [])),
            "seed": record.get("seed", cfg.get("init_seed", 0)), "config_digest": config_digest(cfg),
        })
    if missing:
        raise ReportError("missing files: " + ", ".join(missing))
    keys = [(r["mixture_id"], r["source_tag"]) for r in rows]
    dupes = sorted({k for k in keys if keys.count(k) > 1})
    if dupes:
        raise ReportError("several runs score the same (mixture, source): "
                          + ", ".join(f"{m}/{t}" for m, t in dupes))
    report = EvalReport(rows)
    if csv_path is not None:
        report.write_csv(csv_path)
    return report

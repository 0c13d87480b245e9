"""Pretraining of the stand-in autoencoder and taggers.

Both loops are single-threaded and fully determined by their seeds: batch
order comes from a seeded generator and every reduction runs in a fixed
order, so two runs with the same config produce identical checkpoints.
"""
import csv
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from latmask import autodiff as ad
from latmask.errors import ConfigError, NumericalError
from latmask.models.autoencoder import (Autoencoder, AutoencoderConfig, decode, decoder_graph,
                                        encode, encoder_graph, multiscale_spectral_loss,
                                        quantize_latent)
from latmask.models.tagger import Tagger, TaggerConfig, bce, features_graph, macro_auc, trunk_graph
from latmask.optim import Adam

log = logging.getLogger(__name__)


@dataclass
class AutoencoderTrainConfig:
    epochs: int = 20
    batch_size: int = 2
    lr: float = 1e-3
    beta: float = 0.25
    ema_decay: float = 0.99
    log_floor: float = 1e-2
    max_clips: int = 200
    max_val_clips: int = 20
    fft_sizes: tuple = (256, 512, 1024)
    seed: int = 0


@dataclass
class TaggerTrainConfig:
    epochs: int = 15
    batch_size: int = 16
    lr: float = 1e-3
    seed: int = 0


@dataclass
class TrainReport:
    history: list = field(default_factory=list)
    metrics: dict = field(default_factory=dict)
    seconds: float = 0.0

    def write_csv(self, path):
        if not self.history:
            return
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(self.history[0]))
            writer.writeheader()
            writer.writerows(self.history)


def _split(dataset, name):
    clips = dataset.clips(name) if hasattr(dataset, "clips") else dataset[name]
    return [c.samples if hasattr(c, "samples") else np.asarray(c) for c in clips]


def _labels(dataset, name):
    clips = dataset.clips(name) if hasattr(dataset, "clips") else dataset[name + "_labels"]
    return np.array([c.tags if hasattr(c, "tags") else c for c in clips], dtype=np.float64)


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def _stack_clips(clips):
    length = min(c.size for c in clips)
    length -= length % 8
    return np.stack([np.asarray(c[:length], dtype=np.float64) for c in clips])


def reconstruction_loss(model, clips, quantize=True, fft_sizes=(256, 512, 1024), log_floor=1e-2):
    """Mean spectral loss of decode(encode(x)) over ``clips``."""
    total = 0.0
    for x in clips:
        e = encode(model, x)
        x_hat = decode(model, e, quantize=quantize).samples[:len(x)]
        total += float(multiscale_spectral_loss(np.asarray(x, dtype=np.float64), x_hat, fft_sizes, log_floor).value)
    return total / len(clips)


def codebook_usage(model, clips):
    """Fraction of codebook entries selected at least once on ``clips``."""
    used = set()
    for x in clips:
        idx, _ = quantize_latent(encode(model, x), model.codebook)
        used.update(int(i) for i in np.unique(idx))
    return len(used) / model.codebook.shape[0]


def pretrain_autoencoder(dataset, cfg=None, model_cfg=None, curve_path=None):
    """Train the VQ autoencoder; returns (frozen Autoencoder, TrainReport).

    Objective: spectral reconstruction + beta * commitment, with
    straight-through gradients across quantization.  The codebook follows
    the encoder outputs assigned to it by exponential moving averages, so
    its learning speed does not depend on ``latent_scale``.  Entries left
    unused for an epoch are re-seeded from encoder outputs.
    """
    cfg = cfg or AutoencoderTrainConfig()
    model = Autoencoder(model_cfg or AutoencoderConfig())
    train = _split(dataset, "train")[:cfg.max_clips]
    val = _split(dataset, "val")[:cfg.max_val_clips]
    if not train or not val:
        raise ConfigError("autoencoder pretraining needs non-empty train and val splits")
    start = time.perf_counter()
    report = TrainReport()
    untrained = reconstruction_loss(model, val, fft_sizes=cfg.fft_sizes, log_floor=cfg.log_floor)
    report.metrics["val_loss_untrained"] = untrained
    if cfg.epochs == 0:
        report.metrics.update(val_loss=untrained, loss_ratio=1.0, codebook_usage=codebook_usage(model, val))
        report.seconds = time.perf_counter() - start
        return model.freeze(), report

    rng = np.random.default_rng([31, cfg.seed])
    master = {k: v.astype(np.float64) for k, v in model.params.items() if k != "codebook"}
    codebook = model.params["codebook"].astype(np.float64)
    opt = Adam(cfg.lr)
    names = sorted(master)
    scale2 = model.config.latent_scale ** 2
    k_cb = model.config.codebook_size
    data = _stack_clips(train)
    ema_count = ema_sum = None
    for epoch in range(cfg.epochs):
        usage = np.zeros(k_cb, dtype=np.int64)
        losses = []
        last_rows = None
        for batch in _batches(len(data), cfg.batch_size, rng):
            tape = ad.Tape(np.float32)
            p = model.bind(tape, trainable=True)
            try:
                x = tape.const(data[batch])
                e = encoder_graph(model, p, x)
                bsz, dim, t = e.shape
                rows = e.value.transpose(0, 2, 1).reshape(-1, dim).astype(np.float64)
                if ema_count is None:
                    codebook = _seed_codebook(model, rows, rng)
                    ema_count, ema_sum = np.ones(k_cb), codebook.copy()
                idx, e_q_val = quantize_latent(rows, codebook)
                usage += np.bincount(idx, minlength=k_cb)
                e_q_fixed = e_q_val.reshape(bsz, t, dim).transpose(0, 2, 1)
                e_st = (e - e.value) + e_q_fixed
                x_hat = decoder_graph(model, p, e_st)
                recon = multiscale_spectral_loss(x, x_hat, cfg.fft_sizes, cfg.log_floor)
                commit = ad.mean((e - e_q_fixed) * (e - e_q_fixed)) * (1.0 / scale2)
                loss = recon + cfg.beta * commit
                grads = ad.backward(tape, loss, [p[k] for k in names])
            except NumericalError as exc:
                raise NumericalError(f"autoencoder training diverged in epoch {epoch}: {exc}",
                                     node=exc.node, epoch=epoch) from None
            opt.step(master, dict(zip(names, grads)))
            codebook, ema_count, ema_sum = _ema_update(codebook, ema_count, ema_sum, rows, idx, cfg.ema_decay)
            model.params = _pack(master, codebook)
            losses.append(float(loss.value))
            last_rows = rows
        dead = np.flatnonzero(usage == 0)
        if dead.size:
            picks = rng.choice(last_rows.shape[0], size=dead.size, replace=dead.size > last_rows.shape[0])
            noise = rng.standard_normal((dead.size, codebook.shape[1])) * 0.01 * model.config.latent_scale
            codebook[dead] = last_rows[picks] + noise
            ema_count[dead] = 1.0
            ema_sum[dead] = codebook[dead]
            model.params = _pack(master, codebook)
        val_loss = reconstruction_loss(model, val, fft_sizes=cfg.fft_sizes, log_floor=cfg.log_floor)
        row = {"epoch": epoch, "train_loss": float(np.mean(losses)), "val_loss": val_loss,
               "val_ratio": val_loss / untrained, "dead_codes": int(dead.size)}
        report.history.append(row)
        log.info("autoencoder epoch %d: train %.4f val %.4f ratio %.3f dead %d", epoch,
                 row["train_loss"], val_loss, row["val_ratio"], dead.size)
        if not np.isfinite(row["train_loss"]):
            raise NumericalError(f"autoencoder loss is NaN in epoch {epoch}", epoch=epoch)
    report.metrics.update(val_loss=report.history[-1]["val_loss"],
                          loss_ratio=report.history[-1]["val_ratio"],
                          val_loss_continuous=reconstruction_loss(model, val, quantize=False, fft_sizes=cfg.fft_sizes,
                                                                    log_floor=cfg.log_floor),
                          codebook_usage=codebook_usage(model, val))
    report.seconds = time.perf_counter() - start
    if curve_path:
        report.write_csv(curve_path)
    return model.freeze(), report


def _pack(master, codebook):
    params = {k: v.astype(np.float32) for k, v in master.items()}
    params["codebook"] = codebook.astype(np.float32)
    return params


def _seed_codebook(model, rows, rng):
    k = model.config.codebook_size
    uniq = np.unique(rows, axis=0)
    picks = rng.choice(uniq.shape[0], size=k, replace=uniq.shape[0] < k)
    noise = rng.standard_normal((k, rows.shape[1])) * 0.01 * model.config.latent_scale
    return uniq[picks] + noise


def _ema_update(codebook, count, total, rows, idx, decay, smoothing=1e-5):
    """Move each codebook entry toward the mean of the encoder rows assigned to it."""
    k = codebook.shape[0]
    n = np.bincount(idx, minlength=k).astype(np.float64)
    sums = np.zeros_like(total)
    np.add.at(sums, idx, rows)
    count = decay * count + (1.0 - decay) * n
    total = decay * total + (1.0 - decay) * sums
    # Laplace smoothing keeps rarely used entries from dividing by ~0
    mass = count.sum()
    smoothed = (count + smoothing) / (mass + k * smoothing) * mass
    return total / smoothed[:, None], count, total


def tagger_features(model, clips, batch_size=32):
    """Precomputed front-end features (N, T, n_feat); the front end has no weights."""
    out = []
    for i in range(0, len(clips), batch_size):
        tape = ad.Tape(np.float64)
        out.append(features_graph(model, tape.const(_stack_clips(clips[i:i + batch_size]))).value)
    return np.concatenate(out)


def _predict(model, feats, batch_size=64):
    probs = []
    for i in range(0, len(feats), batch_size):
        tape = ad.Tape(np.float32)
        probs.append(trunk_graph(model.bind(tape), tape.const(feats[i:i + batch_size])).value)
    return np.concatenate(probs).astype(np.float64)


def pretrain_tagger(dataset, arch="fcn_mini", cfg=None, model_cfg=None, curve_path=None):
    """Train a tagger on multi-hot labels; returns (frozen Tagger, TrainReport).

    Reports per-tag and macro AUC on the held-out ``test`` split.
    """
    cfg = cfg or TaggerTrainConfig()
    model_cfg = model_cfg or TaggerConfig(arch=arch, seed=cfg.seed)
    if model_cfg.arch != arch:
        model_cfg = TaggerConfig(**{**asdict(model_cfg), "arch": arch})
    model = Tagger(model_cfg)
    train, y_train = _split(dataset, "train"), _labels(dataset, "train")
    test, y_test = _split(dataset, "test"), _labels(dataset, "test")
    if not train:
        raise ConfigError("tagger pretraining needs a non-empty train split")
    for k, name in enumerate(model.vocabulary.names):
        if y_train[:, k].sum() == 0:
            raise ConfigError(f"tag {name!r} has no positive examples in the train split")
    start = time.perf_counter()
    f_train = tagger_features(model, train)
    f_test = tagger_features(model, test)
    mean = f_train.mean(axis=(0, 1))
    std = f_train.std(axis=(0, 1)) + 1e-3
    model.params["feat_mean"] = mean.astype(np.float32)
    model.params["feat_std"] = std.astype(np.float32)

    rng = np.random.default_rng([37, cfg.seed])
    master = {k: v.astype(np.float64) for k, v in model.params.items() if not k.startswith("feat_")}
    names = sorted(master)
    opt = Adam(cfg.lr)
    report = TrainReport()
    for epoch in range(cfg.epochs):
        losses = []
        for batch in _batches(len(f_train), cfg.batch_size, rng):
            tape = ad.Tape(np.float32)
            p = model.bind(tape, trainable=True)
            try:
                loss = bce(trunk_graph(p, tape.const(f_train[batch])), y_train[batch])
                grads = ad.backward(tape, loss, [p[k] for k in names])
            except NumericalError as exc:
                raise NumericalError(f"tagger training diverged in epoch {epoch}: {exc}",
                                     node=exc.node, epoch=epoch) from None
            opt.step(master, dict(zip(names, grads)))
            for k in names:
                model.params[k] = master[k].astype(np.float32)
            losses.append(float(loss.value))
        auc, _ = macro_auc(_predict(model, f_test), y_test)
        report.history.append({"epoch": epoch, "train_bce": float(np.mean(losses)), "test_macro_auc": auc})
        log.info("tagger %s epoch %d: bce %.4f test auc %.4f", arch, epoch, np.mean(losses), auc)
    probs = _predict(model, f_test)
    auc, per_tag = macro_auc(probs, y_test)
    report.metrics.update(macro_auc=auc, per_tag_auc=dict(zip(model.vocabulary.names, per_tag)))
    report.seconds = time.perf_counter() - start
    if curve_path:
        report.write_csv(curve_path)
    return model.freeze(), report

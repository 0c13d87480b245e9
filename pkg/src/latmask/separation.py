"""Latent-code ascent through a frozen autoencoder and a frozen tagger.

One step: decode the latent, turn the decoded audio into a ratio mask on
the mixture spectrogram, invert the masked spectrogram, tag the result and
move the latent to lower the cross-entropy against the target tags.  The
source estimate returned by default is the mixture minus the final masked
signal.
"""
import copy
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from latmask import autodiff as ad
from latmask import dsp
from latmask.errors import ConfigError, ContractError, NumericalError
from latmask.models.autoencoder import COMPRESSION, decode_var, encode
from latmask.models.tagger import bce, tagger_var
from latmask.optim import SGD, Adam

log = logging.getLogger(__name__)

CONVENTIONS = ("residual", "masked")
LATENT_INITS = ("encode_mixture", "zeros", "random")
OPTIMIZERS = ("adam", "sgd")


@dataclass
class SeparationConfig:
    learning_rate: float = 5.0
    steps: int = 10
    optimizer: str = "adam"
    betas: tuple = (0.9, 0.999)
    fft_sizes: tuple = (1024,)
    eps: float = 1e-8
    estimate_convention: str = "residual"
    quantize: bool = False
    latent_init: str = "encode_mixture"
    init_seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        self.fft_sizes = tuple(int(n) for n in self.fft_sizes)
        self.betas = tuple(float(b) for b in self.betas)
        if self.learning_rate < 0:
            raise ConfigError(f"learning_rate must be non-negative, got {self.learning_rate}")
        if self.steps < 0:
            raise ConfigError(f"steps must be non-negative, got {self.steps}")
        if not self.fft_sizes:
            raise ConfigError("fft_sizes must not be empty")
        if self.eps <= 0:
            raise ConfigError("eps must be positive")
        for name, value, allowed in (("optimizer", self.optimizer, OPTIMIZERS),
                                     ("estimate_convention", self.estimate_convention, CONVENTIONS),
                                     ("latent_init", self.latent_init, LATENT_INITS),
                                     ("dtype", self.dtype, ("float32", "float64"))):
            if value not in allowed:
                raise ConfigError(f"{name} must be one of {allowed}, got {value!r}")
        for n in self.fft_sizes:
            dsp._validate(n, n // 4, "hann")

    def echo(self):
        d = asdict(self)
        d["fft_sizes"] = list(self.fft_sizes)
        d["betas"] = list(self.betas)
        return d


@dataclass
class FrozenModels:
    autoencoder: object
    tagger: object

    def __post_init__(self):
        for m in (self.autoencoder, self.tagger):
            if not m.frozen:
                raise ContractError(f"{type(m).__name__} must be frozen before use in separation")

    def digests(self):
        return {"autoencoder": self.autoencoder.digest(), "tagger": self.tagger.digest()}


@dataclass
class AscentState:
    e: np.ndarray
    optimizer: object
    step: int = 0
    losses: list = field(default_factory=list)
    spectra: dict = field(default_factory=dict)  # fft_size -> (re, im, mag) of the mixture
    mixture: np.ndarray = None  # zero-padded to a multiple of the compression factor
    length: int = 0


@dataclass
class SeparationResult:
    s_out: dsp.Waveform
    s_bar: dsp.Waveform
    masks: dict
    losses: list
    final_loss: float
    config: dict
    wall_time: float
    convention: str = "residual"
    digests: dict = field(default_factory=dict)

    @property
    def estimate(self):
        return self.s_out if self.convention == "residual" else self.s_bar


@dataclass
class StyleTransferResult:
    audio: dsp.Waveform
    losses: list
    final_loss: float
    initial_probs: np.ndarray
    final_probs: np.ndarray
    config: dict


def tag_loss(estimate, target):
    """Mean binary cross-entropy between tag probabilities and a multi-hot target."""
    target_value = target.value if isinstance(target, ad.Var) else np.asarray(target)
    if isinstance(estimate, ad.Var):
        if tuple(estimate.shape) != tuple(target_value.shape):
            raise ContractError(f"tag vocabularies differ: {estimate.shape[0]} vs {target_value.shape[0]} tags")
        return bce(estimate, target_value)
    est = np.asarray(estimate, dtype=np.float64)
    if est.shape != target_value.shape:
        raise ContractError(f"tag vocabularies differ: {est.shape} vs {target_value.shape}")
    tape = ad.Tape(np.float64)
    return float(bce(tape.const(est), target_value).value)


def _check_target(target, models):
    target = np.asarray(target, dtype=np.float64)
    if target.ndim != 1 or target.size == 0:
        raise ConfigError("target tag vector must be a non-empty 1-D vector")
    k = models.tagger.config.n_tags
    if target.size != k:
        raise ContractError(f"target has {target.size} tags but the tagger vocabulary has {k}")
    if not np.all((target == 0) | (target == 1)):
        raise ContractError("target tags must be binary")
    return target


def _samples(mixture):
    return np.asarray(mixture.samples if isinstance(mixture, dsp.Waveform) else mixture, dtype=np.float64)


def init_state(mixture, models, cfg):
    """Encode the mixture and cache its spectrogram at every mask FFT size."""
    x = _samples(mixture)
    if x.size < max(cfg.fft_sizes):
        raise ContractError(f"mixture of {x.size} samples is shorter than fft size {max(cfg.fft_sizes)}")
    length = x.size
    rem = (-x.size) % COMPRESSION
    xp = np.pad(x, (0, rem)) if rem else x.copy()
    spectra = {}
    for n in cfg.fft_sizes:
        spec = dsp.stft(xp, n)
        re, im = spec.real.value.copy(), spec.imag.value.copy()
        mag = dsp.magnitude(spec).value.copy()
        for arr in (re, im, mag):
            arr.flags.writeable = False
        spectra[n] = (re, im, mag)
    t_lat, dim = xp.size // COMPRESSION, models.autoencoder.config.latent_dim
    if cfg.latent_init == "encode_mixture":
        e = encode(models.autoencoder, xp)
    elif cfg.latent_init == "zeros":
        e = np.zeros((t_lat, dim))
    else:
        rng = np.random.default_rng(cfg.init_seed)
        e = rng.standard_normal((t_lat, dim)) * models.autoencoder.config.latent_scale
    if cfg.optimizer == "adam":
        opt = Adam(cfg.learning_rate, cfg.betas)
    else:
        opt = SGD(cfg.learning_rate)
    return AscentState(e=e, optimizer=opt, spectra=spectra, mixture=xp, length=length)


def masked_signal(tape, models, e, state, cfg):
    """Decoded audio -> per-size ratio masks on the mixture -> mean of inverted masked signals."""
    j = decode_var(models.autoencoder, tape, e, cfg.quantize)
    outs, masks = [], {}
    for n in cfg.fft_sizes:
        re, im, mag = state.spectra[n]
        jmag = dsp.magnitude(dsp.stft(j, n))
        mask = dsp.build_mask(jmag, mag, cfg.eps)
        spec_x = dsp.Spectrogram(tape.const(re), tape.const(im), n, n // 4, "hann",
                                 state.mixture.size, state.mixture.size)
        outs.append(dsp.istft(dsp.apply_mask(mask, spec_x), state.mixture.size))
        masks[n] = mask.values
    s_bar = outs[0]
    for o in outs[1:]:
        s_bar = s_bar + o
    if len(outs) > 1:
        s_bar = s_bar * (1.0 / len(outs))
    return s_bar, masks


def _objective(models, state, target, cfg, masked=True):
    tape = ad.Tape(np.dtype(cfg.dtype))
    e = tape.leaf(state.e)
    if masked:
        signal, masks = masked_signal(tape, models, e, state, cfg)
    else:
        signal, masks = decode_var(models.autoencoder, tape, e, cfg.quantize), {}
    probs = tagger_var(models.tagger, signal)
    loss = tag_loss(probs, target)
    return tape, e, signal, masks, probs, loss


def ascend_step(state, models, mixture, target, cfg, masked=True):
    """One decode-mask-tag-update iteration; returns the advanced state."""
    target = _check_target(target, models)
    last = copy.deepcopy(state)
    try:
        tape, e, _, _, _, loss = _objective(models, state, target, cfg, masked)
        grad = ad.backward(tape, loss, e)
    except NumericalError as exc:
        raise NumericalError(f"non-finite value at step {state.step}: {exc}", node=exc.node,
                             step=state.step, state=last) from None
    value = float(loss.value)
    params = {"e": state.e}
    state.optimizer.step(params, {"e": grad})
    if not np.all(np.isfinite(params["e"])):
        raise NumericalError(f"latent became non-finite at step {state.step}", step=state.step, state=last)
    state.e = params["e"]
    state.losses.append(value)
    state.step += 1
    log.info("step %d loss %.6f", state.step, value)
    return state


def separate(mixture, target, models, cfg=None):
    """Run the full ascent and return both the residual and the masked signal."""
    cfg = cfg or SeparationConfig()
    target = _check_target(target, models)
    start = time.perf_counter()
    state = init_state(mixture, models, cfg)
    for _ in range(cfg.steps):
        ascend_step(state, models, mixture, target, cfg)
    try:
        _, _, s_bar, masks, _, loss = _objective(models, state, target, cfg)
    except NumericalError as exc:
        raise NumericalError(f"non-finite value in final pass: {exc}", node=exc.node, step=state.step) from None
    x = _samples(mixture)
    s_bar_np = s_bar.value.astype(np.float64)[:state.length]
    sr = mixture.sample_rate if isinstance(mixture, dsp.Waveform) else models.autoencoder.config.sample_rate
    return SeparationResult(
        s_out=dsp.Waveform(x - s_bar_np, sr),
        s_bar=dsp.Waveform(s_bar_np, sr),
        masks={n: m.value.astype(np.float64) for n, m in masks.items()},
        losses=list(state.losses),
        final_loss=float(loss.value),
        config=cfg.echo(),
        wall_time=time.perf_counter() - start,
        convention=cfg.estimate_convention,
        digests=models.digests(),
    )


def style_transfer(mixture, target, models, cfg=None):
    """Mask-free variant: the tagger hears the decoded audio directly."""
    cfg = cfg or SeparationConfig()
    target = _check_target(target, models)
    state = init_state(mixture, models, cfg)
    initial = None
    for _ in range(cfg.steps):
        ascend_step(state, models, mixture, target, cfg, masked=False)
    _, _, audio, _, probs, loss = _objective(models, state, target, cfg, masked=False)
    if cfg.steps == 0:
        initial = probs.value
    else:
        initial = _objective(models, init_state(mixture, models, cfg), target, cfg, masked=False)[4].value
    sr = mixture.sample_rate if isinstance(mixture, dsp.Waveform) else models.autoencoder.config.sample_rate
    return StyleTransferResult(
        audio=dsp.Waveform(audio.value.astype(np.float64), sr),
        losses=list(state.losses),
        final_loss=float(loss.value),
        initial_probs=np.asarray(initial, dtype=np.float64),
        final_probs=probs.value.astype(np.float64),
        config=cfg.echo(),
    )


def run_record(result, include_timing=True, **extra):
    """JSON-serializable summary of a separation run.

    Leave out the wall time when the record must be byte-identical across reruns.
    """
    record = {
        "config": result.config,
        "losses": [float(v) for v in result.losses],
        "final_loss": result.final_loss,
        "estimate_convention": result.convention,
        "model_digests": result.digests,
        "n_samples": len(result.s_out),
        "sample_rate": result.s_out.sample_rate,
    }
    if include_timing:
        record["wall_time_s"] = result.wall_time
    record.update(extra)
    return record

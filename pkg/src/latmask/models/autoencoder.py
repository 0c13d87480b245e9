"""Single-level VQ autoencoder with 8x temporal compression.

Encoder: three stride-2 convolutions and a projection to ``latent_dim``
channels, multiplied by ``latent_scale``.  Decoder: the mirrored stack of
transposed convolutions.  Latent codes are laid out (T_lat, D).
"""
from dataclasses import asdict, dataclass

import numpy as np

from latmask import autodiff as ad
from latmask import dsp
from latmask.errors import ContractError, NumericalError
from latmask.models import checkpoint

COMPRESSION = 8


@dataclass
class AutoencoderConfig:
    channels: int = 64
    latent_dim: int = 64
    codebook_size: int = 128
    # latent coordinates are O(latent_scale); sets the scale that ascent step sizes act on
    latent_scale: float = 10.0
    sample_rate: int = 8000
    seed: int = 0


# (name, kind, in, out, kernel, stride, padding); channel placeholders resolved in _layers
_ENCODER = [("enc1", "conv", 1, "C", 4, 2, 1), ("enc2", "conv", "C", "C", 4, 2, 1),
            ("enc3", "conv", "C", "C", 4, 2, 1), ("enc4", "conv", "C", "D", 3, 1, 1)]
_DECODER = [("dec1", "conv", "D", "C", 3, 1, 1), ("dec2", "convT", "C", "C", 4, 2, 1),
            ("dec3", "convT", "C", "C", 4, 2, 1), ("dec4", "convT", "C", 1, 4, 2, 1)]


def _layers(cfg, spec):
    sub = {"C": cfg.channels, "D": cfg.latent_dim}
    return [(n, k, sub.get(i, i), sub.get(o, o), ks, s, p) for n, k, i, o, ks, s, p in spec]


def init_params(cfg):
    rng = np.random.default_rng([11, cfg.seed])
    params = {}
    for name, kind, cin, cout, k, _, _ in _layers(cfg, _ENCODER + _DECODER):
        bound = np.sqrt(6.0 / (cin * k))
        shape = (cout, cin, k) if kind == "conv" else (cin, cout, k)
        params[f"{name}.w"] = rng.uniform(-bound, bound, size=shape)
        params[f"{name}.b"] = np.zeros(cout)
    params["codebook"] = rng.standard_normal((cfg.codebook_size, cfg.latent_dim)) * cfg.latent_scale * 0.1
    return {k: v.astype(np.float32) for k, v in params.items()}


class Autoencoder:
    """Parameters plus config; ``freeze()`` makes every array read-only."""

    def __init__(self, config=None, params=None):
        self.config = config or AutoencoderConfig()
        self.params = params if params is not None else init_params(self.config)
        self.frozen = False

    def freeze(self):
        for arr in self.params.values():
            arr.flags.writeable = False
        self.frozen = True
        return self

    @property
    def codebook(self):
        return self.params["codebook"]

    def meta(self):
        return {"model": "autoencoder", "config": asdict(self.config)}

    def digest(self):
        return checkpoint.digest(self.params, self.meta())

    def save(self, path):
        return checkpoint.save(path, self.params, self.meta())

    @classmethod
    def load(cls, path):
        arrays, meta = checkpoint.load(path)
        if not meta or meta.get("model") != "autoencoder":
            raise ContractError(f"{path} is not an autoencoder checkpoint")
        return cls(AutoencoderConfig(**meta["config"]), dict(arrays)).freeze()

    def bind(self, tape, trainable=False):
        make = tape.leaf if trainable else tape.const
        return {k: make(v) for k, v in self.params.items()}


def _stack(p, h, layers):
    for i, (name, kind, _, _, _, stride, pad) in enumerate(layers):
        op = ad.conv1d if kind == "conv" else ad.conv_transpose1d
        h = op(h, p[f"{name}.w"], p[f"{name}.b"], stride=stride, padding=pad)
        if i < len(layers) - 1:
            h = ad.relu(h)
    return h


def encoder_graph(model, p, x):
    """(B, L) -> (B, D, L/8)."""
    bsz, length = x.shape
    h = ad.reshape(x, (bsz, 1, length))
    return _stack(p, h, _layers(model.config, _ENCODER)) * model.config.latent_scale


def decoder_graph(model, p, e):
    """(B, D, T) -> (B, 8T)."""
    h = _stack(p, e * (1.0 / model.config.latent_scale), _layers(model.config, _DECODER))
    return ad.reshape(h, (h.shape[0], h.shape[2]))


def _pad8(samples):
    samples = np.asarray(samples, dtype=np.float64)
    rem = (-samples.size) % COMPRESSION
    return np.pad(samples, (0, rem)) if rem else samples


def encode(model, x, dtype=np.float64):
    """Latent code (T_lat, D) of a waveform; input is zero-padded to a multiple of 8."""
    samples = x.samples if isinstance(x, dsp.Waveform) else x
    tape = ad.Tape(dtype)
    p = model.bind(tape)
    try:
        z = encoder_graph(model, p, tape.const(_pad8(samples)[None, :]))
    except NumericalError as exc:
        raise NumericalError(f"encoder produced non-finite activations: {exc}", node=exc.node) from None
    return np.ascontiguousarray(z.value[0].T).astype(np.float64)


def quantize_latent(e, codebook):
    """Nearest codebook row per timestep (ties -> lowest index); returns (indices, e_q)."""
    e = np.asarray(e, dtype=np.float64)
    c = np.asarray(codebook, dtype=np.float64)
    if c.shape[0] == 0:
        raise ContractError("codebook is empty")
    if e.shape[-1] != c.shape[1]:
        raise ContractError(f"latent width {e.shape[-1]} does not match codebook width {c.shape[1]}")
    flat = e.reshape(-1, c.shape[1])
    # expanded distances for speed; near-ties are recomputed exactly so the tie rule holds
    approx = (c * c).sum(axis=1)[None, :] - 2.0 * (flat @ c.T)
    idx = np.argmin(approx, axis=1)
    best = approx[np.arange(flat.shape[0]), idx]
    scale = (flat * flat).sum(axis=1) + (c * c).sum(axis=1).max()
    close = approx <= best[:, None] + 1e-9 * scale[:, None] + 1e-12
    for row in np.flatnonzero(close.sum(axis=1) > 1):
        cand = np.flatnonzero(close[row])
        exact = ((flat[row] - c[cand]) ** 2).sum(axis=1)
        idx[row] = cand[np.argmin(exact)]
    return idx.reshape(e.shape[:-1]), c[idx].reshape(e.shape)


def decode_var(model, tape, e, quantize=False, params=None):
    """Differentiable decode of a (T_lat, D) latent variable to a (L,) waveform variable.

    With ``quantize`` the forward pass uses the nearest codebook entries and
    the backward pass treats quantization as identity.
    """
    if e.ndim != 2 or e.shape[1] != model.config.latent_dim:
        raise ContractError(f"latent shape {e.shape} does not match decoder width {model.config.latent_dim}")
    if quantize:
        _, e_q = quantize_latent(e.value, model.codebook)
        # exact zero plus e_q in the forward pass, identity adjoint
        e = (e - e.value) + e_q
    p = params if params is not None else model.bind(tape)
    h = ad.reshape(ad.transpose(e), (1, e.shape[1], e.shape[0]))
    return ad.reshape(decoder_graph(model, p, h), (e.shape[0] * COMPRESSION,))


def decode(model, e, quantize=False, dtype=np.float64):
    tape = ad.Tape(dtype)
    out = decode_var(model, tape, tape.const(e), quantize)
    return dsp.Waveform(out.value.astype(np.float64), model.config.sample_rate)


def multiscale_spectral_loss(x, x_hat, fft_sizes=(256, 512, 1024), log_floor=1e-2):
    """Sum over STFT sizes of mean |M - M_hat| plus mean |log(M + floor) - log(M_hat + floor)|.

    ``log_floor`` sits roughly 80 dB below a full-scale sinusoid at these FFT
    sizes; much smaller floors let inaudible residue dominate the loss.

    Accepts Waveforms, arrays or tape variables (batched along leading axes).
    """
    if not isinstance(x, ad.Var) and not isinstance(x_hat, ad.Var):
        tape = ad.Tape(np.float64)
        x, x_hat = dsp.as_var(x, tape), dsp.as_var(x_hat, tape)
    else:
        tape = (x if isinstance(x, ad.Var) else x_hat).tape
        x, x_hat = dsp.as_var(x, tape), dsp.as_var(x_hat, tape)
    if x.shape != x_hat.shape:
        raise ContractError(f"spectral loss needs equal lengths, got {x.shape} and {x_hat.shape}")
    total = None
    for n in fft_sizes:
        m = dsp.magnitude(dsp.stft(x, n))
        m_hat = dsp.magnitude(dsp.stft(x_hat, n))
        term = ad.mean(ad.abs_(m - m_hat)) + ad.mean(ad.abs_(ad.log(m + log_floor) - ad.log(m_hat + log_floor)))
        total = term if total is None else total + term
    return total

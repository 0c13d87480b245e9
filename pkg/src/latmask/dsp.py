"""Differentiable STFT/ISTFT, magnitudes, mel features and ratio masks.

Every transform is built from tape primitives (framing, matmul against a
fixed windowed DFT basis, overlap-add) so gradients flow through it.
Spectrogram planes are laid out (..., T, F).
"""
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from latmask import autodiff as ad
from latmask.errors import ConfigError, ContractError

MAG_FLOOR = 1e-12
DEFAULT_EPS = 1e-8


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        samples = np.asarray(self.samples)
        if samples.ndim != 1 or samples.size == 0:
            raise ContractError(f"waveform must be non-empty 1-D, got shape {samples.shape}")
        if not np.all(np.isfinite(samples)):
            raise ContractError("waveform contains non-finite samples")
        object.__setattr__(self, "samples", samples)

    def __len__(self):
        return self.samples.size

    @property
    def duration(self):
        return self.samples.size / self.sample_rate


@dataclass
class Spectrogram:
    real: ad.Var
    imag: ad.Var
    fft_size: int
    hop: int
    window: str
    length: int  # number of samples of the source waveform
    padded: int  # length after any short-signal zero padding

    @property
    def frames(self):
        return self.real.shape[-2]

    @property
    def bins(self):
        return self.real.shape[-1]

    def complex(self):
        return self.real.value + 1j * self.imag.value


@dataclass
class Mask:
    values: ad.Var
    eps: float


def get_window(name, size):
    if name != "hann":
        raise ConfigError(f"unsupported window {name!r}")
    return _hann(size)


@lru_cache(maxsize=None)
def _hann(size):
    n = np.arange(size)
    w = 0.5 - 0.5 * np.cos(2 * np.pi * n / size)
    w.flags.writeable = False
    return w


def check_cola(window, hop):
    """True when the squared window overlap-adds to a constant at ``hop``."""
    size = window.size
    if hop <= 0 or hop > size:
        return False
    period = np.zeros(hop)
    sq = window ** 2
    for start in range(0, size, hop):
        chunk = sq[start:start + hop]
        period[:chunk.size] += chunk
    return bool(np.ptp(period) <= 1e-9 * period.max())


def _validate(fft_size, hop, window):
    if fft_size < 2 or fft_size & (fft_size - 1):
        raise ConfigError(f"fft_size must be a power of two, got {fft_size}")
    if not 0 < hop <= fft_size:
        raise ConfigError(f"hop must be in (0, fft_size], got {hop}")
    if not check_cola(get_window(window, fft_size), hop):
        raise ConfigError(f"window {window!r} with fft_size {fft_size} is not COLA at hop {hop}")


@lru_cache(maxsize=None)
def _bases(fft_size, window):
    """Windowed forward DFT basis (N, F) pair and windowed inverse pair (F, N)."""
    w = get_window(window, fft_size)
    n = np.arange(fft_size)
    k = np.arange(fft_size // 2 + 1)
    phase = 2 * np.pi * np.outer(n, k) / fft_size
    fwd_re = w[:, None] * np.cos(phase)
    fwd_im = -w[:, None] * np.sin(phase)
    scale = np.full(k.size, 2.0 / fft_size)
    scale[0] = scale[-1] = 1.0 / fft_size
    inv_re = (scale[:, None] * np.cos(phase.T)) * w[None, :]
    inv_im = (-scale[:, None] * np.sin(phase.T)) * w[None, :]
    out = tuple(np.ascontiguousarray(b) for b in (fwd_re, fwd_im, inv_re, inv_im))
    for b in out:
        b.flags.writeable = False
    return out


@lru_cache(maxsize=None)
def _envelope(fft_size, hop, frames, window):
    w2 = get_window(window, fft_size) ** 2
    length = (frames - 1) * hop + fft_size
    env = np.zeros(length)
    for m in range(frames):
        env[m * hop:m * hop + fft_size] += w2
    inv = np.where(env > 1e-10, 1.0 / np.maximum(env, 1e-10), 0.0)
    inv.flags.writeable = False
    return inv


def as_var(x, tape=None):
    """Lift a Waveform or array onto ``tape`` (a fresh float64 tape by default)."""
    if isinstance(x, ad.Var):
        return x
    if isinstance(x, Waveform):
        x = x.samples
    if tape is None:
        tape = ad.Tape(np.float64)
    return tape.const(x)


def stft(x, fft_size=1024, hop=None, window="hann"):
    """Centered STFT of the last axis of ``x`` with reflect padding.

    Signals shorter than ``fft_size`` are first zero-padded to ``fft_size``.
    Frame count is ``1 + padded_len // hop``.
    """
    hop = fft_size // 4 if hop is None else hop
    _validate(fft_size, hop, window)
    x = as_var(x)
    length = x.shape[-1]
    if length <= fft_size // 2:
        x = ad.pad(x, 0, fft_size - length)
    padded = x.shape[-1]
    half = fft_size // 2
    xp = ad.pad(x, half, half, mode="reflect")
    frames = ad.frame(xp, fft_size, hop)
    fwd_re, fwd_im, _, _ = _bases(fft_size, window)
    return Spectrogram(frames @ fwd_re, frames @ fwd_im, fft_size, hop, window, length, padded)


def istft(spec, target_len=None, fft_size=None, hop=None, window=None):
    """Weighted overlap-add inverse of :func:`stft`, trimmed/padded to ``target_len``.

    Passing window metadata that disagrees with ``spec`` raises ContractError.
    """
    for name, given, own in (("fft_size", fft_size, spec.fft_size), ("hop", hop, spec.hop),
                             ("window", window, spec.window)):
        if given is not None and given != own:
            raise ContractError(f"istft {name}={given!r} does not match spectrogram {own!r}")
    if spec.bins != spec.fft_size // 2 + 1:
        raise ContractError(f"spectrogram has {spec.bins} bins, expected {spec.fft_size // 2 + 1}")
    target_len = spec.length if target_len is None else int(target_len)
    n, h = spec.fft_size, spec.hop
    _, _, inv_re, inv_im = _bases(n, spec.window)
    frames = spec.real @ inv_re + spec.imag @ inv_im
    t = spec.frames
    ola = ad.overlap_add(frames, h, (t - 1) * h + n)
    ola = ola * _envelope(n, h, t, spec.window)
    start = n // 2
    stop = min(start + target_len, ola.shape[-1])
    out = ad.crop(ola, start, stop)
    if out.shape[-1] < target_len:
        out = ad.pad(out, 0, target_len - out.shape[-1])
    return out


def magnitude(spec):
    """|z| as sqrt(re^2 + im^2 + floor) - sqrt(floor): exact zero at zero, smooth adjoint."""
    power = spec.real * spec.real + spec.imag * spec.imag
    floor = np.sqrt(np.asarray(MAG_FLOOR, dtype=spec.real.tape.dtype))
    return ad.sqrt(power + MAG_FLOOR) - floor


def build_mask(jmag, xmag, eps=DEFAULT_EPS):
    """Ratio mask |J| / (max(|J|, |X|) + eps); ``xmag`` is treated as constant."""
    if eps <= 0:
        raise ContractError("mask epsilon must be positive")
    xshape = xmag.shape if hasattr(xmag, "shape") else np.shape(xmag)
    if tuple(jmag.shape) != tuple(xshape):
        raise ContractError(f"mask shapes differ: {jmag.shape} vs {xshape}")
    if isinstance(xmag, ad.Var):
        xmag = xmag.value
    return Mask(jmag / (ad.maximum(jmag, xmag) + eps), eps)


def apply_mask(mask, spec):
    """Scale both planes of ``spec`` by a real mask (mixture phase is kept)."""
    values = mask.values if isinstance(mask, Mask) else mask
    if tuple(values.shape) != tuple(spec.real.shape):
        raise ContractError(f"mask shape {values.shape} does not match spectrogram {spec.real.shape}")
    return Spectrogram(values * spec.real, values * spec.imag, spec.fft_size, spec.hop,
                       spec.window, spec.length, spec.padded)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


@lru_cache(maxsize=None)
def mel_filterbank(n_mels, fft_size, sample_rate):
    """Triangular HTK-spaced filters (n_mels, F); each row sums to one."""
    bins = fft_size // 2 + 1
    if n_mels < 8:
        raise ConfigError(f"n_mels must be at least 8, got {n_mels}")
    if n_mels > bins:
        raise ConfigError(f"n_mels={n_mels} exceeds {bins} frequency bins")
    freqs = np.linspace(0, sample_rate / 2, bins)
    edges = mel_to_hz(np.linspace(0, hz_to_mel(sample_rate / 2), n_mels + 2))
    fb = np.zeros((n_mels, bins))
    for m in range(n_mels):
        lo, mid, hi = edges[m:m + 3]
        rise = (freqs - lo) / (mid - lo)
        fall = (hi - freqs) / (hi - mid)
        fb[m] = np.maximum(0, np.minimum(rise, fall))
        if fb[m].sum() <= 0:
            # filter narrower than the bin spacing: use the nearest bin
            fb[m, np.argmin(np.abs(freqs - mid))] = 1.0
    fb /= fb.sum(axis=1, keepdims=True)
    fb.flags.writeable = False
    return fb


def mel_spectrogram(x, sample_rate, n_mels=40, fft_size=1024, hop=None):
    """log(1 + mel @ |STFT|), shape (..., T, n_mels)."""
    fb = mel_filterbank(n_mels, fft_size, sample_rate)
    mag = magnitude(stft(x, fft_size, hop))
    return ad.log(1.0 + mag @ np.ascontiguousarray(fb.T))

"""Seeded synthetic instruments, mixtures, datasets and WAV persistence.

Everything here is a pure function of seeds and configuration.  Five source
kinds stand in for a multi-instrument corpus; each has a distinct envelope
and spectral signature so a small tagger can tell them apart.
"""
import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import signal

from latmask.dsp import Waveform
from latmask.errors import ConfigError, FormatError

KINDS = ("tonal_harmonic", "percussive", "sustained_saw", "bell_fm", "breath_noise")
TAGS = KINDS
DEFAULT_SR = 8000
PEAK = 0.5
STEM_RMS = 0.05  # per-source level inside mixtures, before gains


@dataclass(frozen=True)
class TagVocabulary:
    names: tuple = TAGS

    def __len__(self):
        return len(self.names)

    def index(self, name):
        try:
            return self.names.index(name)
        except ValueError:
            raise ConfigError(f"unknown tag {name!r}; vocabulary is {list(self.names)}") from None

    def multi_hot(self, names):
        v = np.zeros(len(self.names))
        for n in names:
            v[self.index(n)] = 1.0
        return v

    def to_bitmask(self, vector):
        return sum(1 << i for i, x in enumerate(vector) if x > 0.5)

    def from_bitmask(self, mask):
        return np.array([(mask >> i) & 1 for i in range(len(self.names))], dtype=float)


VOCAB = TagVocabulary()


# -- synthesis ---------------------------------------------------------------

def _rng(kind, seed):
    return np.random.default_rng([KINDS.index(kind), int(seed)])


def _n_events(rng, lo, hi, duration):
    scale = duration / 2.0
    return max(1, int(round(rng.integers(lo, hi + 1) * scale)))


def _onsets(rng, n, duration, tail):
    return np.sort(rng.uniform(0.0, max(duration - tail, 0.05), size=n))


def _place(out, event, start):
    end = min(out.size, start + event.size)
    if end > start:
        out[start:end] += event[:end - start]


def _tonal_harmonic(rng, duration, sr, out):
    events = []
    for onset in _onsets(rng, _n_events(rng, 3, 6, duration), duration, 0.3):
        f0 = 110.0 * 2 ** rng.uniform(0, 2.5)
        tau = rng.uniform(0.25, 0.6)
        t = np.arange(int(min(4 * tau, duration) * sr)) / sr
        attack = np.minimum(t / 0.005, 1.0)
        note = np.zeros_like(t)
        for h in range(1, 20):
            if h * f0 >= 0.45 * sr:
                break
            amp = rng.uniform(0.8, 1.0) / h ** 2
            note += amp * np.exp(-t * h ** 0.5 / tau) * np.sin(2 * np.pi * h * f0 * t + rng.uniform(0, 2 * np.pi))
        _place(out, attack * note, int(onset * sr))
        events.append(onset)
    return events


def _percussive(rng, duration, sr, out):
    events = []
    for onset in _onsets(rng, _n_events(rng, 6, 12, duration), duration, 0.1):
        tau = rng.uniform(0.005, 0.012)
        n = int(0.08 * sr)
        t = np.arange(n) / sr
        noise = rng.standard_normal(n)
        lo = rng.uniform(300, 1200)
        sos = signal.butter(2, [lo, min(lo * rng.uniform(2.5, 4.0), 0.45 * sr)], btype="bandpass", fs=sr, output="sos")
        burst = signal.sosfilt(sos, noise) * np.exp(-t / tau)
        _place(out, burst * rng.uniform(0.6, 1.0), int(onset * sr))
        events.append(onset)
    return events


def _sustained_saw(rng, duration, sr, out):
    events = []
    for onset in _onsets(rng, _n_events(rng, 1, 3, duration), duration, 0.6):
        length = rng.uniform(0.6, 1.5)
        f0 = rng.uniform(150, 500)
        t = np.arange(int(min(length, duration - onset + 0.01) * sr)) / sr
        rate, depth = rng.uniform(4.5, 6.5), rng.uniform(0.006, 0.015)
        phase = 2 * np.pi * np.cumsum(f0 * (1 + depth * np.sin(2 * np.pi * rate * t))) / sr
        note = np.zeros_like(t)
        for h in range(1, 40):
            if h * f0 * (1 + depth) >= 0.45 * sr:
                break
            note += np.sin(h * phase) / h
        env = np.minimum(np.minimum(t / 0.08, 1.0), np.clip((t[-1] - t) / 0.1, 0, 1))
        _place(out, env * note, int(onset * sr))
        events.append(onset)
    return events


def _bell_fm(rng, duration, sr, out):
    events = []
    for onset in _onsets(rng, _n_events(rng, 2, 4, duration), duration, 0.4):
        fc = rng.uniform(300, 900)
        ratio = rng.choice([1.41, 2.76, 3.53])
        tau = rng.uniform(0.4, 1.0)
        t = np.arange(int(min(3 * tau, duration) * sr)) / sr
        index = rng.uniform(2.0, 5.0) * np.exp(-t / (0.5 * tau))
        tone = np.sin(2 * np.pi * fc * t + index * np.sin(2 * np.pi * fc * ratio * t))
        env = np.minimum(t / 0.002, 1.0) * np.exp(-t / tau)
        _place(out, env * tone, int(onset * sr))
        events.append(onset)
    return events


def _breath_noise(rng, duration, sr, out):
    events = []
    for onset in _onsets(rng, _n_events(rng, 1, 2, duration), duration, 0.8):
        length = rng.uniform(0.8, 1.6)
        n = int(min(length, duration - onset + 0.01) * sr)
        t = np.arange(n) / sr
        cutoff = rng.uniform(400, 1200)
        sos = signal.butter(3, cutoff, btype="lowpass", fs=sr, output="sos")
        noise = signal.sosfilt(sos, rng.standard_normal(n))
        attack, release = rng.uniform(0.3, 0.6), rng.uniform(0.3, 0.5)
        env = np.minimum(np.clip(t / attack, 0, 1), np.clip((t[-1] - t) / release, 0, 1)) ** 2
        _place(out, env * noise, int(onset * sr))
        events.append(onset)
    return events


_GENERATORS = {
    "tonal_harmonic": _tonal_harmonic,
    "percussive": _percussive,
    "sustained_saw": _sustained_saw,
    "bell_fm": _bell_fm,
    "breath_noise": _breath_noise,
}


def synth_events(kind, seed, duration=2.0, sr=DEFAULT_SR):
    """Render ``kind`` and also return its event onset times (seconds)."""
    if kind not in _GENERATORS:
        raise ConfigError(f"unknown source kind {kind!r}; expected one of {list(KINDS)}")
    if duration < 0.5:
        raise ConfigError(f"duration must be at least 0.5 s, got {duration}")
    n = int(round(duration * sr))
    out = np.zeros(n)
    events = _GENERATORS[kind](_rng(kind, seed), duration, sr, out)
    peak = np.abs(out).max()
    if peak > 0:
        out *= PEAK / peak
    return Waveform(out, sr), events


def synth_source(kind, seed, duration=2.0, sr=DEFAULT_SR):
    """Deterministic waveform of one synthetic instrument, peak 0.5."""
    return synth_events(kind, seed, duration, sr)[0]


# -- mixtures ----------------------------------------------------------------

@dataclass
class MixtureSpec:
    sources: list  # (kind, gain, seed) triples
    duration: float = 4.0
    sample_rate: int = DEFAULT_SR

    def __post_init__(self):
        if not self.sources:
            raise ConfigError("a mixture needs at least one source")
        for kind, gain, _ in self.sources:
            if gain <= 0:
                raise ConfigError(f"gain for {kind!r} must be positive, got {gain}")


def make_mixture(spec):
    """Return (mixture, stems, tags); ``mixture`` is the exact sum of ``stems``.

    Each source is first brought to RMS ``STEM_RMS`` so a gain of 1 means
    the same power for every kind; stems then carry their (possibly jointly
    rescaled) gains.  ``tags`` holds one single-bit vector per stem.
    """
    stems = []
    for kind, gain, seed in spec.sources:
        x = synth_source(kind, seed, spec.duration, spec.sample_rate).samples.astype(np.float64)
        stems.append(gain * STEM_RMS / np.sqrt(np.mean(x * x)) * x)
    mixture = np.zeros_like(stems[0])
    for s in stems:
        mixture = mixture + s
    peak = np.abs(mixture).max()
    if peak > 0.99:
        scale = 0.99 / peak
        stems = [s * scale for s in stems]
        mixture = np.zeros_like(stems[0])
        for s in stems:
            mixture = mixture + s
    tags = [VOCAB.multi_hot([kind]) for kind, _, _ in spec.sources]
    sr = spec.sample_rate
    return Waveform(mixture, sr), [Waveform(s, sr) for s in stems], tags


def pair_mixture(kinds, seed, duration=4.0, sr=DEFAULT_SR):
    """Equal-gain mixture of the given kinds with per-source seeds derived from ``seed``."""
    return MixtureSpec([(k, 1.0, seed * 16 + i) for i, k in enumerate(kinds)], duration, sr)


# -- datasets ----------------------------------------------------------------

@dataclass
class DatasetConfig:
    train_per_kind: int = 100
    val_per_kind: int = 10
    test_per_kind: int = 10
    duration: float = 2.0
    sample_rate: int = DEFAULT_SR
    extra_prob: float = 0.25  # chance each non-primary kind joins a clip
    split_seeds: dict = field(default_factory=lambda: {"train": 0, "val": 1_000_000, "test": 2_000_000})


@dataclass
class Clip:
    path: str
    samples: np.ndarray
    tags: np.ndarray
    seed: int
    sample_rate: int


@dataclass
class Dataset:
    splits: dict
    vocabulary: TagVocabulary = VOCAB

    def clips(self, split):
        return self.splits[split]

    def manifest_lines(self):
        lines = []
        for split in self.splits:
            for c in self.splits[split]:
                mask = VOCAB.to_bitmask(c.tags)
                lines.append(f"{c.path}\t{c.sample_rate}\t{c.samples.size}\t{mask:x}\t{c.seed}")
        return lines


def _split_counts(cfg):
    return {"train": cfg.train_per_kind, "val": cfg.val_per_kind, "test": cfg.test_per_kind}


def dataset_plan(cfg):
    """List of (split, path, primary kind, seed) without rendering audio."""
    counts = _split_counts(cfg)
    ranges = []
    for split, per_kind in counts.items():
        if split not in cfg.split_seeds:
            raise ConfigError(f"no seed base for split {split!r}")
        base = int(cfg.split_seeds[split])
        ranges.append((base, base + per_kind * len(KINDS), split))
    ranges.sort()
    for (a0, a1, sa), (b0, b1, sb) in zip(ranges, ranges[1:]):
        if b0 < a1:
            raise ConfigError(f"seed ranges of splits {sa!r} and {sb!r} overlap")
    plan = []
    for split, per_kind in counts.items():
        base = int(cfg.split_seeds[split])
        for i in range(per_kind * len(KINDS)):
            kind = KINDS[i % len(KINDS)]
            plan.append((split, f"{split}/clip_{i:05d}.wav", kind, base + i))
    return plan


def render_clip(kind, seed, cfg):
    rng = np.random.default_rng([99, seed])
    sources = [(kind, 1.0, seed)]
    for other in KINDS:
        if other != kind and rng.random() < cfg.extra_prob:
            sources.append((other, float(rng.uniform(0.4, 1.0)), seed))
    mixture, _, tags = make_mixture(MixtureSpec(sources, cfg.duration, cfg.sample_rate))
    return mixture.samples.astype(np.float32), np.maximum.reduce(tags)


def build_dataset(cfg=None, out_dir=None):
    """Render every planned clip; with ``out_dir`` also write WAVs and ``manifest.tsv``."""
    cfg = cfg or DatasetConfig()
    plan = dataset_plan(cfg)
    for split, per_kind in _split_counts(cfg).items():
        if per_kind < 1:
            raise ConfigError(f"split {split!r} needs at least one clip per kind")
    splits = {s: [] for s in _split_counts(cfg)}
    for split, path, kind, seed in plan:
        samples, tags = render_clip(kind, seed, cfg)
        splits[split].append(Clip(path, samples, tags, seed, cfg.sample_rate))
    ds = Dataset(splits)
    if out_dir is not None:
        out_dir = Path(out_dir)
        for split in splits:
            for c in splits[split]:
                write_wav(out_dir / c.path, Waveform(c.samples, c.sample_rate), "float32")
        (out_dir / "manifest.tsv").write_text("\n".join(ds.manifest_lines()) + "\n", encoding="utf-8")
    return ds


def load_dataset(directory):
    directory = Path(directory)
    manifest = directory / "manifest.tsv"
    if not manifest.exists():
        raise FormatError(f"no manifest at {manifest}")
    splits = {}
    for line in manifest.read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        path, sr, n, mask, seed = line.split("\t")
        wav = read_wav(directory / path)
        if wav.samples.size != int(n) or wav.sample_rate != int(sr):
            raise FormatError(f"{path} does not match its manifest row")
        clip = Clip(path, wav.samples, VOCAB.from_bitmask(int(mask, 16)), int(seed), int(sr))
        splits.setdefault(path.split("/")[0], []).append(clip)
    return Dataset(splits)


def file_digest(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# -- WAV I/O -----------------------------------------------------------------

_PCM, _FLOAT = 1, 3


def write_wav(path, wave, encoding="float32"):
    """Write mono PCM16 or IEEE float32 RIFF/WAVE."""
    samples = np.asarray(wave.samples)
    if encoding == "float32":
        fmt, bits, payload = _FLOAT, 32, samples.astype("<f4").tobytes()
    elif encoding == "pcm16":
        q = np.clip(np.round(samples * 32768.0), -32768, 32767).astype("<i2")
        fmt, bits, payload = _PCM, 16, q.tobytes()
    else:
        raise ConfigError(f"unsupported wav encoding {encoding!r}")
    block = bits // 8
    fmt_chunk = struct.pack("<HHIIHH", fmt, 1, wave.sample_rate, wave.sample_rate * block, block, bits)
    body = b"WAVE" + b"fmt " + struct.pack("<I", len(fmt_chunk)) + fmt_chunk
    body += b"data" + struct.pack("<I", len(payload)) + payload
    if len(payload) % 2:
        body += b"\x00"
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(b"RIFF" + struct.pack("<I", len(body)) + body)


def read_wav(path):
    """Read a mono PCM16 / float32 WAV; anything else raises FormatError."""
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != b"RIFF" or raw[8:12] != b"WAVE":
        raise FormatError(f"{path}: missing RIFF/WAVE header")
    pos, fmt, data = 12, None, None
    while pos < len(raw):
        if pos + 8 > len(raw):
            raise FormatError(f"{path}: truncated chunk header at byte {pos}")
        cid, size = raw[pos:pos + 4], struct.unpack("<I", raw[pos + 4:pos + 8])[0]
        name = cid.decode("latin-1")
        start = pos + 8
        if start + size > len(raw):
            raise FormatError(f"{path}: chunk {name!r} truncated ({len(raw) - start} of {size} bytes)")
        if cid == b"fmt ":
            if size < 16:
                raise FormatError(f"{path}: chunk 'fmt ' too short")
            fmt = struct.unpack("<HHIIHH", raw[start:start + 16])
        elif cid == b"data":
            data = raw[start:start + size]
        pos = start + size + (size % 2)
    if fmt is None:
        raise FormatError(f"{path}: missing chunk 'fmt '")
    if data is None:
        raise FormatError(f"{path}: missing chunk 'data'")
    code, channels, sr, _, _, bits = fmt
    if channels != 1:
        raise FormatError(f"{path}: chunk 'fmt ' declares {channels} channels, only mono is supported")
    if bits in (16, 32) and len(data) % (bits // 8):
        raise FormatError(f"{path}: chunk 'data' length {len(data)} is not a whole number of samples")
    if code == _FLOAT and bits == 32:
        samples = np.frombuffer(data, dtype="<f4").astype(np.float32)
    elif code == _PCM and bits == 16:
        samples = np.frombuffer(data, dtype="<i2").astype(np.float32) / 32768.0
    else:
        raise FormatError(f"{path}: chunk 'fmt ' has unsupported codec {code} at {bits} bits")
    return Waveform(samples, sr)

"""Small convolutional multi-label taggers over mel features.

``fcn_mini`` reads one 40-band mel spectrogram; ``mrs_mini`` concatenates
mel spectrograms at two FFT sizes (a multi-resolution front end).  Both
share the trunk: three 1-D convolutions over time, global mean pooling and
a sigmoid output layer.
"""
from dataclasses import asdict, dataclass

import numpy as np

from latmask import autodiff as ad
from latmask import dsp
from latmask.data import VOCAB
from latmask.errors import ConfigError, ContractError
from latmask.models import checkpoint

# arch -> tuple of (fft_size, hop) mel front ends
FRONT_ENDS = {
    "fcn_mini": ((1024, 256),),
    "mrs_mini": ((256, 64), (1024, 64)),
}
BCE_EPS = 1e-8


@dataclass
class TaggerConfig:
    arch: str = "fcn_mini"
    channels: int = 32
    n_tags: int = 5
    n_mels: int = 40
    sample_rate: int = 8000
    seed: int = 0

    def __post_init__(self):
        if self.arch not in FRONT_ENDS:
            raise ConfigError(f"unknown tagger architecture {self.arch!r}; expected one of {sorted(FRONT_ENDS)}")


def init_params(cfg):
    rng = np.random.default_rng([23, cfg.seed])
    n_feat = cfg.n_mels * len(FRONT_ENDS[cfg.arch])
    c = cfg.channels
    params = {"feat_mean": np.zeros(n_feat), "feat_std": np.ones(n_feat)}
    for name, cin in (("conv1", n_feat), ("conv2", c), ("conv3", c)):
        bound = np.sqrt(6.0 / (cin * 3))
        params[f"{name}.w"] = rng.uniform(-bound, bound, size=(c, cin, 3))
        params[f"{name}.b"] = np.zeros(c)
    bound = np.sqrt(6.0 / (c + cfg.n_tags))
    params["out.w"] = rng.uniform(-bound, bound, size=(c, cfg.n_tags))
    params["out.b"] = np.zeros(cfg.n_tags)
    return {k: v.astype(np.float32) for k, v in params.items()}


class Tagger:
    def __init__(self, config=None, params=None, vocabulary=VOCAB):
        self.config = config or TaggerConfig()
        self.params = params if params is not None else init_params(self.config)
        self.vocabulary = vocabulary
        self.frozen = False
        if len(vocabulary) != self.config.n_tags:
            raise ContractError(f"vocabulary has {len(vocabulary)} tags but tagger outputs {self.config.n_tags}")

    @property
    def arch(self):
        return self.config.arch

    @property
    def min_length(self):
        return max(n for n, _ in FRONT_ENDS[self.arch])

    def freeze(self):
        for arr in self.params.values():
            arr.flags.writeable = False
        self.frozen = True
        return self

    def meta(self):
        return {"model": "tagger", "config": asdict(self.config), "vocabulary": list(self.vocabulary.names)}

    def digest(self):
        return checkpoint.digest(self.params, self.meta())

    def save(self, path):
        return checkpoint.save(path, self.params, self.meta())

    @classmethod
    def load(cls, path):
        arrays, meta = checkpoint.load(path)
        if not meta or meta.get("model") != "tagger":
            raise ContractError(f"{path} is not a tagger checkpoint")
        vocab = type(VOCAB)(tuple(meta["vocabulary"]))
        return cls(TaggerConfig(**meta["config"]), dict(arrays), vocab).freeze()

    def bind(self, tape, trainable=False):
        out = {}
        for k, v in self.params.items():
            learn = trainable and not k.startswith("feat_")
            out[k] = tape.leaf(v) if learn else tape.const(v)
        return out


def features_graph(model, x):
    """Mel features (B, T, n_feat) of waveform batch ``x`` (B, L)."""
    if x.shape[-1] < model.min_length:
        raise ContractError(f"clip of {x.shape[-1]} samples is shorter than one {model.min_length}-sample frame")
    parts = [dsp.mel_spectrogram(x, model.config.sample_rate, model.config.n_mels, n, hop)
             for n, hop in FRONT_ENDS[model.arch]]
    return parts[0] if len(parts) == 1 else ad.concat(parts, axis=-1)


def trunk_graph(p, feats):
    """Normalized features (B, T, n_feat) -> tag probabilities (B, K)."""
    h = (feats - p["feat_mean"]) / p["feat_std"]
    h = ad.transpose(h, (0, 2, 1))
    h = ad.relu(ad.conv1d(h, p["conv1.w"], p["conv1.b"], padding=1))
    h = ad.relu(ad.conv1d(h, p["conv2.w"], p["conv2.b"], stride=2, padding=1))
    h = ad.relu(ad.conv1d(h, p["conv3.w"], p["conv3.b"], padding=1))
    pooled = ad.mean(h, axis=2)
    return ad.sigmoid(pooled @ p["out.w"] + p["out.b"])


def tagger_var(model, x, params=None):
    """Tag probabilities for a waveform variable of shape (L,) -> (K,) or (B, L) -> (B, K)."""
    single = x.ndim == 1
    if single:
        x = ad.reshape(x, (1, x.shape[0]))
    p = params if params is not None else model.bind(x.tape)
    probs = trunk_graph(p, features_graph(model, x))
    return ad.reshape(probs, (probs.shape[1],)) if single else probs


def tagger_forward(model, x, dtype=np.float64):
    """Tag probabilities (K,) for a Waveform or 1-D array."""
    samples = x.samples if isinstance(x, dsp.Waveform) else np.asarray(x)
    tape = ad.Tape(dtype)
    return tagger_var(model, tape.const(samples)).value.astype(np.float64)


def bce(probs, targets, eps=BCE_EPS):
    """Mean binary cross-entropy with eps-floored logs; ``targets`` is constant."""
    t = np.asarray(targets.value if isinstance(targets, ad.Var) else targets, dtype=np.float64)
    if tuple(t.shape) != tuple(probs.shape):
        raise ContractError(f"tag vectors differ in shape: {probs.shape} vs {t.shape}")
    ll = t * ad.log(probs + eps) + (1.0 - t) * ad.log(1.0 - probs + eps)
    return -ad.mean(ll)


def macro_auc(scores, labels):
    """Per-tag ROC AUC via the rank-sum statistic; returns (macro mean, per-tag list)."""
    from scipy.stats import rankdata

    scores, labels = np.asarray(scores), np.asarray(labels)
    per_tag = []
    for k in range(labels.shape[1]):
        pos = labels[:, k] > 0.5
        n_pos, n_neg = int(pos.sum()), int((~pos).sum())
        if n_pos == 0 or n_neg == 0:
            per_tag.append(float("nan"))
            continue
        ranks = rankdata(scores[:, k])
        per_tag.append(float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg)))
    return float(np.nanmean(per_tag)), per_tag

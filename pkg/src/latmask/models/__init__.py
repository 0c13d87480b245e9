"""Frozen stand-in models: the VQ autoencoder and the taggers."""
from latmask.models.autoencoder import (COMPRESSION, Autoencoder, AutoencoderConfig, decode,
                                        decode_var, encode, multiscale_spectral_loss,
                                        quantize_latent)
from latmask.models.tagger import (FRONT_ENDS, Tagger, TaggerConfig, bce, macro_auc,
                                   tagger_forward, tagger_var)
from latmask.models.training import (AutoencoderTrainConfig, TaggerTrainConfig, TrainReport,
                                     codebook_usage, pretrain_autoencoder, pretrain_tagger,
                                     reconstruction_loss)

__all__ = [
    "COMPRESSION", "Autoencoder", "AutoencoderConfig", "decode", "decode_var", "encode",
    "multiscale_spectral_loss", "quantize_latent", "FRONT_ENDS", "Tagger", "TaggerConfig",
    "bce", "macro_auc", "tagger_forward", "tagger_var", "AutoencoderTrainConfig",
    "TaggerTrainConfig", "TrainReport", "codebook_usage", "pretrain_autoencoder",
    "pretrain_tagger", "reconstruction_loss",
]

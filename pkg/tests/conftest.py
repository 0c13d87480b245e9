import time

import numpy as np
import pytest

from latmask import data
from latmask.models import (Autoencoder, AutoencoderConfig, Tagger, TaggerConfig, pretrain_autoencoder,
                            pretrain_tagger)
from latmask.separation import FrozenModels


@pytest.fixture(scope="session")
def dataset():
    """The default synthetic dataset, rendered in memory once per session."""
    return data.build_dataset(data.DatasetConfig())


@pytest.fixture(scope="session")
def trained(dataset, tmp_path_factory):
    """Default-config pretraining of the autoencoder and both taggers, timed."""
    out = tmp_path_factory.mktemp("models")
    start = time.perf_counter()
    ae, ae_report = pretrain_autoencoder(dataset, curve_path=out / "autoencoder_curve.csv")
    taggers, tagger_reports = {}, {}
    for arch in ("fcn_mini", "mrs_mini"):
        taggers[arch], tagger_reports[arch] = pretrain_tagger(dataset, arch, curve_path=out / f"{arch}.csv")
    seconds = time.perf_counter() - start
    ae.save(out / "autoencoder.lmk")
    for arch, model in taggers.items():
        model.save(out / f"tagger_{arch}.lmk")
    return {"autoencoder": ae, "ae_report": ae_report, "taggers": taggers,
            "tagger_reports": tagger_reports, "seconds": seconds, "dir": out}


@pytest.fixture(scope="session")
def models(trained):
    return FrozenModels(trained["autoencoder"], trained["taggers"]["fcn_mini"])


@pytest.fixture(scope="session")
def tiny_models():
    """Untrained, narrow models: fast enough for contract tests that need no quality."""
    ae = Autoencoder(AutoencoderConfig(channels=8, seed=3)).freeze()
    tagger = Tagger(TaggerConfig(channels=8, seed=3)).freeze()
    return FrozenModels(ae, tagger)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)

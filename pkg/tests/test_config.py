import pytest

from latmask.config import RunConfig, load_config, parse_text
from latmask.errors import ConfigError


def test_defaults_match_module_defaults():
    cfg = RunConfig()
    sep = cfg.echo()["separation"]
    assert sep["learning_rate"] == 5.0 and sep["steps"] == 10 and sep["fft_sizes"] == [1024]
    assert sep["optimizer"] == "adam" and sep["betas"] == [0.9, 0.999]
    assert cfg.autoencoder_train.beta == 0.25 and cfg.autoencoder.latent_dim == 64


def test_values_are_typed():
    cfg = RunConfig.from_pairs([("separation.fft_sizes", "256 512 1024"), ("separation.steps", "100"),
                                ("separation.quantize", "true"), ("data.split_seeds", "train:0 val:500 test:900"),
                                ("run.out_dir", "elsewhere")])
    assert cfg.separation.fft_sizes == (256, 512, 1024) and cfg.separation.steps == 100
    assert cfg.separation.quantize is True
    assert cfg.data.split_seeds == {"train": 0, "val": 500, "test": 900}
    assert str(cfg.run.resolve("models_dir")) == "elsewhere/models"


@pytest.mark.parametrize("pairs", [[("separation.lr", "1")], [("nope.steps", "1")], [("steps", "1")],
                                   [("separation.steps", "ten")], [("separation.quantize", "maybe")],
                                   [("separation.optimizer", "rmsprop")]])
def test_bad_keys_and_values(pairs):
    with pytest.raises(ConfigError):
        RunConfig.from_pairs(pairs)


def test_text_round_trip(tmp_path):
    cfg = RunConfig.from_pairs([("separation.fft_sizes", "256 1024"), ("tagger.arch", "mrs_mini")])
    path = tmp_path / "desk.cfg"
    path.write_text("# comment line\n" + cfg.to_text())
    assert load_config(path).echo() == cfg.echo()


def test_overrides_win(tmp_path):
    path = tmp_path / "a.cfg"
    path.write_text("separation.steps = 3  # trailing comment\n")
    assert load_config(path, [("separation.steps", "4")]).separation.steps == 4


def test_environment_variable(tmp_path, monkeypatch):
    path = tmp_path / "env.cfg"
    path.write_text("separation.steps = 7\n")
    monkeypatch.setenv("LATMASK_CONFIG", str(path))
    assert load_config().separation.steps == 7


def test_missing_file_and_bad_line(tmp_path):
    with pytest.raises(ConfigError, match="nowhere.cfg"):
        load_config(tmp_path / "nowhere.cfg")
    with pytest.raises(ConfigError, match="line 2"):
        parse_text("a.b = 1\njust words\n")

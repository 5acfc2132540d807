import hashlib

import pytest

from savfi.config import ConfigError, PipelineConfig, format_config, hash64, load_config


def test_hash64_matches_blake2b():
    ref = int.from_bytes(hashlib.blake2b(b"42:piv", digest_size=8).digest(), "little")
    assert hash64(42, "piv") == ref
    assert hash64(42, "piv") != hash64(43, "piv")
    assert hash64(42, "piv") != hash64(42, "cnn")
    assert 0 <= hash64(0, "") < 2**64


def test_defaults_and_overrides():
    cfg = load_config(overrides=["seed=7", "probe.f0_hz=6e6", "grid.size=64",
                                 "piv.deform=false", "train.optimizer=sgd",
                                 "train.crop=none", "train.schedule=constant"])
    assert cfg.seed == 7
    assert cfg.probe.f0 == 6e6
    assert cfg.grid.size == 64
    assert cfg.piv.deform is False
    assert cfg.train.optimizer == "sgd"
    assert cfg.train.crop is None and cfg.train.schedule == "constant"
    assert cfg.stage_seed("x") == hash64(7, "x")


def test_file_with_comments(tmp_path):
    p = tmp_path / "c.txt"
    p.write_text("# comment\nseed = 3  # trailing\n\nscene.tags = disk, straight90\n")
    cfg = load_config(p, ["seed=4"])
    assert cfg.seed == 4
    assert cfg.scene.tags == ("disk", "straight90")


@pytest.mark.parametrize("item", ["nope=1", "probe.nope=1", "grid.size=abc", "piv.deform=maybe",
                                  "bogus.size=1", "seed", "probe.fs=1e6",
                                  "net.encoder=4:16", "train.batch_size=0"])
def test_rejected(item):
    with pytest.raises(ConfigError):
        load_config(overrides=[item])


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.txt")


def test_format_round_trip(tmp_path):
    cfg = load_config(overrides=["seed=9", "svd.high_cut=4", "net.encoder=5:8,4:8",
                                 "net.decoder=8:1,4:-"])
    p = tmp_path / "c.txt"
    p.write_text(format_config(cfg))
    assert load_config(p) == cfg
    assert load_config(None) == PipelineConfig()

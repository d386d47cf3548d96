import pytest

from fluid.config import (
    PRESETS, build_config, config_from_dict, dump_config, load_config, make_spec, parse_value, preset,
)
from fluid.grad import ConfigurationError
from fluid.ssm import AdvDiffSpec, LorenzSpec


def test_parse_value():
    assert parse_value("3") == 3 and parse_value("1e-3") == 1e-3
    assert parse_value("true") is True and parse_value("None") is None
    assert parse_value("(0.9, 0.8)") == (0.9, 0.8)
    assert parse_value("cosine") == "cosine"


def test_paper_presets_sizes():
    cfg = preset("case1", "paper")
    assert (cfg.data.n_train, cfg.data.T, cfg.data.n_test) == (2000, 500, 200)
    assert preset("burgers", "paper").data.n_train == 3000
    assert preset("sv", "paper").data.T == 1000
    assert {b for b, _ in PRESETS} == {"case1", "case2", "sv", "burgers", "lorenz", "lorenz2"}


def test_every_preset_builds_a_spec():
    for bench, scale in PRESETS:
        make_spec(preset(bench, scale))


def test_include_and_override_order(tmp_path):
    (tmp_path / "base.cfg").write_text("benchmark = lorenz\ntrain.epochs = 7\nspec.F = 5.0  # forcing\n")
    (tmp_path / "run.cfg").write_text("include = base.cfg\ntrain.epochs = 9\nseed = 3\n")
    cfg = load_config(tmp_path / "run.cfg", ["arch.hidden_dim=16"])
    assert cfg.benchmark == "lorenz" and cfg.train.epochs == 9 and cfg.arch.hidden_dim == 16
    assert cfg.train.seed == 3 and cfg.pf_train.seed == 3
    spec = make_spec(cfg)
    assert isinstance(spec, LorenzSpec) and spec.F == 5.0
    cfg2 = load_config(tmp_path / "run.cfg", ["train.epochs=2"])
    assert cfg2.train.epochs == 2


def test_include_cycle(tmp_path):
    (tmp_path / "a.cfg").write_text("include = b.cfg\n")
    (tmp_path / "b.cfg").write_text("include = a.cfg\n")
    with pytest.raises(ConfigurationError, match="cycle"):
        load_config(tmp_path / "a.cfg")


def test_unknown_keys_rejected():
    with pytest.raises(ConfigurationError):
        build_config(overrides=["train.nonsense=1"])
    with pytest.raises(ConfigurationError):
        build_config(overrides=["spec.bogus=1"])
    with pytest.raises(ConfigurationError):
        build_config(overrides=["benchmark=nope"])


def test_dump_roundtrip_and_hash(tmp_path):
    cfg = build_config(overrides=["benchmark=case2", "spec.n=32", "train.lr_schedule=cosine", "seed=4"])
    (tmp_path / "c.cfg").write_text(dump_config(cfg))
    back = load_config(tmp_path / "c.cfg")
    assert back == cfg and back.digest() == cfg.digest()
    assert config_from_dict(cfg.to_dict()) == cfg
    assert build_config(overrides=["seed=5"]).digest() != build_config(overrides=["seed=6"]).digest()
    assert isinstance(make_spec(cfg), AdvDiffSpec) and make_spec(cfg).n == 32

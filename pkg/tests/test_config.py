import json

import pytest

from xmcl.config import ConfigError, RunConfig


def test_defaults_validate():
    cfg = RunConfig.from_dict({})
    assert cfg.layout.d_sh + cfg.layout.d_pr == cfg.feature_dim
    assert cfg.loss_variant == "tuple_circle"


@pytest.mark.parametrize("over,match", [
    ({"bogus": 1}, "unknown config key 'bogus'"),
    ({"optim": {"lrr": 1}}, "optim.lrr"),
    ({"loss": {"variant": "triplet"}}, "variant"),
    ({"loss": {"d_shared": 32}}, "private span"),
    ({"model": {"image": {"head": 16}}}, "head width"),
    ({"data": {"scene": {"height": 30}}}, "divisible"),
    ({"eval": {"n_sample": 128}}, "n_sample"),
    ({"model": {"point": {"nonsense": 1}}}, "invalid config block"),
])
def test_bad_configs(over, match):
    with pytest.raises(ConfigError, match=match):
        RunConfig.from_dict(over)


def test_load_reports_json_line(tmp_path):
    p = tmp_path / "c.json"
    p.write_text('{\n "seed": 1,\n}')
    with pytest.raises(ConfigError, match="line 3"):
        RunConfig.load(p)
    with pytest.raises(ConfigError, match="cannot read"):
        RunConfig.load(tmp_path / "nope.json")


def test_overrides_and_json_roundtrip(tmp_path):
    cfg = RunConfig.from_dict({}).with_overrides(**{"seed": 5, "loss.variant": "circle"})
    assert cfg.seed == 5 and cfg.loss_variant == "circle"
    p = tmp_path / "c.json"
    p.write_text(cfg.to_json())
    assert RunConfig.load(p).raw == cfg.raw
    assert json.loads(cfg.to_json())["loss"]["variant"] == "circle"


def test_shipped_toy_config_loads():
    from pathlib import Path
    cfg = RunConfig.load(Path(__file__).parent.parent / "configs" / "toy.json")
    assert cfg.n_train >= 16 and cfg.optim["batch_n"] == 64

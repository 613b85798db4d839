import json

import pytest

from qusr.config import RunConfig, load_config, parse_override
from qusr.errors import ConfigError


def test_defaults():
    cfg = RunConfig().validate()
    assert cfg.optim.lr == 3e-5 and cfg.train.batch_size == 4
    assert cfg.denoiser.lora_rank == 4 and cfg.denoiser.timestep == 1
    assert (cfg.noise.k, cfg.noise.m, cfg.noise.delta, cfg.noise.p) == (1.0, 0.2, 1e-4, 0.1)
    assert cfg.data.patch_size == 32 and cfg.text.max_tokens == 77


def test_override_types():
    cfg = RunConfig().with_overrides(["noise.p=0", "loss.t_range=[2, 10]", "ablation.use_qap=false",
                                      "data.hq_dir=/x"])
    assert cfg.noise.p == 0.0 and isinstance(cfg.noise.p, float)
    assert cfg.loss.t_range == (2, 10)
    assert cfg.ablation.use_qap is False
    assert cfg.data.hq_dir == "/x"


@pytest.mark.parametrize("item", ["noise.p", "=3", "noise..p=1", "noise.q=1", "nope=1",
                                  "noise.p=abc", "ablation.use_qap=1", "train.steps=1.5"])
def test_bad_overrides(item):
    with pytest.raises(ConfigError):
        RunConfig().with_overrides([item])


def test_parse_override_names_key():
    with pytest.raises(ConfigError, match="noise.p"):
        RunConfig().with_overrides(["noise.p=[1, 2"])
    assert parse_override("a.b= 3 ") == ("a.b", 3)


def test_validation():
    with pytest.raises(ConfigError):
        load_config(None, ["degradation.scale=2"])
    with pytest.raises(ConfigError):
        load_config(None, ["noise.m=2"])
    with pytest.raises(ConfigError):
        load_config(None, ["denoiser.timestep=5"])
    with pytest.raises(ConfigError):
        load_config(None, ["optim.name=sgd"])


def test_json_roundtrip_and_file(tmp_path):
    cfg = RunConfig().with_overrides(["seed=9", "loss.alpha=0.05"])
    path = tmp_path / "c.json"
    path.write_text(cfg.to_json())
    assert load_config(path) == cfg
    (tmp_path / "c.yaml").write_text("seed: 3\nnoise:\n  p: 0.25\n")
    loaded = load_config(tmp_path / "c.yaml", ["seed=4"])
    assert loaded.seed == 4 and loaded.noise.p == 0.25
    assert RunConfig.from_dict(json.loads(loaded.to_json())) == loaded


def test_unreadable_or_unknown(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "none.yaml")
    (tmp_path / "bad.yaml").write_text("mystery: 1\n")
    with pytest.raises(ConfigError, match="mystery"):
        load_config(tmp_path / "bad.yaml")

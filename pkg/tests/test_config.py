import json

import pytest

from core.config_loader import ConfigLoader, ModelConfig
from utils.error_handler import ConfigError


def _write(tmp_path, data):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(data), encoding="utf-8")
    return str(path)


def test_missing_file_uses_defaults(tmp_path, monkeypatch):
    monkeypatch.delenv("STRUCTCBR_OUT", raising=False)
    config = ConfigLoader(str(tmp_path / "absent.json"))
    assert config.get("DECODER.BEAM_SIZE") == 8
    assert config.get("GTM.LAMBDA") == 0.3
    assert str(config.output_dir) == "runs/default"


def test_file_values_merge_over_defaults(tmp_path):
    config = ConfigLoader(_write(tmp_path, {"DECODER": {"BEAM_SIZE": 4}}))
    assert config.get("DECODER.BEAM_SIZE") == 4
    assert config.get("DECODER.MAX_HEIGHT") == 6
    assert config.get("NOPE.KEY", "fallback") == "fallback"


def test_preset_overrides_and_is_recorded(tmp_path):
    config = ConfigLoader(_write(tmp_path, {}), preset="large")
    assert config.get("DECODER.BEAM_SIZE") == 30
    assert config.get("MODEL.HIDDEN_SIZE") == 256
    assert config.get("PRESET") == "large"
    with pytest.raises(ConfigError):
        ConfigLoader(_write(tmp_path, {}), preset="huge")


def test_environment_overrides_output_dir(tmp_path, monkeypatch):
    monkeypatch.setenv("STRUCTCBR_OUT", str(tmp_path / "out"))
    config = ConfigLoader(_write(tmp_path, {}))
    assert config.output_dir == tmp_path / "out"


def test_malformed_file_is_a_config_error(tmp_path):
    path = tmp_path / "config.json"
    path.write_text("{not json", encoding="utf-8")
    with pytest.raises(ConfigError):
        ConfigLoader(str(path))


@pytest.mark.parametrize("override", [
    {"MODEL": {"HIDDEN_SIZE": 10, "ATTENTION_HEADS": 4}},
    {"DECODER": {"BEAM_SIZE": 0}},
    {"CBR": {"CASES_PER_GROUP": 3, "BATCH_SIZE": 16}},
    {"CBR": {"CASES_PER_GROUP": 1, "BATCH_SIZE": 4}},
    {"GTM": {"LAMBDA": 1.5}},
    {"GTM": {"TAU": 0}},
    {"SPLITS": {"NUM_SPLITS": 0}},
    {"SEEDS": {"CORPUS": "x"}},
])
def test_validation_rejects_bad_values(tmp_path, override):
    with pytest.raises(ConfigError):
        ConfigLoader(_write(tmp_path, override))


def test_set_revalidates(tmp_path):
    config = ConfigLoader(_write(tmp_path, {}))
    config.set("GTM.LAMBDA", 0.0)
    assert config.get("GTM.LAMBDA") == 0.0
    with pytest.raises(ConfigError):
        config.set("DECODER.MAX_HEIGHT", 0)


def test_seeds_and_hash(tmp_path):
    config = ConfigLoader(_write(tmp_path, {}))
    assert config.seed("CORPUS") == 13
    with pytest.raises(ConfigError):
        config.seed("UNKNOWN")
    before = config.config_hash()
    config.set("SEEDS.CORPUS", 14)
    assert config.config_hash() != before


def test_model_config_from_loader(tmp_path):
    config = ConfigLoader(_write(tmp_path, {"MODEL": {"HIDDEN_SIZE": 32, "ATTENTION_HEADS": 2},
                                            "CBR": {"SHARE_OP_EMBEDDING": False}}))
    model = ModelConfig.from_loader(config)
    assert model.hidden_size == 32 and model.attention_heads == 2
    assert model.share_op_embedding is False
    assert model.to_dict()["beam_size"] == 8

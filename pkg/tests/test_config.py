import pytest

from tiledehaze import ConfigError, ModelConfig
from tiledehaze.config import (
    check_keys,
    format_value,
    from_flat,
    parse_config_file,
    parse_overrides,
    resolve_model_config,
    to_flat,
    valid_keys,
)
from tiledehaze.training import TrainConfig


def test_to_flat_round_trip():
    cfg = ModelConfig().resolved()
    flat = {k: format_value(v) for k, v in to_flat(cfg).items()}
    back = from_flat(ModelConfig, flat, defaults=ModelConfig())
    assert back.resolved() == cfg


def test_tuple_and_none_formatting():
    assert format_value((2, 2, 6, 2)) == "2,2,6,2"
    assert format_value(None) == "none"
    assert format_value(True) == "true"


def test_parse_config_file(tmp_path):
    path = tmp_path / "model.cfg"
    path.write_text(
        "# toy profile\n"
        "encoder.patch_size = 32\n"
        "encoder.embed_dim = 16   # narrow\n"
        "encoder.stage_depths = 1,1\n"
        "encoder.num_heads = 2,2\n"
        "encoder.window_size = 4\n"
        "\n"
        "precision = fp32\n")
    cfg = resolve_model_config(path)
    assert cfg.encoder.patch_size == 32
    assert cfg.encoder.stage_depths == (1, 1)
    assert cfg.bottleneck.token_dim == 32  # derived from the narrow encoder


def test_override_precedence(tmp_path):
    path = tmp_path / "model.cfg"
    path.write_text("encoder.patch_size = 64\nencoder.window_size = 4\n")
    cfg = resolve_model_config(path, ["encoder.patch_size=32", "encoder.embed_dim=16",
                                      "encoder.stage_depths=1,1", "encoder.num_heads=2,2"])
    assert cfg.encoder.patch_size == 32  # override beats file


def test_unknown_key_suggests_nearest(tmp_path):
    with pytest.raises(ConfigError) as err:
        resolve_model_config(None, ["encoder.patchsize=32"])
    assert "encoder.patch_size" in str(err.value)


def test_bottleneck_keys_layer_over_derived_defaults():
    cfg = resolve_model_config(None, [
        "encoder.patch_size=32", "encoder.embed_dim=16", "encoder.stage_depths=1,1",
        "encoder.num_heads=2,2", "encoder.window_size=4", "bottleneck.depth=3"])
    assert cfg.bottleneck.depth == 3
    assert cfg.bottleneck.token_dim == 32  # still derived, not the dataclass default


def test_malformed_lines_rejected(tmp_path):
    path = tmp_path / "bad.cfg"
    path.write_text("encoder.patch_size 32\n")
    with pytest.raises(ConfigError):
        parse_config_file(path)
    with pytest.raises(ConfigError):
        parse_overrides(["encoder.patch_size:32"])


def test_train_config_keys():
    keys = valid_keys(TrainConfig)
    assert "crop_size" in keys and "lr_init" in keys
    check_keys({"crop_size": "128"}, keys)
    with pytest.raises(ConfigError):
        check_keys({"cropsize": "128"}, keys)
    cfg = from_flat(TrainConfig, {"crop_size": "128", "epochs": "2"}, defaults=TrainConfig())
    assert cfg.crop_size == 128 and cfg.epochs == 2

import json

import pytest

from masdt.config import ConfigError, build_config, load_config, parse_value


def test_empty_file_gives_training_defaults(tmp_path):
    path = tmp_path / "empty.json"
    path.write_text("")
    cfg = load_config(path)
    assert cfg.tree == load_config(None).tree
    train = cfg.train
    assert (train.lr, train.weight_decay, train.layer_decay, train.batch_size, train.label_smoothing) == (
        5e-4, 0.05, 0.8, 64, 0.1)
    assert cfg.mae("spatial").mask_ratio == 0.9
    assert cfg.vit("spatial").drop_path_rate == 0.1
    assert cfg.mae("spatial").encoder.drop_path_rate == 0.0
    path.write_text("{}")
    assert load_config(path).fingerprint == cfg.fingerprint


def test_alpha_out_of_range_names_key():
    with pytest.raises(ConfigError) as info:
        build_config(overrides=[("fusion.alpha", 1.2)])
    assert info.value.key == "fusion.alpha" and "fusion.alpha" in str(info.value)


@pytest.mark.parametrize("data, key", [
    ({"fusion": {"beta": 1}}, "fusion.beta"),
    ({"nonsense": 1}, "nonsense"),
    ({"train": {"epochs": "ten"}}, "train.epochs"),
    ({"train": {"mixup_enabled": 1}}, "train.mixup_enabled"),
    ({"mae": {"mask_ratio": 1.0}}, "mae.mask_ratio"),
    ({"train": {"lr": -1.0}}, "train.lr"),
    ({"synth": {"kinds": ["glitch"]}}, "synth.kinds"),
    ({"synth": {"height": 16}}, "synth.height"),
    ({"fusion": {"mode": "vote"}}, "fusion.mode"),
    ({"spatial_vit": {"embed_dim": 30}}, "spatial_vit"),
])
def test_rejections_name_the_key(data, key):
    with pytest.raises(ConfigError) as info:
        build_config(data)
    assert info.value.key == key


def test_integer_valued_float_accepted_for_int_fields():
    assert build_config({"train": {"epochs": 3.0}}).train.epochs == 3
    assert build_config({"train": {"lr": 1}}).train.lr == 1.0


def test_overrides_beat_file(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"fusion": {"alpha": 0.3}, "seed": 4}))
    cfg = load_config(path, [("fusion.alpha", 0.7)])
    assert cfg.fusion.alpha == 0.7 and cfg.seed == 4 and cfg.train.seed == 4 and cfg.split.seed == 4


def test_fingerprint_stable_and_sensitive(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"train": {"epochs": 2}}))
    a = load_config(path, [("fusion.alpha", 0.25)])
    b = load_config(path, [("fusion.alpha", 0.25)])
    assert a.fingerprint == b.fingerprint and len(a.fingerprint) == 16
    assert a.fingerprint != load_config(path, [("fusion.alpha", 0.3)]).fingerprint
    assert json.loads(a.to_json())["train"]["epochs"] == 2


def test_bad_files(tmp_path):
    with pytest.raises(ConfigError, match="cannot read"):
        load_config(tmp_path / "missing.json")
    (tmp_path / "bad.json").write_text("{")
    with pytest.raises(ConfigError, match="not valid JSON"):
        load_config(tmp_path / "bad.json")
    (tmp_path / "list.json").write_text("[1]")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "list.json")


def test_parse_value():
    assert parse_value("0.5") == 0.5
    assert parse_value("true") is True
    assert parse_value("[1, 2]") == [1, 2]
    assert parse_value("score") == "score"


def test_section_is_a_copy():
    cfg = build_config()
    cfg.section("fusion")["alpha"] = 0.9
    assert cfg.fusion.alpha == 0.5

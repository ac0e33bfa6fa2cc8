"""Config parsing, validation, serialization round-trips, hashing."""

import dataclasses

import pytest

from catmouse.config import (
    ConfigError,
    GameConfig,
    PRESETS,
    desk_config,
    full_config,
    load_config,
    parse_config,
    save_config,
    serialize_config,
)


def test_empty_text_is_desk_preset():
    assert parse_config("") == desk_config()


def test_presets_differ_where_expected():
    desk, full = desk_config(), full_config()
    assert full.patch_size > desk.patch_size
    assert full.patch_epochs == 150
    assert full.patch_decay_every == 50
    assert full.image_size == 256
    # shared substance: probabilities and the regime grid
    assert full.pi == desk.pi == 0.25
    assert full.eval_resize == desk.eval_resize == 0.5
    assert set(PRESETS) == {"desk", "full"}


def test_parse_overrides_on_top_of_preset():
    text = """
    [game]
    k = 1
    regime = non-successive

    [patch]
    lr = 0.02
    """
    cfg = parse_config(text, preset="desk")
    assert cfg.k == 1
    assert cfg.regime == "non-successive"
    assert cfg.patch_lr == 0.02
    # untouched keys keep preset values
    assert cfg.patch_size == desk_config().patch_size


def test_comments_and_blank_lines_ignored():
    cfg = parse_config("# header\n\n[game]\n# inner\nseed = 5\n")
    assert cfg.seed == 5


@pytest.mark.parametrize(
    "text,fragment",
    [
        ("[nope]\n", "unknown section"),
        ("[game]\nwat = 3\n", "unknown key"),
        ("seed = 3\n", "before any"),
        ("[game]\nseed\n", "expected 'key = value'"),
        ("[game]\nseed = x\n", "expected an integer"),
        ("[patch]\nlr = fast\n", "expected a number"),
        ("[game]\npi = 1.5\n", "pi"),
        ("[game]\nregime = sideways\n", "regime"),
        ("[patch]\nsize = 2\n", "patch size"),
        ("[data]\nimage_size = 9\n", "image_size"),
        ("[detector]\nlr = 0\n", "detector lr"),
    ],
)
def test_parse_errors_carry_context(text, fragment):
    with pytest.raises(ConfigError, match=fragment):
        parse_config(text)


def test_parse_error_reports_line_number():
    with pytest.raises(ConfigError, match="line 3"):
        parse_config("[game]\nseed = 1\nbogus = 2\n")


def test_unknown_preset():
    with pytest.raises(ConfigError, match="preset"):
        parse_config("", preset="galaxy")


def test_cross_field_validation():
    with pytest.raises(ValueError, match="adv_resize_lo"):
        desk_config(adv_resize_lo=0.95, adv_resize_hi=0.9)
    with pytest.raises(ValueError, match="variant"):
        desk_config(variant="imaginary")


def test_serialize_roundtrip_every_field():
    # mutate each field in turn and require parse(serialize(cfg)) == cfg
    base = desk_config()
    mutated = {
        "regime": "non-successive",
        "k": 7,
        "max_order": 2,
        "validation_count": 6,
        "seed": 123,
        "pi": 0.75,
        "patch_size": 16,
        "patch_epochs": 5,
        "patch_lr": 0.025,
        "patch_decay_every": 2,
        "patch_batch": 4,
        "patch_scenes": 12,
        "lambda_obj": 2.0,
        "lambda_smooth": 0.0,
        "lambda_validity": 1.5,
        "detector_epochs": 3,
        "detector_lr": 1e-4,
        "weight_decay": 0.0,
        "detector_batch": 2,
        "detector_scenes": 10,
        "adv_resize_lo": 0.5,
        "adv_resize_hi": 0.95,
        "image_size": 64,
        "eval_scenes": 4,
        "p_box": 1.0,
        "p_hal": 0.0,
        "eval_resize": 0.25,
    }
    for field, value in mutated.items():
        cfg = dataclasses.replace(base, **{field: value})
        again = parse_config(serialize_config(cfg))
        assert again == cfg, field


def test_float_precision_survives_roundtrip():
    cfg = desk_config(patch_lr=0.1 + 0.2)  # 0.30000000000000004
    assert parse_config(serialize_config(cfg)).patch_lr == cfg.patch_lr


def test_save_and_load(tmp_path):
    cfg = desk_config(seed=77, k=1)
    path = tmp_path / "game.cfg"
    save_config(cfg, path)
    assert load_config(path) == cfg


def test_config_hash_tracks_content():
    a = desk_config()
    b = desk_config(seed=1)
    assert a.config_hash() == desk_config().config_hash()
    assert a.config_hash() != b.config_hash()
    assert len(a.config_hash()) == 64
    assert set(a.config_hash()) <= set("0123456789abcdef")


def test_frozen():
    cfg = desk_config()
    with pytest.raises(dataclasses.FrozenInstanceError):
        cfg.seed = 9


def test_paper_regime_flag():
    assert desk_config(k=1).is_paper_regime()
    assert desk_config(k=3).is_paper_regime()
    assert not desk_config(k=2).is_paper_regime()

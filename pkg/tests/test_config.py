"""Config parsing, validation, and canonical serialization."""

import pytest

from statetrack.config import (
    DEFAULTS,
    apply_overrides,
    config_text,
    load_config,
    parse_config,
    validate_config,
)
from statetrack.errors import ConfigurationError


def test_defaults_are_valid():
    cfg = validate_config(dict(DEFAULTS))
    assert cfg["threshold"] == 0.4
    assert cfg["interval"] == 60
    assert cfg["window"] == 500


def test_parse_round_trip():
    cfg = parse_config(config_text(dict(DEFAULTS)))
    assert cfg == DEFAULTS


def test_parse_comments_and_blanks():
    cfg = parse_config("# heading\n\ndim=32  # inline\n  steps = 7 \n")
    assert cfg["dim"] == 32
    assert cfg["steps"] == 7
    assert cfg["heads"] == DEFAULTS["heads"]


def test_parse_bad_line():
    with pytest.raises(ConfigurationError, match="line 2"):
        parse_config("dim=32\njust words\n")


def test_parse_duplicate_key():
    with pytest.raises(ConfigurationError, match="duplicate"):
        parse_config("dim=32\ndim=64\n")


def test_unknown_keys_listed():
    with pytest.raises(ConfigurationError) as err:
        apply_overrides(dict(DEFAULTS), {"zeta": "1", "alpha_rate": "2"})
    assert "alpha_rate" in str(err.value) and "zeta" in str(err.value)


def test_coercion_follows_default_types():
    cfg = apply_overrides(dict(DEFAULTS), {"lr": "1e-3", "steps": "11", "parity": "odd"})
    assert cfg["lr"] == 1e-3 and isinstance(cfg["steps"], int)
    assert cfg["parity"] == "odd"


def test_validation_rejections():
    bad = [
        {"threshold": "1.5"},
        {"interval": "0"},
        {"window": "0"},
        {"parity": "sideways"},
        {"template_size": "63"},
        {"search_size": "64", "template_size": "64"},
        {"dim": "30"},  # not divisible by heads=4
        {"steps": "-1"},
    ]
    for overrides in bad:
        with pytest.raises(ConfigurationError):
            apply_overrides(dict(DEFAULTS), overrides)


def test_zero_steps_allowed():
    cfg = apply_overrides(dict(DEFAULTS), {"steps": "0"})
    assert cfg["steps"] == 0


def test_config_text_sorted_and_terminated():
    text = config_text(dict(DEFAULTS))
    lines = text.splitlines()
    assert text.endswith("\n")
    assert lines == sorted(lines)
    assert all("=" in ln for ln in lines)


def test_load_config_file(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("dim=32\nheads=2\n")
    cfg = load_config(str(p))
    assert (cfg["dim"], cfg["heads"]) == (32, 2)

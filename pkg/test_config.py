#!/usr/bin/env python3
"""Tests for ELASTIQ_* environment settings."""

import pytest

from config import ENV_PREFIX, Settings, get_settings
from errors import ConfigError


@pytest.fixture(autouse=True)
def fresh_settings():
    yield
    get_settings(reload=True)


def test_defaults(monkeypatch):
    for name in ("SEED", "STEPS", "BATCH_SIZE", "PROGRESS", "PERCENTILE"):
        monkeypatch.delenv(ENV_PREFIX + name, raising=False)
    settings = Settings()
    assert settings.steps == 200
    assert settings.batch_size == 32
    assert settings.percentile == pytest.approx(0.999)
    assert settings.progress is True


def test_environment_overrides(monkeypatch):
    monkeypatch.setenv("ELASTIQ_STEPS", "15")
    monkeypatch.setenv("ELASTIQ_PROGRESS", "off")
    monkeypatch.setenv("ELASTIQ_LOG_LEVEL", "debug")
    settings = get_settings(reload=True)
    assert settings.steps == 15
    assert settings.progress is False
    assert settings.log_level == "DEBUG"
    assert get_settings() is settings


@pytest.mark.parametrize(
    "name,value",
    [("STEPS", "many"), ("STEPS", "0"), ("PERCENTILE", "1.5"), ("PROGRESS", "maybe"), ("LR_CLIP", "-1")],
)
def test_invalid_values_raise_config_error(monkeypatch, name, value):
    monkeypatch.setenv(ENV_PREFIX + name, value)
    with pytest.raises(ConfigError):
        Settings()


def test_as_dict_lists_every_field():
    keys = set(Settings().as_dict())
    assert {"seed", "steps", "batch_size", "lr_adapter", "lr_clip", "output_dir"} <= keys

import pytest

from certsteer.config import load_settings
from certsteer.pipeline import config_from_settings


@pytest.fixture(scope="session")
def default_settings():
    return load_settings(env={})


@pytest.fixture(scope="session")
def default_config(default_settings):
    return config_from_settings(default_settings)

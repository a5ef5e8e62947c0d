import pytest

from certsteer.config import DEFAULTS, ConfigError, load_settings
from certsteer.pipeline import config_from_settings


def write(tmp_path, text):
    p = tmp_path / "run.toml"
    p.write_text(text)
    return p


def test_defaults_embed_tables():
    s = load_settings(env={})
    assert s["tables"]["stiffness"]["Snow"] == [20000.0, 40000.0]
    assert s["tables"]["safe_sets"]["Heavy Rain"] == ["Heavy Rain", "Snow"]
    assert s["seed"] == DEFAULTS["seed"]


def test_precedence_flag_env_file_default(tmp_path):
    path = write(tmp_path, "seed = 5\n[smoothing]\nnoise_std = 0.25\n")
    assert load_settings(path, env={})["seed"] == 5
    assert load_settings(path, env={"CERTSTEER_SEED": "9"})["seed"] == 9
    assert load_settings(path, env={"CERTSTEER_SEED": "9"}, overrides={"seed": 11})["seed"] == 11
    s = load_settings(path, env={"CERTSTEER_NOISE_STD": "1.0"}, overrides={"smoothing.noise_std": None})
    assert s["smoothing"]["noise_std"] == 1.0
    assert load_settings(None, env={})["smoothing"]["noise_std"] == 0.5


def test_unknown_key_reports_field(tmp_path):
    path = write(tmp_path, "[smoothing]\nnoise = 0.25\n")
    with pytest.raises(ConfigError, match="smoothing.noise"):
        load_settings(path, env={})


def test_type_errors_name_the_field(tmp_path):
    with pytest.raises(ConfigError, match="smoothing.n"):
        load_settings(write(tmp_path, "[smoothing]\nn = 'many'\n"), env={})
    with pytest.raises(ConfigError, match="CERTSTEER_SEED"):
        load_settings(env={"CERTSTEER_SEED": "abc"})


def test_malformed_toml(tmp_path):
    with pytest.raises(ConfigError, match="line"):
        load_settings(write(tmp_path, "seed = = 1\n"), env={})
    with pytest.raises(ConfigError, match="not found"):
        load_settings(tmp_path / "missing.toml", env={})


@pytest.mark.parametrize("text,msg", [
    ("[smoothing]\nnoise_std = -1.0\n", "noise_std"),
    ("[smoothing]\nn0 = 500\nn = 100\n", "smoothing.n"),
    ("mode = 'FAST'\n", "FAST"),
    ("[design]\nV_min = 30.0\nV_max = 20.0\n", "V_min"),
    ("[tables.safe_sets]\nSnow = ['Snow', 'Mud']\n", "Mud"),
    ("[road]\nsegments = []\n", "segments"),
])
def test_validation(tmp_path, text, msg):
    with pytest.raises(ConfigError, match=msg):
        load_settings(write(tmp_path, text), env={})


def test_custom_tables_reach_the_pipeline(tmp_path):
    text = ("[tables.stiffness]\nSunny = [90000.0, 110000.0]\n'Light Rain' = [60000.0, 80000.0]\n"
            "'Heavy Rain' = [40000.0, 60000.0]\nSnow = [25000.0, 35000.0]\n")
    cfg = config_from_settings(load_settings(write(tmp_path, text), env={}))
    assert cfg.table.rows["Snow"] == (25000.0, 35000.0)


def test_list_flag_coercion():
    s = load_settings(env={}, overrides={"certify.features": "1,2,3", "simulate.interval": "30000,50000"})
    assert s["certify"]["features"] == [1.0, 2.0, 3.0]
    assert s["simulate"]["interval"] == [30000.0, 50000.0]

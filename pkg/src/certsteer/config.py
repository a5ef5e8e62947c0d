"""Run settings: embedded defaults, TOML files, environment and flag overrides."""

from __future__ import annotations

import copy
import os
import sys
from typing import Any, Mapping

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .perception import DEFAULT_SAFE_SETS, DEFAULT_STIFFNESS, Objective

ENV_PREFIX = "CERTSTEER_"


class ConfigError(ValueError):
    pass


DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "mode": "CLASSIFICATION",
    "episode_length": 10.0,
    "lane_half_width": 1.75,
    "instability_cap": 200.0,
    "vehicle": {"m": 1500.0, "I_z": 3000.0, "l_f": 1.2, "l_r": 1.6},
    "smoothing": {"noise_std": 0.5, "n0": 100, "n": 10000, "alpha": 0.001},
    "attack": {"enabled": True, "objective": "STABILITY", "epsilon": 12.0, "steps": 100, "step_size": 0.0},
    "controller": {
        "gamma": 1e4,
        "q_scale": "auto",
        "pole_ratios": [-0.06, -0.07, -0.2, -9.0],
        "dt": 1e-3,
        "blowup_bound": 1e3,
        "initial_state": [0.2, 0.0, 0.0, 0.0],
        "record_every": 10,
    },
    "design": {"V_min": 5.0, "V_max": 40.0, "k_bar": 1e4, "lambda_rho": 0.9, "lambda_gp": 0.0},
    "road": {
        "R_min": 200.0,
        "curvature_rate_bound": 0.0,
        "segments": [
            {"duration": 2.0, "R": 1e9},
            {"duration": 4.0, "R": 250.0},
            {"duration": 4.0, "R": 1e9},
        ],
    },
    "scene": {
        "domain": "weather",
        "dim": 16,
        "separation": 4.0,
        "cluster_std": 0.3,
        "sharpness": 0.05,
        "reg_gain": 10000.0,
        "reg_offset": 70000.0,
        "reg_noise": 0.05,
        "beta_quantile": 0.95,
        "beta_samples": 2000,
    },
    "regression": {"epsilon": 0.0, "beta": -1.0},
    "tables": {
        "stiffness": {k: list(v) for k, v in DEFAULT_STIFFNESS.items()},
        "safe_sets": {k: list(v) for k, v in DEFAULT_SAFE_SETS.items()},
    },
    "experiment": {
        "trials": 20,
        "noise_levels": [0.25, 0.5, 1.0],
        "objectives": ["STABILITY", "EFFICIENCY"],
        "modes": ["CLASSIFICATION", "REGRESSION", "NONROBUST_CLS", "NONROBUST_REG"],
        "workers": 1,
    },
    "certify": {"label": "Snow", "position": -1.0, "features": []},
    "simulate": {"interval": [20000.0, 40000.0], "true_C": 30000.0},
}

# sections whose keys are free-form (tables keyed by label)
_FREE = {("tables", "stiffness"), ("tables", "safe_sets")}

# env var -> dotted path; flags reuse the same paths
ENV_KEYS = {
    "SEED": "seed",
    "MODE": "mode",
    "EPSILON": "attack.epsilon",
    "NOISE_STD": "smoothing.noise_std",
    "WORKERS": "experiment.workers",
    "OUT_DIR": "out_dir",
}


def _coerce(value, default, where: str):
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("1", "true", "yes", "0", "false", "no"):
            return value.lower() in ("1", "true", "yes")
        raise ConfigError(f"{where}: expected boolean, got {value!r}")
    if isinstance(default, int) and not isinstance(default, bool):
        try:
            if isinstance(value, float) and not value.is_integer():
                raise ValueError
            return int(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{where}: expected integer, got {value!r}") from None
    if isinstance(default, float):
        try:
            return float(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{where}: expected number, got {value!r}") from None
    if isinstance(default, str):
        if where.endswith("q_scale") and isinstance(value, (int, float)):
            return float(value)
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected string, got {value!r}")
        return value
    if isinstance(default, list):
        if isinstance(value, str):
            value = [v for v in value.split(",") if v.strip()]
        if not isinstance(value, list):
            raise ConfigError(f"{where}: expected list, got {value!r}")
        if default and not isinstance(default[0], dict):
            return [_coerce(v, default[0], f"{where}[{i}]") for i, v in enumerate(value)]
        if not default:  # untyped numeric list
            return [_coerce(v, 0.0, f"{where}[{i}]") for i, v in enumerate(value)]
        return copy.deepcopy(value)
    return value


def _merge(base: dict, patch: Mapping, path: tuple = ()) -> None:
    for key, val in patch.items():
        where = ".".join(path + (key,))
        if path in _FREE:
            base[key] = copy.deepcopy(val)
            continue
        if key not in base:
            raise ConfigError(f"unknown setting {where!r}")
        cur = base[key]
        if isinstance(cur, dict):
            if not isinstance(val, Mapping):
                raise ConfigError(f"{where}: expected a table")
            if path + (key,) in _FREE:  # per-label rows merge over the embedded table
                base[key].update({k: copy.deepcopy(v) for k, v in val.items()})
            else:
                _merge(cur, val, path + (key,))
        else:
            base[key] = _coerce(val, cur, where)


def _set_path(settings: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    patch: dict = {}
    node = patch
    for k in keys[:-1]:
        node = node.setdefault(k, {})
    node[keys[-1]] = value
    _merge(settings, patch)


def load_file(path) -> dict:
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def load_settings(path=None, env: Mapping[str, str] | None = None, overrides: Mapping[str, Any] | None = None
                  ) -> dict:
    """Resolve settings with precedence flag > env > file > default.

    `overrides` maps dotted paths (e.g. "smoothing.noise_std") to flag values; None entries are skipped.
    """
    settings = copy.deepcopy(DEFAULTS)
    settings["out_dir"] = "out"
    if path is not None:
        data = load_file(path)
        try:
            _merge(settings, data)
        except ConfigError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    env = os.environ if env is None else env
    for suffix, dotted in ENV_KEYS.items():
        raw = env.get(ENV_PREFIX + suffix)
        if raw is not None and raw != "":
            try:
                _set_path(settings, dotted, raw)
            except ConfigError as exc:
                raise ConfigError(f"environment {ENV_PREFIX + suffix}: {exc}") from None
    for dotted, value in (overrides or {}).items():
        if value is not None:
            _set_path(settings, dotted, value)
    validate(settings)
    return settings


def validate(settings: dict) -> None:
    from .pipeline import Mode  # deferred: pipeline pulls in the whole numerical stack

    try:
        Mode(settings["mode"])
        for m in settings["experiment"]["modes"]:
            Mode(m)
        Objective(settings["attack"]["objective"])
        for o in settings["experiment"]["objectives"]:
            Objective(o)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    checks = [
        (settings["smoothing"]["noise_std"] > 0, "smoothing.noise_std must be positive"),
        (settings["smoothing"]["n0"] >= 1, "smoothing.n0 must be >= 1"),
        (settings["smoothing"]["n"] >= settings["smoothing"]["n0"], "smoothing.n must be >= smoothing.n0"),
        (0 < settings["smoothing"]["alpha"] < 1, "smoothing.alpha must lie in (0, 1)"),
        (settings["attack"]["epsilon"] >= 0, "attack.epsilon must be >= 0"),
        (settings["attack"]["steps"] >= 1, "attack.steps must be >= 1"),
        (settings["episode_length"] > 0, "episode_length must be positive"),
        (0 <= settings["design"]["V_min"] <= settings["design"]["V_max"], "design needs 0 <= V_min <= V_max"),
        (settings["design"]["k_bar"] > 0, "design.k_bar must be positive"),
        (settings["controller"]["dt"] > 0, "controller.dt must be positive"),
        (settings["controller"]["gamma"] > 0, "controller.gamma must be positive"),
        (len(settings["controller"]["pole_ratios"]) == 4, "controller.pole_ratios needs 4 entries"),
        (len(settings["controller"]["initial_state"]) == 4, "controller.initial_state needs 4 entries"),
        (settings["experiment"]["trials"] >= 1, "experiment.trials must be >= 1"),
        (settings["experiment"]["workers"] >= 1, "experiment.workers must be >= 1"),
        (settings["scene"]["domain"] in ("weather", "surface"), "scene.domain must be 'weather' or 'surface'"),
        (0 <= int(settings["seed"]) < 2**64, "seed must be a 64-bit unsigned integer"),
    ]
    for ok, msg in checks:
        if not ok:
            raise ConfigError(msg)
    if not settings["road"]["segments"]:
        raise ConfigError("road.segments must not be empty")
    for i, seg in enumerate(settings["road"]["segments"]):
        if "duration" not in seg:
            raise ConfigError(f"road.segments[{i}] missing field 'duration'")
    table = settings["tables"]["stiffness"]
    for lab, members in settings["tables"]["safe_sets"].items():
        if lab not in table:
            raise ConfigError(f"tables.safe_sets: label {lab!r} has no stiffness row")
        for other in members:
            if other not in table:
                raise ConfigError(f"tables.safe_sets.{lab}: unknown label {other!r}")

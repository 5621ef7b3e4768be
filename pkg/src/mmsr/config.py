"""Run configuration: JSON file merged over defaults, unknown keys rejected."""

from __future__ import annotations

import copy
import json
from pathlib import Path

from .model import MMSRRecommender


class ConfigError(ValueError):
    pass


def _model_defaults() -> dict:
    return MMSRRecommender().get_params()


def defaults() -> dict:
    return {
        "out_dir": "runs/default",
        "threads": 0,  # 0 = torch default
        "data": {
            "interactions": None,
            "image_features": None,
            "image_ids": None,
            "text_features": None,
            "text_ids": None,
            "synth": None,
            "min_count": 5,
            "min_len": 5,
            "test_frac": 0.2,
        },
        "quantizer": {
            "latent_dim": None,  # None -> model d
            "ae_epochs": 300,
            "ae_lr": 0.01,
            "kmeans_iters": 100,
            "seed": 0,
        },
        "model": _model_defaults(),
        "eval": {"ks": [5, 20], "dump_gates": False},
        "robust": {"ratios": [0.1, 0.3, 0.5, 0.7], "modes": ["image", "text", "mix"], "seed": 0},
        "ablation": {"seeds": [0, 1, 2]},
        "sweep": {"cs": [10, 20, 40], "ks": [1, 2], "seed": 0},
    }


def _merge(base: dict, user: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in user.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown config key: {where}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{where} must be an object")
            out[key] = _merge(base[key], value, where)
        else:
            out[key] = copy.deepcopy(value)
    return out


def load_config(path: str | Path | None) -> dict:
    cfg = defaults()
    if path is None:
        return cfg
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    with open(p, "r", encoding="utf-8") as fh:
        try:
            user = json.load(fh)
        except json.JSONDecodeError as err:
            raise ConfigError(f"{p}: invalid JSON ({err.msg})") from err
    if not isinstance(user, dict):
        raise ConfigError(f"{p}: top level must be a JSON object")
    return _merge(cfg, user)

"""Experiment configuration: a JSON document with a fixed set of sections.

Every key is addressed as ``section.key`` (``seed`` and ``output_dir`` live at
the top level).  Unknown keys are errors.  The config hash covers everything
except ``output_dir``, so reruns into a different directory produce
identical artifacts.
"""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path

DEFAULTS = {
    "seed": 7,
    "output_dir": "runs/default",
    "oracle": {
        "weights": [0.5, 0.5],
        "means": [[-1.5, 0.0], [1.5, 0.0]],
        "scales": [0.5, 0.5],
    },
    "verify": {
        "n_mc": 100_000,
        "t_grid": [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9],
        "tolerance_sigmas": 3.0,
        "theorem2_t": 0.5,
        "a4_s": 0.0,
        "a4_t": 0.7,
        "theorem3_s": 0.2,
        "theorem3_t": 0.9,
        "theorem3_quad_steps": 1000,
        "theorem3_rtol": 1e-2,
        "gradcheck_rtol": 1e-5,
        "gradcheck_seeds": 5,
    },
    "env": {
        "horizon": 8,
        "max_step": 0.1,
        "budget": 40,
        "success_radius": 0.05,
        "fixed_length": True,
        "jitter": 0.05,
        "n_train": 4000,
        "n_heldout": 500,
    },
    "net": {
        "hidden": 64,
        "time_embed": 16,
        "context_embed": 16,
        "n_freq": 4,
    },
    "pretrain": {
        "lr_peak": 2e-3,
        "warmup_steps": 200,
        "total_steps": 6000,
        "grad_clip_norm": 1.0,
        "batch_size": 64,
        "weight_decay": 0.0,
        "log_every": 50,
    },
    "distill": {
        "alpha": 0.5,
        "lam": 0.1,
        "lr_peak": 1e-3,
        "warmup_steps": 500,
        "total_steps": 30_000,
        "grad_clip_norm": 1.0,
        "clamp": [-20.0, 20.0],
        "batch_size": 64,
        "weight_decay": 0.0,
        "log_every": 50,
    },
    "eval": {
        "k_grid": [1, 2, 3, 4, 5, 10],
        "n_noise": 1,
        "nact_grid": [1, 2, 4, 8],
        "episodes": 50,
        "teacher_k": 10,
        "timing": True,
    },
}


class ConfigError(ValueError):
    pass


def _merge(base: dict, override: dict, path: str = "") -> None:
    for key, val in override.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key '{where}'")
        if isinstance(base[key], dict):
            if not isinstance(val, dict):
                raise ConfigError(f"config key '{where}' must be a section")
            _merge(base[key], val, where + ".")
        else:
            if isinstance(val, dict):
                raise ConfigError(f"config key '{where}' must be a value, not a section")
            _check_type(base[key], val, where)
            if isinstance(base[key], int) and not isinstance(base[key], bool):
                val = int(val)
            base[key] = val


def _check_type(default, val, where: str) -> None:
    if isinstance(default, bool):
        ok = isinstance(val, bool)
    elif isinstance(default, (int, float)):
        ok = isinstance(val, (int, float)) and not isinstance(val, bool)
        if ok and isinstance(default, int) and not isinstance(val, int):
            ok = float(val).is_integer()
    elif isinstance(default, list):
        ok = isinstance(val, list)
    else:
        ok = isinstance(val, type(default))
    if not ok:
        raise ConfigError(f"config key '{where}' expects {type(default).__name__}, got {val!r}")


def resolve(override: dict | None = None) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if override:
        _merge(cfg, override)
    return cfg


def load(path) -> dict:
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config root must be an object")
    return resolve(raw)


def config_hash(cfg: dict) -> str:
    body = {k: v for k, v in cfg.items() if k != "output_dir"}
    blob = json.dumps(body, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def flat_keys(cfg: dict = DEFAULTS, prefix: str = "") -> list:
    out = []
    for k, v in cfg.items():
        if isinstance(v, dict):
            out.extend(flat_keys(v, f"{prefix}{k}."))
        else:
            out.append(f"{prefix}{k}")
    return out

"""``key = value`` config files with namespaced keys and typed defaults.

Precedence is CLI flags > config file > defaults.
"""
from __future__ import annotations

from pathlib import Path

MODES = ("M", "MS", "MSA")

DEFAULTS: dict[str, object] = {
    "mode": "MSA",
    "train.lam": 0.5,
    "train.batch_size": 32,
    "train.epochs": 10,
    "train.learning_rate": 3e-4,
    "train.weight_decay": 0.01,
    "train.seed": 0,
    "train.grad_clip_norm": 1.0,
    "train.duplicate_policy": "mask",
    "train.fixed_scale": False,
    "vision.image_size": 64,
    "vision.patch_size": 8,
    "vision.depth": 3,
    "vision.width": 64,
    "vision.heads": 4,
    "vision.embed_dim": 64,
    "text.depth": 3,
    "text.width": 64,
    "text.heads": 4,
    "augment.translate_frac": 0.0625,
    "augment.rotate_max": 20.0,
}


class ConfigError(ValueError):
    pass


def parse_config(text: str) -> dict[str, str]:
    out = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"config line {n}: expected 'key = value', got {raw!r}")
        out[key.strip()] = value.strip()
    return out


def dump_config(cfg: dict) -> str:
    return "".join(f"{k} = {_to_text(cfg[k])}\n" for k in sorted(cfg))


def _to_text(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def _coerce(key: str, value):
    default = DEFAULTS.get(key)
    if default is None or not isinstance(value, str):
        return value
    try:
        if isinstance(default, bool):
            if value.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(value)
            return value.lower() in ("true", "1", "yes")
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
    except ValueError:
        raise ConfigError(f"{key}: cannot read {value!r} as {type(default).__name__}") from None
    return value


def resolve_config(overrides: dict | None = None, path: str | Path | None = None) -> dict:
    cfg = dict(DEFAULTS)
    if path is not None:
        for k, v in parse_config(Path(path).read_text(encoding="utf-8")).items():
            if k not in DEFAULTS:
                raise ConfigError(f"unknown config key {k!r}")
            cfg[k] = _coerce(k, v)
    for k, v in (overrides or {}).items():
        if v is not None:
            cfg[k] = _coerce(k, v)
    if cfg["mode"] not in MODES:
        raise ConfigError(f"mode must be one of {MODES}, got {cfg['mode']!r}")
    return cfg


def mode_flags(mode: str) -> dict[str, bool]:
    """What each ablation rung changes: station wording in captions, then augmentation."""
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}, got {mode!r}")
    return {"stations": mode in ("MS", "MSA"), "augment": mode == "MSA"}

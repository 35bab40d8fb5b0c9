"""YAML experiment configuration with strict schema validation.

Every key has a documented default (see README); unknown keys are rejected
so typos cannot silently change an experiment. Command-line overrides are
applied after the file is read, then the whole mapping is validated once.
"""

from __future__ import annotations

import yaml

from .network import NetworkSpec
from .train import TrainConfig


class ConfigError(ValueError):
    pass


def _bool(v):
    if isinstance(v, bool):
        return v
    if isinstance(v, str) and v.lower() in ("true", "false", "1", "0", "yes", "no"):
        return v.lower() in ("true", "1", "yes")
    raise ConfigError(f"expected a boolean, got {v!r}")


# key -> (caster, default); None default means required for training commands
SCHEMA = {
    "channels": (int, 16),
    "blocks": (int, 8),
    "target_blocks": (int, 0),  # 0 -> blocks // 2
    "upscale": (int, 2),
    "w_bits": (int, 4),
    "a_bits": (int, 4),
    "rbd": (_bool, True),
    "qsa": (_bool, True),
    "sfd": (_bool, True),
    "total_iters": (int, 2000),
    "teacher_iters": (int, 0),  # 0 -> total_iters
    "batch_size": (int, 4),
    "patch_size": (int, 16),
    "lr_init": (float, 2e-4),
    "lr_halve_frac": (float, 250.0 / 300.0),
    "lambda_sfd": (float, 1e-4),
    "seed": (int, 0),
    "eval_interval": (int, 0),  # 0 -> derived from the slimming cap
    "shave": (int, 0),  # 0 -> upscale
    "report_input": (int, 256),
    "train_hr_dir": (str, ""),
    "val_hr_dir": (str, ""),
    "out_dir": (str, "runs/default"),
}


def load_config(path=None, overrides=None):
    """Read YAML (optional), apply key=value overrides, validate, fill defaults."""
    raw = {}
    if path is not None:
        try:
            with open(path) as f:
                loaded = yaml.safe_load(f)
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        except yaml.YAMLError as e:
            raise ConfigError(f"invalid YAML in {path}: {e}") from e
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"config root must be a mapping, got {type(loaded).__name__}")
        raw.update(loaded)
    for k, v in (overrides or {}).items():
        raw[k] = v
    unknown = sorted(set(raw) - set(SCHEMA))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    cfg = {}
    for key, (cast, default) in SCHEMA.items():
        if key in raw:
            try:
                cfg[key] = cast(raw[key])
            except (TypeError, ValueError) as e:
                raise ConfigError(f"config key {key}: {e}") from e
        else:
            cfg[key] = default
    return cfg


def to_train_config(cfg) -> TrainConfig:
    try:
        spec = NetworkSpec(cfg["channels"], cfg["blocks"], cfg["upscale"],
                           cfg["w_bits"], cfg["a_bits"])
        return TrainConfig(
            spec=spec,
            total_iters=cfg["total_iters"],
            batch_size=cfg["batch_size"],
            patch_size=cfg["patch_size"],
            lr_init=cfg["lr_init"],
            lr_halve_frac=cfg["lr_halve_frac"],
            lam=cfg["lambda_sfd"] if cfg["sfd"] else 0.0,
            seed=cfg["seed"],
            eval_interval=cfg["eval_interval"],
            target_blocks=cfg["target_blocks"],
            rbd=cfg["rbd"],
            qsa=cfg["qsa"],
            sfd=cfg["sfd"],
        )
    except ValueError as e:
        raise ConfigError(str(e)) from e

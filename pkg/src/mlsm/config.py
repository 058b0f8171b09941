"""Flat dotted-key run configuration (YAML file + command-line overrides)."""

from pathlib import Path

import yaml

DEFAULTS = {
    "data.root": None,
    "data.split_seed": 0,
    "data.image_size": 84,
    "data.split_fractions": [0.5, 0.25, 0.25],
    "localizer.steps": 2000,
    "localizer.batch_size": 64,
    "localizer.lr": 0.001,
    "localizer.threshold": 0.2,
    "model.dim": 64,
    "model.hidden": 64,
    "model.share_encoder": True,
    "train.ablation": "I+G+O",
    "train.c_way": 5,
    "train.k_shot": 1,
    "train.n_query": 75,
    "train.max_episodes": 500000,
    "train.lr0": 0.001,
    "train.lr_half_period": 100000,
    "train.loss": "mse",
    "train.eval_interval": 1000,
    "train.val_episodes": 100,
    "train.val_n_query": 75,
    "train.checkpoint_interval": 1000,
    "train.strict_crops": True,
    "eval.split": "novel",
    "eval.n_episodes": 100,
    "eval.c_way": 5,
    "eval.k_shot": 1,
    "eval.n_query": 200,
    "seed": 0,
    "workers": 1,
    "deterministic": False,
}


class ConfigError(ValueError):
    pass


def _flatten(tree, prefix=""):
    flat = {}
    for key, value in tree.items():
        name = f"{prefix}{key}"
        if isinstance(value, dict):
            flat.update(_flatten(value, name + "."))
        else:
            flat[name] = value
    return flat


def load_config(path=None, overrides=None) -> dict:
    """Defaults, then the file (flat dotted keys or nested mappings), then overrides."""
    cfg = dict(DEFAULTS)
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        raw = yaml.safe_load(path.read_text()) or {}
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: expected a mapping of dotted keys")
        cfg.update(_check_keys(_flatten(raw), path))
    for key, value in (overrides or {}).items():
        if value is not None:
            cfg[key] = value
    _check_keys(cfg, "resolved config")
    return cfg


def _check_keys(values, where):
    unknown = sorted(set(values) - set(DEFAULTS))
    if unknown:
        raise ConfigError(f"{where}: unknown config keys {unknown}")
    return values


def dump_config(cfg: dict) -> str:
    return yaml.safe_dump(dict(sorted(cfg.items())), default_flow_style=None, sort_keys=False)


def train_config_values(cfg: dict) -> dict:
    """Keys of :class:`mlsm.engine.TrainConfig` drawn from a resolved config."""
    return {
        "c_way": cfg["train.c_way"],
        "k_shot": cfg["train.k_shot"],
        "n_query_train": cfg["train.n_query"],
        "max_episodes": cfg["train.max_episodes"],
        "lr0": float(cfg["train.lr0"]),
        "lr_half_period": cfg["train.lr_half_period"],
        "seed": cfg["seed"],
        "ablation_mode": cfg["train.ablation"],
        "loss": cfg["train.loss"],
        "dim": cfg["model.dim"],
        "hidden": cfg["model.hidden"],
        "share_encoder": cfg["model.share_encoder"],
        "eval_interval": cfg["train.eval_interval"],
        "val_episodes": cfg["train.val_episodes"],
        "val_n_query": cfg["train.val_n_query"],
        "checkpoint_interval": cfg["train.checkpoint_interval"],
        "strict_crops": cfg["train.strict_crops"],
        "deterministic": cfg["deterministic"],
    }

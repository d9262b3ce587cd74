"""Run configuration: defaults < YAML file < command-line overrides."""
from __future__ import annotations

import copy
import dataclasses

import yaml

from .attention import AttentionConfig
from .decoder import DecoderConfig
from .evaluation import EvalConfig
from .matching import LossWeights
from .training import TrainConfig, config_to_dict, train_to_dict


class ConfigError(ValueError):
    def __init__(self, path: str, msg: str):
        super().__init__(f"{path}: {msg}" if path else msg)
        self.path = path


def default_config() -> dict:
    return {
        "seed": 0,
        "model": config_to_dict(DecoderConfig()),
        "train": {k: v for k, v in train_to_dict(TrainConfig()).items() if k != "seed"},
        "eval": dataclasses.asdict(EvalConfig()),
        "data": {"train": None, "test": None, "eval_limit": None},
    }


def _merge(base: dict, over: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        key = f"{path}.{k}" if path else str(k)
        if k not in base:
            raise ConfigError(key, "unknown key")
        if isinstance(base[k], dict):
            if not isinstance(v, dict):
                raise ConfigError(key, "expected a mapping")
            out[k] = _merge(base[k], v, key)
        else:
            out[k] = v
    return out


def set_path(cfg: dict, dotted: str, value) -> None:
    node = cfg
    parts = dotted.split(".")
    for i, p in enumerate(parts[:-1]):
        if p not in node or not isinstance(node[p], dict):
            raise ConfigError(".".join(parts[:i + 1]), "unknown section")
        node = node[p]
    if parts[-1] not in node:
        raise ConfigError(dotted, "unknown key")
    node[parts[-1]] = value


def build_config(path: str | None = None, overrides: dict | None = None) -> dict:
    """Merged and validated config dictionary."""
    cfg = default_config()
    if path:
        try:
            with open(path, encoding="utf-8") as f:
                doc = yaml.safe_load(f) or {}
        except OSError as e:
            raise ConfigError("", f"cannot read config {path!r}: {e}") from e
        except yaml.YAMLError as e:
            raise ConfigError("", f"invalid YAML in {path!r}: {e}") from e
        if not isinstance(doc, dict):
            raise ConfigError("", "config root must be a mapping")
        cfg = _merge(cfg, doc)
    for k, v in (overrides or {}).items():
        if v is not None:
            set_path(cfg, k, v)
    validate(cfg)
    return cfg


def _section(cls, d: dict, path: str):
    try:
        return cls(**d)
    except (TypeError, ValueError) as e:
        raise ConfigError(path, str(e)) from e


def validate(cfg: dict) -> None:
    model_cfg(cfg)
    train_cfg(cfg)
    eval_cfg(cfg)
    if not isinstance(cfg["seed"], int):
        raise ConfigError("seed", "must be an integer")


def model_cfg(cfg: dict) -> DecoderConfig:
    m = dict(cfg["model"])
    m["attention"] = _section(AttentionConfig, m.get("attention") or {}, "model.attention")
    return _section(DecoderConfig, m, "model")


def train_cfg(cfg: dict) -> TrainConfig:
    t = dict(cfg["train"])
    t["weights"] = _section(LossWeights, t.get("weights") or {}, "train.weights")
    return _section(TrainConfig, t, "train")


def eval_cfg(cfg: dict) -> EvalConfig:
    return _section(EvalConfig, cfg["eval"], "eval")


def dump(cfg: dict) -> str:
    return yaml.safe_dump(cfg, sort_keys=True, default_flow_style=False)

"""Flat dotted-key configuration with a declarative text-file format.

A config file is line-oriented ``key = value`` pairs; ``#`` starts a
comment. Values are coerced to the type of the built-in default. CLI
``--set key=value`` overrides win over the file, which wins over
defaults.
"""

from __future__ import annotations

import hashlib
from typing import Mapping, Optional

from .errors import ConfigError

DEFAULTS: dict[str, object] = {
    # dataset generation / location
    "data.dir": "data",
    "data.seed": 0,
    "data.num_concepts": 50,
    "data.signature_groups": 0,
    "data.template_groups": 0,
    "data.num_items": 1000,
    "data.num_users": 500,
    "data.num_interactions": 20000,
    "data.text_corruption_rate": 0.3,
    "data.image_corruption_rate": 0.3,
    "data.split_fraction": 0.75,
    "data.holdout_items": 8,
    "data.pos_fraction": 0.2,
    "data.preference_gain": 4.0,
    "data.preference_noise": 0.3,
    "data.popularity_spread": 0.0,
    # model dimensions
    "model.d_model": 16,
    "model.num_heads": 8,
    "model.num_blocks": 1,
    "model.ffn_hidden": 0,
    "model.max_text_len": 50,
    "model.max_patch_len": 9,
    "model.max_behavior": 2,
    "model.patch_grid": 3,
    # mixture of experts
    "moe.num_experts": 4,
    "moe.top_k": 2,
    "moe.expert_kind": "transformer",
    "moe.gating_mode": "conventional",
    # tasks
    "tasks.lambda_ita": 1.0,
    "tasks.lambda_tia": 1.0,
    "tasks.lambda_cvr": 1.0,
    "tasks.negative_ratio": 1.0,
    "tasks.cvr_head": "mean_pool",
    "tasks.cvr_min_history": 0,
    # training
    "train.seed": 0,
    "train.lr": 4e-4,
    "train.beta1": 0.95,
    "train.beta2": 0.999,
    "train.weight_decay": 1e-4,
    "train.coupled_weight_decay": False,
    "train.batch_size": 32,
    "train.epochs": 20,
    "train.patience": 3,
    "train.steps_per_epoch": 30,
    "train.val_fraction": 0.1,
    # evaluation
    "eval.max_examples": 1000,
    "eval.val_max_examples": 500,
    "eval.negative_ratio": 1.0,
    # outputs / ablation
    "out.dir": "runs/default",
    "ablate.seeds": "0,1,2",
}


def _coerce(key: str, raw: str, default) -> object:
    try:
        if isinstance(default, bool):
            low = raw.strip().lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw.strip()
    except ValueError:
        raise ConfigError(f"bad value for {key!r}: {raw!r}")


class Config:
    """Immutable-ish view over defaults + file + overrides."""

    def __init__(self, values: Optional[Mapping[str, object]] = None):
        self._values = dict(DEFAULTS)
        if values:
            for k, v in values.items():
                self._check_key(k)
                self._values[k] = v

    @staticmethod
    def _check_key(key: str):
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key {key!r}")

    def get(self, key: str):
        self._check_key(key)
        return self._values[key]

    def __getitem__(self, key: str):
        return self.get(key)

    def with_overrides(self, overrides: Mapping[str, object]) -> "Config":
        merged = dict(self._values)
        for k, v in overrides.items():
            self._check_key(k)
            merged[k] = v
        return Config(merged)

    def set_from_strings(self, pairs) -> "Config":
        """Apply ``key=value`` strings (CLI --set)."""
        overrides = {}
        for pair in pairs:
            if "=" not in pair:
                raise ConfigError(f"--set expects key=value, got {pair!r}")
            key, raw = pair.split("=", 1)
            key = key.strip()
            self._check_key(key)
            overrides[key] = _coerce(key, raw, DEFAULTS[key])
        return self.with_overrides(overrides)

    def as_dict(self) -> dict[str, object]:
        return dict(self._values)

    def hash(self) -> str:
        text = "\n".join(f"{k}={self._values[k]!r}" for k in sorted(self._values))
        return hashlib.sha256(text.encode()).hexdigest()[:16]


def load_config_file(path) -> Config:
    values = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
            key, raw = line.split("=", 1)
            key = key.strip()
            if key not in DEFAULTS:
                raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
            values[key] = _coerce(key, raw, DEFAULTS[key])
    return Config(values)

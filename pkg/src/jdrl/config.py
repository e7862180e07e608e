"""Training configuration: defaults, YAML loading, and the run hash."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional

import yaml

from .errors import ConfigurationError
from .kernels import NORMALIZATION_MODES

ABLATIONS = ("no_deform", "no_cycle", "no_mask", "no_reblur", "no_isotropic", "no_wpn")
DETERMINISTIC_ENV = "JDRL_DETERMINISTIC"

# keys that do not change what a run computes; left out of the hash so a run
# can be resumed with a longer schedule or a new output location
_UNHASHED = {"epochs", "out_dir", "checkpoint_every", "data_root", "deterministic", "log_every"}

# config-file spellings that are Python keywords
_ALIASES = {"lambda": "lam"}


@dataclass
class TrainingConfig:
    alpha: float = 0.5
    lam: float = 0.35
    m: int = 8
    epsilon: float = 1e-3
    init_epochs: int = 15
    epochs: int = 100
    lr: float = 2e-5
    lr_halve_every: int = 60
    batch_size: int = 2
    grad_accum: int = 1
    patch_size: int = 512
    seed: int = 0
    model: str = "unet"
    estimator: str = "pyramid_lk"
    normalization: str = "softmax_all"
    reblur_reduction: str = "mean"
    no_deform: bool = False
    no_cycle: bool = False
    no_mask: bool = False
    no_reblur: bool = False
    no_isotropic: bool = False
    no_wpn: bool = False
    unet_base: int = 64
    unet_depth: int = 4
    dropout: float = 0.4
    body_width: int = 64
    body_blocks: int = 3
    data_root: Optional[str] = None
    split: str = "train"
    out_dir: str = "runs/jdrl"
    checkpoint_every: int = 10
    log_every: int = 0
    deterministic: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self) -> "TrainingConfig":
        positive = ("epsilon", "epochs", "lr", "lr_halve_every", "batch_size", "grad_accum", "patch_size",
                    "unet_base", "unet_depth", "body_width", "checkpoint_every")
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"{name} must be positive, got {getattr(self, name)}")
        if self.alpha < 0:
            raise ConfigurationError(f"alpha must be >= 0, got {self.alpha}")
        if not 0 < self.lam < 1:
            raise ConfigurationError(f"lambda must lie in (0, 1), got {self.lam}")
        if self.m < 2:
            raise ConfigurationError(f"m must be >= 2, got {self.m}")
        if self.init_epochs < 0:
            raise ConfigurationError(f"init_epochs must be >= 0, got {self.init_epochs}")
        if self.normalization not in NORMALIZATION_MODES:
            raise ConfigurationError(f"normalization must be one of {NORMALIZATION_MODES}")
        if self.reblur_reduction not in ("mean", "global"):
            raise ConfigurationError("reblur_reduction must be 'mean' or 'global'")
        if not 0 <= self.dropout < 1:
            raise ConfigurationError(f"dropout must lie in [0, 1), got {self.dropout}")
        return self

    def replace(self, **changes) -> "TrainingConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def config_hash(self) -> str:
        payload = {k: v for k, v in self.to_dict().items() if k not in _UNHASHED}
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]

    @property
    def deterministic_mode(self) -> bool:
        return self.deterministic or os.environ.get(DETERMINISTIC_ENV, "").lower() in ("1", "true", "yes")

    @classmethod
    def from_dict(cls, data: dict) -> "TrainingConfig":
        known = {f.name for f in fields(cls)}
        kwargs = {}
        for key, value in data.items():
            key = _ALIASES.get(key, key.replace("-", "_"))
            if key == "ablations":
                items = value.items() if isinstance(value, dict) else ((v, True) for v in value)
                for flag, on in items:
                    if flag not in ABLATIONS:
                        raise ConfigurationError(f"unknown ablation {flag!r}")
                    kwargs[flag] = bool(on)
                continue
            if key not in known:
                raise ConfigurationError(f"unknown config key {key!r}")
            kwargs[key] = value
        return cls(**kwargs)

    @classmethod
    def from_file(cls, path) -> "TrainingConfig":
        with open(path) as fh:
            data = yaml.safe_load(fh) or {}
        if not isinstance(data, dict):
            raise ConfigurationError(f"{path}: expected a mapping at top level")
        return cls.from_dict(data)

    def to_file(self, path) -> None:
        data = self.to_dict()
        data["lambda"] = data.pop("lam")
        Path(path).write_text(yaml.safe_dump(data, sort_keys=True))


def lr_schedule(epoch: int, config: TrainingConfig) -> float:
    """Initial rate halved at every multiple of ``lr_halve_every`` epochs."""
    return config.lr * 0.5 ** (epoch // config.lr_halve_every)


def flow_source_policy(epoch: int, init_epochs: int) -> str:
    """Which image the ground truth is registered against this epoch.

    ``"blurry"`` during the first ``init_epochs`` epochs, while the
    prediction is still too poor to register against; ``"deblurred"`` after.
    """
    return "blurry" if epoch < init_epochs else "deblurred"

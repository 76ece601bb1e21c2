"""Flat ``key = value`` run configuration."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass

from .errors import ConfigError
from .inference import ExitPolicy
from .loss import LossConfig
from .model import PAPER_CHANNELS, ModelConfig
from .train import TrainConfig


@dataclass(frozen=True)
class RunConfig:
    # training
    epochs: int = 50
    lr0: float = 0.001
    step: int = 15
    gamma: float = 0.5
    batch: int = 32
    seed: int = 0
    precision: str = "float32"
    checkpoint_every: int = 0
    eval_every: int = 1
    # loss
    alpha: float = 0.3
    detach: bool = True
    eps: float = 1e-8
    # exit policy
    tau: float = 0.9
    early_exit: bool = True
    # model
    image: int = 64
    classes: int = 9
    channels: str = ",".join(map(str, PAPER_CHANNELS))
    final_pool: int = 4
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5
    # paths
    data: str = ""
    out_dir: str = ""

    def __post_init__(self):
        # building the component configs runs their validation
        self.model_config()
        self.train_config()
        self.loss_config()
        self.exit_policy()
        if not 0 <= self.bn_momentum <= 1:
            raise ConfigError("bn_momentum", f"must lie in [0, 1], got {self.bn_momentum}")
        if self.bn_eps <= 0:
            raise ConfigError("bn_eps", f"must be > 0, got {self.bn_eps}")
        if self.eval_every < 0:
            raise ConfigError("eval_every", f"must be >= 0, got {self.eval_every}")
        if self.checkpoint_every < 0:
            raise ConfigError("checkpoint_every", f"must be >= 0, got {self.checkpoint_every}")

    def model_config(self) -> ModelConfig:
        try:
            channels = tuple(int(c) for c in self.channels.split(","))
        except ValueError:
            raise ConfigError("channels", f"expected comma-separated integers, got {self.channels!r}") from None
        return ModelConfig(image_size=self.image, num_classes=self.classes, channels=channels,
                           final_pool=self.final_pool, bn_momentum=self.bn_momentum, bn_eps=self.bn_eps)

    def train_config(self) -> TrainConfig:
        return TrainConfig(epochs=self.epochs, lr0=self.lr0, step_size=self.step, gamma=self.gamma,
                           batch_size=self.batch, seed=self.seed, alpha=self.alpha,
                           detach_final_attention=self.detach, precision=self.precision)

    def loss_config(self) -> LossConfig:
        return LossConfig(alpha=self.alpha, detach_final_attention=self.detach, eps=self.eps)

    def exit_policy(self) -> ExitPolicy:
        return ExitPolicy(threshold=self.tau, enabled=self.early_exit)


_BOOLS = {"true": True, "yes": True, "1": True, "false": False, "no": False, "0": False}


def _convert(key: str, raw: str, kind: type):
    if kind is bool:
        if raw.lower() not in _BOOLS:
            raise ConfigError(key, f"expected a boolean, got {raw!r}")
        return _BOOLS[raw.lower()]
    if kind is int:
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(key, f"expected an integer, got {raw!r}") from None
    if kind is float:
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(key, f"expected a number, got {raw!r}") from None
    return raw


def parse_config(text: str, **overrides) -> RunConfig:
    kinds = {f.name: type(f.default) for f in dataclasses.fields(RunConfig)}
    values: dict = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}", f"expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in kinds:
            raise ConfigError(key, "unknown key")
        values[key] = _convert(key, raw, kinds[key])
    for key, value in overrides.items():
        if key not in kinds:
            raise ConfigError(key, "unknown key")
        values[key] = value
    return RunConfig(**values)


def load_config(path: str | os.PathLike | None = None, **overrides) -> RunConfig:
    """Read a config file; an empty or absent file yields the defaults."""
    text = ""
    if path is not None:
        with open(path) as fh:
            text = fh.read()
    return parse_config(text, **overrides)

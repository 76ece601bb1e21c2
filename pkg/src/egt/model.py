"""Five-exit convolutional network with a spatial attention gate at every exit.

Block i (1..4): conv3x3 -> batchnorm -> relu -> maxpool 2x2.
Block 5:        conv3x3 -> batchnorm -> relu -> adaptive average pool.

Exit i takes the block output F_i, computes A_i = sigmoid(conv1x1(F_i)),
gates G_i = F_i * A_i and classifies linear(global_avgpool(G_i)).
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from . import container
from . import nn
from . import tensor as T
from .errors import ConfigError, ContractError, ShapeError
from .tensor import Kaiming, Tensor, tensor_new

NUM_EXITS = 5
PAPER_CHANNELS = (64, 128, 256, 512, 512)


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 64
    num_classes: int = 9
    in_channels: int = 3
    channels: tuple[int, ...] = PAPER_CHANNELS
    # block-5 pooling target, clipped to the spatial size reaching block 5
    final_pool: int = 4
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if self.num_classes < 2:
            raise ConfigError("classes", f"need at least 2 classes, got {self.num_classes}")
        if self.image_size < 32:
            raise ConfigError("image", f"image size must be >= 32, got {self.image_size}")
        if len(self.channels) != NUM_EXITS or min(self.channels) < 1:
            raise ConfigError("channels", f"need {NUM_EXITS} positive widths, got {self.channels}")
        if self.final_pool < 1:
            raise ConfigError("final_pool", f"must be >= 1, got {self.final_pool}")

    def spatial_sizes(self) -> list[int]:
        """Side length of the feature map leaving each block."""
        sizes, s = [], self.image_size
        for _ in range(NUM_EXITS - 1):
            s = nn.conv_output_size(s, 2, 2, 0)
            sizes.append(s)
        sizes.append(min(self.final_pool, s))
        return sizes


@dataclass
class Block:
    conv: nn.Conv2dParams
    bn: nn.BatchNormParams


@dataclass
class ExitBundle:
    logits: list[Tensor]
    attention: list[Tensor]


@dataclass
class ExitOutput:
    index: int
    logits: Tensor
    attention: Tensor
    macs: int  # cumulative multiply-accumulates up to and including this exit


@dataclass
class EGTModel:
    config: ModelConfig
    blocks: list[Block]
    attention: list[nn.Conv2dParams]
    heads: list[tuple[Tensor, Tensor]]
    meta: dict[str, float] = field(default_factory=dict)

    # -- construction ------------------------------------------------------
    @classmethod
    def create(cls, config: ModelConfig = ModelConfig(), seed: int = 0, dtype=None) -> EGTModel:
        dtype = dtype or T.get_default_dtype()
        counter = iter(range(10_000))

        def init(shape, fan_in):
            sub = int(np.random.SeedSequence([seed, next(counter)]).generate_state(1)[0])
            return tensor_new(shape, Kaiming(fan_in), sub, dtype=dtype, requires_grad=True)

        def zeros(shape):
            return tensor_new(shape, 0.0, dtype=dtype, requires_grad=True)

        blocks, attention, heads = [], [], []
        c_in = config.in_channels
        for c in config.channels:
            conv = nn.Conv2dParams(init((c, c_in, 3, 3), c_in * 9), zeros((c,)), stride=1, padding=1)
            bn = nn.BatchNormParams.create(c, dtype, config.bn_momentum, config.bn_eps)
            blocks.append(Block(conv, bn))
            attention.append(nn.Conv2dParams(init((1, c, 1, 1), c), zeros((1,))))
            heads.append((init((config.num_classes, c), c), zeros((config.num_classes,))))
            c_in = c
        return cls(config, blocks, attention, heads)

    @property
    def dtype(self):
        return self.blocks[0].conv.weight.dtype

    def named_parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for i in range(NUM_EXITS):
            b = self.blocks[i]
            out[f"block{i + 1}.conv.weight"] = b.conv.weight
            out[f"block{i + 1}.conv.bias"] = b.conv.bias
            out[f"block{i + 1}.bn.gamma"] = b.bn.gamma
            out[f"block{i + 1}.bn.beta"] = b.bn.beta
            out[f"attn{i + 1}.weight"] = self.attention[i].weight
            out[f"attn{i + 1}.bias"] = self.attention[i].bias
            out[f"head{i + 1}.weight"] = self.heads[i][0]
            out[f"head{i + 1}.bias"] = self.heads[i][1]
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def state(self) -> dict[str, np.ndarray]:
        """Every tensor needed to restore the model, in checkpoint order."""
        out = {name: p.data for name, p in self.named_parameters().items()}
        for i, b in enumerate(self.blocks):
            out[f"block{i + 1}.bn.running_mean"] = b.bn.running_mean
            out[f"block{i + 1}.bn.running_var"] = b.bn.running_var
        cfg = self.config
        out["meta.image_size"] = np.array([cfg.image_size], dtype=np.float32)
        out["meta.final_pool"] = np.array([cfg.final_pool], dtype=np.float32)
        out["meta.bn_momentum"] = np.array([cfg.bn_momentum], dtype=np.float32)
        out["meta.bn_eps"] = np.array([cfg.bn_eps], dtype=np.float32)
        for key, value in self.meta.items():
            out[f"meta.{key}"] = np.array([value], dtype=np.float32)
        return out

    def _set_mode(self, mode: str) -> None:
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        for b in self.blocks:
            b.bn.mode = mode

    # -- execution ---------------------------------------------------------
    def _check_input(self, x: Tensor) -> None:
        s = self.config.image_size
        if x.ndim != 4 or x.shape[1:] != (self.config.in_channels, s, s):
            raise ShapeError(f"expected input [N, {self.config.in_channels}, {s}, {s}], got {x.shape}")

    def _block(self, i: int, h: Tensor) -> Tensor:
        b = self.blocks[i]
        h = T.relu(nn.batchnorm2d(nn.conv2d(h, b.conv), b.bn))
        if i < NUM_EXITS - 1:
            return nn.maxpool2d(h, 2, 2)
        side = min(self.config.final_pool, h.shape[2])
        return nn.adaptive_avgpool2d(h, (side, side))

    def _exit(self, i: int, features: Tensor) -> tuple[Tensor, Tensor]:
        a = T.sigmoid(nn.conv2d(features, self.attention[i]))
        pooled = nn.global_avgpool(nn.spatial_gate(features, a))
        w, b = self.heads[i]
        return nn.linear(pooled, w, b), a

    def macs_breakdown(self) -> tuple[list[int], list[int]]:
        """Multiply-accumulate cost per block, and per exit (attention conv, gate, head)."""
        cfg = self.config
        block, exit_cost = [], []
        side, c_in = cfg.image_size, cfg.in_channels
        for c, out_side in zip(cfg.channels, cfg.spatial_sizes()):
            block.append(nn.conv2d_macs(c_in, c, 3, side, side))
            area = out_side * out_side
            exit_cost.append(2 * c * area + c * cfg.num_classes)
            side, c_in = out_side, c
        return block, exit_cost

    def iter_exits(self, x: Tensor, mode: str = "eval", upto: int = NUM_EXITS) -> Iterator[ExitOutput]:
        """Run blocks one at a time, yielding each exit's output as soon as it exists."""
        self._check_input(x)
        self._set_mode(mode)
        block_cost, exit_cost = self.macs_breakdown()
        h, macs = x, 0
        for i in range(upto):
            h = self._block(i, h)
            logits, a = self._exit(i, h)
            macs += block_cost[i] + exit_cost[i]
            yield ExitOutput(i + 1, logits, a, macs)

    def forward(self, x: Tensor, mode: str = "eval") -> ExitBundle:
        logits, attention = [], []
        for out in self.iter_exits(x, mode):
            logits.append(out.logits)
            attention.append(out.attention)
        return ExitBundle(logits, attention)

    __call__ = forward

    def forward_until(self, x: Tensor, exit_index: int) -> tuple[Tensor, Tensor, int]:
        """Evaluate only the prefix needed for ``exit_index`` (eval mode)."""
        if not 1 <= exit_index <= NUM_EXITS:
            raise ContractError(f"exit_index must be in 1..{NUM_EXITS}, got {exit_index}")
        self._check_input(x)
        self._set_mode("eval")
        h = x
        for i in range(exit_index):
            h = self._block(i, h)
        logits, a = self._exit(exit_index - 1, h)
        block_cost, exit_cost = self.macs_breakdown()
        return logits, a, sum(block_cost[:exit_index]) + exit_cost[exit_index - 1]


def model_new(config: ModelConfig = ModelConfig(), seed: int = 0, dtype=None) -> EGTModel:
    return EGTModel.create(config, seed, dtype)


def save_checkpoint(model: EGTModel, path: str | os.PathLike) -> None:
    container.save(path, model.state())


def _meta(tensors: dict[str, np.ndarray], key: str, default=None):
    arr = tensors.get(f"meta.{key}")
    if arr is None:
        return default
    return float(f"{float(arr.reshape(-1)[0]):.7g}")


def load_checkpoint(path: str | os.PathLike, dtype=None) -> EGTModel:
    tensors = container.load(path)
    dtype = dtype or T.get_default_dtype()
    try:
        channels = tuple(tensors[f"block{i + 1}.conv.weight"].shape[0] for i in range(NUM_EXITS))
        config = ModelConfig(
            image_size=int(_meta(tensors, "image_size")),
            num_classes=tensors["head1.weight"].shape[0],
            in_channels=tensors["block1.conv.weight"].shape[1],
            channels=channels,
            final_pool=int(_meta(tensors, "final_pool", 4)),
            bn_momentum=_meta(tensors, "bn_momentum", 0.1),
            bn_eps=_meta(tensors, "bn_eps", 1e-5),
        )
    except (KeyError, TypeError) as exc:
        raise ContractError(f"{path}: not a model checkpoint (missing {exc})") from exc
    model = EGTModel.create(config, 0, dtype)
    for name, p in model.named_parameters().items():
        if tensors[name].shape != p.shape:
            raise ShapeError(f"{path}: {name} has shape {tensors[name].shape}, expected {p.shape}")
        p.data = tensors[name].astype(dtype)
    for i, b in enumerate(model.blocks):
        b.bn.running_mean = tensors[f"block{i + 1}.bn.running_mean"].astype(dtype)
        b.bn.running_var = tensors[f"block{i + 1}.bn.running_var"].astype(dtype)
    known = {"image_size", "final_pool", "bn_momentum", "bn_eps"}
    model.meta = {k[5:]: _meta(tensors, k[5:]) for k in tensors if k.startswith("meta.") and k[5:] not in known}
    return model

"""Adam, the step-decay learning-rate schedule, and the epoch loop."""

from __future__ import annotations

import csv
import logging
import os
from dataclasses import dataclass, field
from typing import IO, Sequence

import numpy as np

from . import tensor as T
from .data import Dataset
from .errors import ConfigError, ContractError, TrainingDiverged
from .loss import LossConfig, classification_only_loss, total_loss
from .model import NUM_EXITS, EGTModel, save_checkpoint
from .tensor import Tensor, no_grad

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    lr0: float = 0.001
    step_size: int = 15
    gamma: float = 0.5
    batch_size: int = 32
    seed: int = 0
    alpha: float = 0.3
    detach_final_attention: bool = True
    precision: str = "float32"
    # drop the consistency term from the graph entirely (reference baseline)
    classification_only: bool = False

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs", f"must be >= 1, got {self.epochs}")
        if not self.lr0 > 0:
            raise ConfigError("lr0", f"must be > 0, got {self.lr0}")
        if self.step_size < 1:
            raise ConfigError("step", f"must be >= 1, got {self.step_size}")
        if not 0 < self.gamma <= 1:
            raise ConfigError("gamma", f"must lie in (0, 1], got {self.gamma}")
        if self.batch_size < 2:
            # batchnorm needs two samples per channel statistic at the last block
            raise ConfigError("batch", f"must be >= 2, got {self.batch_size}")
        if self.precision not in ("float32", "float64"):
            raise ConfigError("precision", f"must be float32 or float64, got {self.precision!r}")

    def loss_config(self) -> LossConfig:
        return LossConfig(alpha=self.alpha, detach_final_attention=self.detach_final_attention)


def lr_schedule(epoch: int, cfg: TrainConfig) -> float:
    return cfg.lr0 * cfg.gamma ** (epoch // cfg.step_size)


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: Sequence[Tensor], **kwargs) -> AdamState:
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params], **kwargs)


def adam_step(params: Sequence[Tensor], state: AdamState, lr: float) -> None:
    """Bias-corrected Adam update applied in place to ``params``."""
    for i, p in enumerate(params):
        if p.grad is None:
            raise ContractError(f"parameter {i} ({p.shape}) has no gradient")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1 ** state.t
    c2 = 1 - b2 ** state.t
    for p, m, v in zip(params, state.m, state.v):
        g = p.grad
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)


# -- metrics -------------------------------------------------------------------

METRIC_FIELDS = ("epoch", "split", "l_total", "l_cls", "l_cons") + tuple(f"acc_e{i}" for i in range(1, NUM_EXITS + 1))


@dataclass
class EpochMetrics:
    epoch: int
    split: str
    l_total: float
    l_cls: float
    l_cons: float
    acc: list[float]

    def row(self) -> list[str]:
        vals = [self.l_total, self.l_cls, self.l_cons, *self.acc]
        return [str(self.epoch), self.split, *(f"{v:.6g}" for v in vals)]


class MetricSink:
    """Writes one CSV row per epoch and split."""

    def __init__(self, stream: IO[str]):
        self._writer = csv.writer(stream, lineterminator="\n")
        self._writer.writerow(METRIC_FIELDS)
        self._stream = stream

    def write(self, m: EpochMetrics) -> None:
        self._writer.writerow(m.row())
        self._stream.flush()


@dataclass
class History:
    train: list[EpochMetrics] = field(default_factory=list)
    test: list[EpochMetrics] = field(default_factory=list)


def _first_nonfinite(root: Tensor) -> str:
    for node in root.iter_graph():
        if not np.all(np.isfinite(node.data)):
            return f"{node.op} output with shape {node.shape}"
    return "none found in graph"


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def evaluate(model: EGTModel, ds: Dataset, loss_cfg: LossConfig, epoch: int = 0,
             batch_size: int = 128) -> EpochMetrics:
    """Eval-mode loss terms and per-exit accuracy, averaged over ``ds``."""
    sums = np.zeros(3)
    correct = np.zeros(NUM_EXITS)
    with no_grad():
        for start in range(0, len(ds), batch_size):
            xb = Tensor(ds.images[start:start + batch_size].astype(model.dtype))
            yb = ds.labels[start:start + batch_size]
            bundle = model.forward(xb, "eval")
            br = total_loss(bundle, yb, loss_cfg)
            sums += len(yb) * np.array([br.l_total, br.l_cls, br.l_consistency])
            correct += [int((lg.data.argmax(axis=1) == yb).sum()) for lg in bundle.logits]
    n = len(ds)
    return EpochMetrics(epoch, ds.split, *(sums / n), list(correct / n))


def train(model: EGTModel, dataset: Dataset, cfg: TrainConfig, sink: MetricSink | None = None, *,
          eval_dataset: Dataset | None = None, eval_every: int = 1,
          checkpoint_path: str | os.PathLike | None = None, checkpoint_every: int = 0) -> History:
    """Optimise ``model`` in place and return per-epoch metric history."""
    if len(dataset) == 0:
        raise ContractError("training dataset is empty")
    if dataset.labels.max() >= model.config.num_classes:
        raise ContractError(f"labels exceed the model's {model.config.num_classes} classes")
    loss_cfg = cfg.loss_config()
    objective = classification_only_loss if cfg.classification_only else total_loss
    params = model.parameters()
    state = AdamState.for_params(params)
    images = dataset.images.astype(model.dtype)
    history = History()
    n = len(dataset)

    for epoch in range(cfg.epochs):
        lr = lr_schedule(epoch, cfg)
        order = epoch_order(n, cfg.seed, epoch)
        sums = np.zeros(3)
        correct = np.zeros(NUM_EXITS)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            if len(idx) < 2:
                # a single leftover sample cannot feed batchnorm's last block
                continue
            xb, yb = Tensor(images[idx]), dataset.labels[idx]
            bundle = model.forward(xb, "train")
            br = objective(bundle, yb, loss_cfg)
            if not np.isfinite(br.l_total):
                raise TrainingDiverged(f"epoch {epoch + 1}: non-finite loss; first non-finite tensor: "
                                       f"{_first_nonfinite(br.total)}")
            model.zero_grad()
            br.total.backward()
            adam_step(params, state, lr)
            sums += len(idx) * np.array([br.l_total, br.l_cls, br.l_consistency])
            correct += [int((lg.data.argmax(axis=1) == yb).sum()) for lg in bundle.logits]
        seen = n - 1 if n % cfg.batch_size == 1 else n
        m = EpochMetrics(epoch + 1, dataset.split, *(sums / seen), list(correct / seen))
        history.train.append(m)
        if sink:
            sink.write(m)
        log.info("epoch %d/%d lr=%.6g l_total=%.4f l_cls=%.4f l_cons=%.4f acc_e5=%.3f",
                 epoch + 1, cfg.epochs, lr, m.l_total, m.l_cls, m.l_cons, m.acc[-1])
        last = epoch + 1 == cfg.epochs
        if eval_dataset is not None and ((eval_every and (epoch + 1) % eval_every == 0) or last):
            tm = evaluate(model, eval_dataset, loss_cfg, epoch + 1)
            history.test.append(tm)
            if sink:
                sink.write(tm)
        if checkpoint_path and checkpoint_every and (epoch + 1) % checkpoint_every == 0:
            root, ext = os.path.splitext(os.fspath(checkpoint_path))
            save_checkpoint(model, f"{root}.epoch{epoch + 1}{ext or '.egtc'}")

    model.meta["alpha"] = cfg.alpha
    if checkpoint_path:
        save_checkpoint(model, checkpoint_path)
    return history


def train_with_precision(model_factory, dataset: Dataset, cfg: TrainConfig, **kwargs):
    """Build the model and train it under ``cfg.precision``."""
    with T.precision(cfg.precision):
        model = model_factory()
        return model, train(model, dataset, cfg, **kwargs)

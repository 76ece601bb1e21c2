"""Confidence-threshold early exiting with per-sample timing."""

from __future__ import annotations

import csv
import json
import os
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import Dataset
from .errors import ConfigError
from .model import NUM_EXITS, EGTModel
from .tensor import Tensor, no_grad

WARMUP_SAMPLES = 10


@dataclass(frozen=True)
class ExitPolicy:
    threshold: float = 0.9
    enabled: bool = True

    def __post_init__(self):
        if not 0 < self.threshold <= 1:
            raise ConfigError("tau", f"must lie in (0, 1], got {self.threshold}")


def confidence(logits) -> float:
    """Largest softmax probability of a single row of logits."""
    z = np.asarray(logits.data if isinstance(logits, Tensor) else logits, dtype=np.float64).reshape(-1)
    e = np.exp(z - z.max())
    return float(e.max() / e.sum())


def confidences(logits: np.ndarray) -> np.ndarray:
    """Row-wise largest softmax probability of [N, K] logits."""
    z = np.asarray(logits, dtype=np.float64)
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e.max(axis=1) / e.sum(axis=1)


def choose_exit(confs: Sequence[float], policy: ExitPolicy) -> int:
    """1-based index of the first exit among 1..4 with confidence >= tau, else 5."""
    if policy.enabled:
        for i, c in enumerate(confs[:NUM_EXITS - 1]):
            if c >= policy.threshold:
                return i + 1
    return NUM_EXITS


def decide_exits(logits: Sequence[np.ndarray], policy: ExitPolicy) -> tuple[np.ndarray, np.ndarray]:
    """Exit index and prediction for every row, given all five exits' logits."""
    confs = np.stack([confidences(lg) for lg in logits], axis=1)
    preds = np.stack([np.asarray(lg).argmax(axis=1) for lg in logits], axis=1)
    exits = np.array([choose_exit(row, policy) for row in confs])
    rows = np.arange(len(exits))
    return exits, preds[rows, exits - 1]


@dataclass
class TraceRow:
    sample_id: int
    exit: int
    confidence: float
    pred: int
    label: int
    latency_s: float
    macs: int


def infer_sample(model: EGTModel, x: Tensor, policy: ExitPolicy, label: int = -1,
                 sample_id: int = 0) -> TraceRow:
    """Run blocks incrementally and stop at the first confident exit.

    With the policy disabled every exit head still runs but none may stop
    execution, so both arms share one code path.
    """
    if x.shape[0] != 1:
        raise ValueError(f"infer_sample takes a batch of one, got {x.shape[0]}")
    with no_grad():
        t0 = time.perf_counter()
        for out in model.iter_exits(x, "eval"):
            conf = confidence(out.logits)
            if out.index == NUM_EXITS or (policy.enabled and conf >= policy.threshold):
                break
        latency = time.perf_counter() - t0
    pred = int(out.logits.data.argmax())
    return TraceRow(sample_id, out.index, conf, pred, int(label), latency, out.macs)


@dataclass
class InferenceTrace:
    rows: list[TraceRow]
    policy: ExitPolicy

    @property
    def exits(self) -> np.ndarray:
        return np.array([r.exit for r in self.rows])

    @property
    def correct(self) -> np.ndarray:
        return np.array([r.pred == r.label for r in self.rows])

    @property
    def latencies(self) -> np.ndarray:
        return np.array([r.latency_s for r in self.rows])

    def exit_counts(self) -> list[int]:
        return [int((self.exits == i).sum()) for i in range(1, NUM_EXITS + 1)]

    def exit_accuracy(self) -> list[float | None]:
        out = []
        for i in range(1, NUM_EXITS + 1):
            sel = self.exits == i
            out.append(float(self.correct[sel].mean()) if sel.any() else None)
        return out

    def accuracy(self) -> float:
        return float(self.correct.mean())

    def mean_latency_ms(self) -> float:
        return float(self.latencies.mean() * 1e3)

    def median_latency_ms(self) -> float:
        return float(np.median(self.latencies) * 1e3)

    def write_csv(self, path: str | os.PathLike) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["sample_id", "exit", "confidence", "pred", "label", "latency_us"])
            for r in self.rows:
                w.writerow([r.sample_id, r.exit, f"{r.confidence:.6g}", r.pred, r.label,
                            f"{r.latency_s * 1e6:.3f}"])


def infer_dataset(model: EGTModel, dataset: Dataset, policy: ExitPolicy,
                  warmup: int = WARMUP_SAMPLES) -> InferenceTrace:
    """Per-sample inference over ``dataset``; warm-up passes are not recorded."""
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    images = dataset.images.astype(model.dtype)
    for i in range(min(warmup, len(dataset))):
        infer_sample(model, Tensor(images[i:i + 1]), policy)
    rows = [infer_sample(model, Tensor(images[i:i + 1]), policy, int(dataset.labels[i]), i)
            for i in range(len(dataset))]
    return InferenceTrace(rows, policy)


@dataclass
class Comparison:
    with_exit: InferenceTrace
    without_exit: InferenceTrace
    extra: dict = field(default_factory=dict)

    @property
    def speedup(self) -> float:
        return self.without_exit.mean_latency_ms() / self.with_exit.mean_latency_ms()

    @property
    def median_speedup(self) -> float:
        return self.without_exit.median_latency_ms() / self.with_exit.median_latency_ms()

    def summary(self) -> dict:
        w, wo = self.with_exit, self.without_exit
        return {
            "threshold": w.policy.threshold,
            "samples": len(w.rows),
            "time_with_ms": w.mean_latency_ms(),
            "time_without_ms": wo.mean_latency_ms(),
            "speedup": self.speedup,
            "median_time_with_ms": w.median_latency_ms(),
            "median_time_without_ms": wo.median_latency_ms(),
            "median_speedup": self.median_speedup,
            "acc_with": 100.0 * w.accuracy(),
            "acc_without": 100.0 * wo.accuracy(),
            "exit_counts": w.exit_counts(),
            "exit_accuracy": w.exit_accuracy(),
            "macs_with_mean": float(np.mean([r.macs for r in w.rows])),
            "macs_without_mean": float(np.mean([r.macs for r in wo.rows])),
        }

    def write_json(self, path: str | os.PathLike) -> None:
        with open(path, "w") as fh:
            json.dump(self.summary(), fh, indent=2)
            fh.write("\n")


def compare(model: EGTModel, dataset: Dataset, threshold: float = 0.9,
            warmup: int = WARMUP_SAMPLES) -> Comparison:
    """Time the early-exit arm and the always-exit-5 arm on the same samples.

    The arms are interleaved sample by sample so slow drifts in machine load
    affect both equally.
    """
    on, off = ExitPolicy(threshold, True), ExitPolicy(threshold, False)
    images = dataset.images.astype(model.dtype)
    for i in range(min(warmup, len(dataset))):
        x = Tensor(images[i:i + 1])
        infer_sample(model, x, on)
        infer_sample(model, x, off)
    rows_on, rows_off = [], []
    for i in range(len(dataset)):
        x, y = Tensor(images[i:i + 1]), int(dataset.labels[i])
        rows_on.append(infer_sample(model, x, on, y, i))
        rows_off.append(infer_sample(model, x, off, y, i))
    return Comparison(InferenceTrace(rows_on, on), InferenceTrace(rows_off, off))

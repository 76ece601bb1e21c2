"""Attention-consistency metric and the two result tables."""

from __future__ import annotations

import csv
import io
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import container, nn
from .data import Dataset
from .inference import Comparison, ExitPolicy, compare, decide_exits
from .loss import flatten_maps
from .model import NUM_EXITS, EGTModel, load_checkpoint
from .tensor import Tensor, no_grad


@dataclass
class ConsistencyResult:
    per_sample: np.ndarray  # [M, 4] cosine similarity of resized A_i to A_5
    accuracy: float  # fraction correct under the early-exit policy
    final_accuracy: float  # fraction correct at exit 5

    @property
    def per_exit(self) -> list[float]:
        return [float(v) for v in self.per_sample.mean(axis=0)]

    @property
    def average(self) -> float:
        return float(np.mean(self.per_exit))


def attention_consistency(model: EGTModel, dataset: Dataset, policy: ExitPolicy = ExitPolicy(),
                          batch_size: int = 128, eps: float = 1e-8) -> ConsistencyResult:
    sims, logits = [], [[] for _ in range(NUM_EXITS)]
    with no_grad():
        for start in range(0, len(dataset), batch_size):
            xb = Tensor(dataset.images[start:start + batch_size].astype(model.dtype))
            bundle = model.forward(xb, "eval")
            final = bundle.attention[-1]
            target = flatten_maps(final)
            cols = []
            for a in bundle.attention[:NUM_EXITS - 1]:
                resized = flatten_maps(nn.bilinear_resize(a, final.shape[2:]))
                cols.append(1.0 - nn.cosine_distance(resized, target, eps).data.astype(np.float64))
            sims.append(np.stack(cols, axis=1))
            for i, lg in enumerate(bundle.logits):
                logits[i].append(lg.data)
    logits = [np.concatenate(lg) for lg in logits]
    _, preds = decide_exits(logits, policy)
    return ConsistencyResult(
        per_sample=np.concatenate(sims),
        accuracy=float((preds == dataset.labels).mean()),
        final_accuracy=float((logits[-1].argmax(axis=1) == dataset.labels).mean()),
    )


# -- table 1 ---------------------------------------------------------------------

@dataclass
class ConsistencyRow:
    model: str
    alpha: float | None
    exits: list[float]
    avg: float
    accuracy_pct: float


@dataclass
class ConsistencyReport:
    rows: list[ConsistencyRow] = field(default_factory=list)
    threshold: float = 0.9

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["model", "alpha", "exit1", "exit2", "exit3", "exit4", "avg", "overall_acc"])
        for r in self.rows:
            alpha = "" if r.alpha is None else f"{r.alpha:g}"
            w.writerow([r.model, alpha, *(f"{v:.6f}" for v in r.exits), f"{r.avg:.6f}", f"{r.accuracy_pct:.4f}"])
        return buf.getvalue()

    def to_text(self) -> str:
        header = ["Model", "Exit 1", "Exit 2", "Exit 3", "Exit 4", "Avg", "Overall Acc. (%)"]
        body = [[r.model, *(f"{v:.3f}" for v in r.exits), f"{r.avg:.3f}", f"{r.accuracy_pct:.2f}"]
                for r in self.rows]
        return _align([header, *body], title="Attention consistency (cosine similarity to exit 5)")

    def to_dict(self) -> dict:
        return {
            "threshold": self.threshold,
            "rows": [
                {"model": r.model, "alpha": r.alpha, "exits": r.exits, "avg": r.avg, "accuracy": r.accuracy_pct}
                for r in self.rows
            ],
        }


def model_label(alpha: float | None) -> str:
    if alpha is None:
        return "Model"
    return "Baseline Model" if alpha == 0 else f"EGT (alpha = {alpha:g})"


def consistency_table(checkpoints: Iterable[tuple[str, EGTModel | str | os.PathLike]], dataset: Dataset,
                      policy: ExitPolicy = ExitPolicy()) -> ConsistencyReport:
    """One row per labelled checkpoint (path or loaded model)."""
    report = ConsistencyReport(threshold=policy.threshold)
    for label, ckpt in checkpoints:
        model = ckpt if isinstance(ckpt, EGTModel) else load_checkpoint(ckpt)
        res = attention_consistency(model, dataset, policy)
        report.rows.append(ConsistencyRow(label, model.meta.get("alpha"), res.per_exit, res.average,
                                          100.0 * res.accuracy))
    return report


# -- table 2 ---------------------------------------------------------------------

@dataclass
class EfficiencyReport:
    time_with_ms: float
    time_without_ms: float
    acc_with: float
    acc_without: float
    details: dict = field(default_factory=dict)

    @property
    def speedup(self) -> float:
        return self.time_without_ms / self.time_with_ms

    @classmethod
    def from_comparison(cls, cmp: Comparison) -> EfficiencyReport:
        s = cmp.summary()
        return cls(s["time_with_ms"], s["time_without_ms"], s["acc_with"], s["acc_without"], s)

    def to_dict(self) -> dict:
        out = dict(self.details)
        out.update(time_with_ms=self.time_with_ms, time_without_ms=self.time_without_ms,
                   speedup=self.speedup, acc_with=self.acc_with, acc_without=self.acc_without)
        return out

    def to_text(self) -> str:
        rows = [
            ["Model", "Avg Time/Sample (ms)", "Accuracy (%)"],
            ["With Early Exit", f"{self.time_with_ms:.2f}", f"{self.acc_with:.2f}"],
            ["Without Early Exit", f"{self.time_without_ms:.2f}", f"{self.acc_without:.2f}"],
        ]
        return _align(rows, title="Inference efficiency") + f"Speedup: {self.speedup:.2f}x\n"


def efficiency_table(checkpoint: EGTModel | str | os.PathLike, dataset: Dataset,
                     policy: ExitPolicy = ExitPolicy()) -> tuple[EfficiencyReport, Comparison]:
    model = checkpoint if isinstance(checkpoint, EGTModel) else load_checkpoint(checkpoint)
    cmp = compare(model, dataset, policy.threshold)
    return EfficiencyReport.from_comparison(cmp), cmp


def _align(rows: Sequence[Sequence[str]], title: str) -> str:
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    rule = "-" * (sum(widths) + 2 * (len(widths) - 1))
    lines = [title, rule]
    for k, r in enumerate(rows):
        lines.append("  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths))))
        if k == 0:
            lines.append(rule)
    lines.append(rule)
    return "\n".join(lines) + "\n"


def write_json(path: str | os.PathLike, doc: dict) -> None:
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")


def write_summary(path: str | os.PathLike, consistency: ConsistencyReport | None = None,
                  efficiency: EfficiencyReport | None = None) -> None:
    """Both tables in one JSON document."""
    doc = {}
    if consistency is not None:
        doc["consistency"] = consistency.to_dict()
    if efficiency is not None:
        doc["efficiency"] = efficiency.to_dict()
    write_json(path, doc)


# -- heatmaps ----------------------------------------------------------------------

def quantize(a: np.ndarray) -> np.ndarray:
    """Map [0, 1] to 0..255, rounding halves up."""
    return np.clip(np.floor(255.0 * np.asarray(a, dtype=np.float64) + 0.5), 0, 255).astype(np.uint8)


def write_pgm(path: str | os.PathLike, a: np.ndarray) -> None:
    img = quantize(a)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def read_pgm(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        magic, dims, maxval, rest = fh.read().split(b"\n", 3)
    if magic != b"P5" or maxval != b"255":
        raise ValueError(f"{path}: not an 8-bit binary PGM")
    w, h = map(int, dims.split())
    return np.frombuffer(rest, dtype=np.uint8).reshape(h, w)


def export_attention(model: EGTModel, dataset: Dataset, ids: Sequence[int],
                     out_dir: str | os.PathLike) -> list[Path]:
    """Dump every exit's map, and exits 1-4 resized to the final grid, per sample."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    with no_grad():
        for idx in ids:
            x = Tensor(dataset.images[idx:idx + 1].astype(model.dtype))
            maps = model.forward(x, "eval").attention
            final_size = maps[-1].shape[2:]
            for i, a in enumerate(maps, start=1):
                items = [("", a)]
                if i < NUM_EXITS:
                    items.append(("_resized", nn.bilinear_resize(a, final_size)))
                for suffix, m in items:
                    stem = out / f"sample{idx:05d}_exit{i}{suffix}"
                    container.save(stem.with_suffix(".egtc"), {f"A{i}{suffix}": m.data})
                    write_pgm(stem.with_suffix(".pgm"), m.data[0, 0])
                    written += [stem.with_suffix(".egtc"), stem.with_suffix(".pgm")]
    return written

"""Classification plus attention-consistency objective.

    total = cls + alpha * consistency

``cls`` averages the cross-entropy of the five exits.  ``consistency``
averages, over exits 1-4, the per-sample cosine distance between the exit's
attention map (bilinearly resized to the final map's grid) and the final
exit's map.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from .errors import ConfigError
from .model import NUM_EXITS, ExitBundle
from .tensor import Tensor


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 0.3
    detach_final_attention: bool = True
    eps: float = 1e-8

    def __post_init__(self):
        if not np.isfinite(self.alpha) or self.alpha < 0:
            raise ConfigError("alpha", f"must be a finite value >= 0, got {self.alpha}")
        if self.eps <= 0:
            raise ConfigError("eps", f"must be > 0, got {self.eps}")


@dataclass
class LossBreakdown:
    l_cls: float
    per_exit_dcos: list[float]
    l_consistency: float
    l_total: float
    alpha: float
    total: Tensor  # differentiable l_total


def classification_loss(bundle: ExitBundle, labels) -> Tensor:
    terms = [T.cross_entropy(logits, labels) for logits in bundle.logits]
    acc = terms[0]
    for t in terms[1:]:
        acc = acc + t
    return acc * (1.0 / len(terms))


def flatten_maps(a: Tensor) -> Tensor:
    return T.reshape(a, (a.shape[0], -1))


def consistency_loss(bundle: ExitBundle, cfg: LossConfig = LossConfig()) -> tuple[Tensor, list[Tensor]]:
    """Mean over exits 1-4 of the batch-mean cosine distance to the final map."""
    final = bundle.attention[-1]
    if cfg.detach_final_attention:
        final = final.detach()
    target = flatten_maps(final)
    size = final.shape[2:]
    per_exit = []
    for a in bundle.attention[:NUM_EXITS - 1]:
        resized = nn.bilinear_resize(a, size)
        per_exit.append(T.mean(nn.cosine_distance(flatten_maps(resized), target, cfg.eps)))
    acc = per_exit[0]
    for d in per_exit[1:]:
        acc = acc + d
    return acc * (1.0 / len(per_exit)), per_exit


def total_loss(bundle: ExitBundle, labels, cfg: LossConfig = LossConfig()) -> LossBreakdown:
    if cfg.alpha == 0:
        # a zero-weighted branch would still reorder gradient accumulation in backward
        return classification_only_loss(bundle, labels, cfg)
    l_cls = classification_loss(bundle, labels)
    l_cons, per_exit = consistency_loss(bundle, cfg)
    total = l_cls + l_cons * cfg.alpha
    return _breakdown(l_cls, l_cons, per_exit, total, cfg.alpha)


def classification_only_loss(bundle: ExitBundle, labels, cfg: LossConfig = LossConfig()) -> LossBreakdown:
    """Baseline objective: the consistency term is measured but never enters the graph."""
    l_cls = classification_loss(bundle, labels)
    with T.no_grad():
        l_cons, per_exit = consistency_loss(bundle, cfg)
    return _breakdown(l_cls, l_cons, per_exit, l_cls, 0.0)


def _breakdown(l_cls: Tensor, l_cons: Tensor, per_exit: list[Tensor], total: Tensor, alpha: float) -> LossBreakdown:
    return LossBreakdown(
        l_cls=l_cls.item(),
        per_exit_dcos=[d.item() for d in per_exit],
        l_consistency=l_cons.item(),
        l_total=total.item(),
        alpha=alpha,
        total=total,
    )

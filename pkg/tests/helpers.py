"""Shared test helpers: tiny models and finite-difference gradient checks."""

import numpy as np

from egt import tensor as T
from egt.model import ModelConfig, model_new

TINY_CHANNELS = (4, 6, 8, 8, 8)


def tiny_model(seed=0, image=32, dtype=np.float64, **kw):
    return model_new(ModelConfig(image_size=image, channels=kw.pop("channels", TINY_CHANNELS), **kw), seed, dtype)


def numerical_grad(f, arr: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. every entry of ``arr`` (perturbed in place)."""
    grad = np.zeros_like(arr)
    flat, gflat = arr.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return grad


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max abs difference scaled by the larger gradient magnitude."""
    scale = max(np.abs(analytic).max(), np.abs(numeric).max(), 1e-8)
    return float(np.abs(analytic - numeric).max() / scale)


def gradcheck(build, inputs: list[T.Tensor], h: float = 1e-6) -> float:
    """Worst relative error over ``inputs`` for the scalar produced by ``build()``."""
    for t in inputs:
        t.requires_grad = True
        t.zero_grad()
    out = build()
    out.backward()
    worst = 0.0
    for t in inputs:
        numeric = numerical_grad(lambda: build().item(), t.data, h)
        worst = max(worst, rel_error(t.grad, numeric))
    return worst


def weighted_sum(out: T.Tensor, weights: np.ndarray) -> T.Tensor:
    """Reduce any tensor to a scalar with fixed random weights so every output entry matters."""
    return T.sum(T.mul(out, T.Tensor(weights.reshape(out.shape))))

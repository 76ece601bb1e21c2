"""Layer kernels with hand-written backward rules.

All spatial tensors use NCHW layout.  Convolution is cross-correlation
computed through an im2col matrix product.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError
from .tensor import Tensor, make_result


@dataclass
class Conv2dParams:
    weight: Tensor  # [C_out, C_in, k, k]
    bias: Tensor  # [C_out]
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.weight.ndim != 4 or self.weight.shape[2] != self.weight.shape[3]:
            raise ShapeError(f"conv weight must be [C_out, C_in, k, k], got {self.weight.shape}")
        if self.bias.shape != (self.weight.shape[0],):
            raise ShapeError(f"conv bias must be [{self.weight.shape[0]}], got {self.bias.shape}")
        if self.stride < 1 or self.padding < 0:
            raise ShapeError(f"need stride >= 1 and padding >= 0, got {self.stride}, {self.padding}")

    @property
    def kernel_size(self) -> int:
        return self.weight.shape[2]


@dataclass
class BatchNormParams:
    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5
    mode: str = "train"

    @classmethod
    def create(cls, channels: int, dtype=np.float32, momentum: float = 0.1, eps: float = 1e-5):
        return cls(
            gamma=Tensor(np.ones(channels, dtype=dtype), requires_grad=True),
            beta=Tensor(np.zeros(channels, dtype=dtype), requires_grad=True),
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
            momentum=momentum,
            eps=eps,
        )


def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def conv2d(x: Tensor, p: Conv2dParams) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"conv2d expects NCHW input, got {x.shape}")
    n, c, h, w = x.shape
    c_out, c_in, k, _ = p.weight.shape
    if c != c_in:
        raise ShapeError(f"conv2d: input has {c} channels, weight expects {c_in}")
    s, pad = p.stride, p.padding
    if h + 2 * pad < k or w + 2 * pad < k:
        raise ShapeError(f"conv2d: kernel {k} larger than padded input {h + 2 * pad}x{w + 2 * pad}")
    ho, wo = conv_output_size(h, k, s, pad), conv_output_size(w, k, s, pad)

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    windows = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s]
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
    wmat = p.weight.data.reshape(c_out, -1)
    out = cols @ wmat.T + p.bias.data
    out = np.ascontiguousarray(out.reshape(n, ho, wo, c_out).transpose(0, 3, 1, 2))

    def backward(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, c_out)
        gw = (gm.T @ cols).reshape(p.weight.shape) if p.weight.requires_grad else None
        gb = gm.sum(axis=0) if p.bias.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (gm @ wmat).reshape(n, ho, wo, c, k, k)
            gxp = np.zeros(xp.shape, dtype=x.dtype)
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i:i + s * ho:s, j:j + s * wo:s] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, pad:pad + h, pad:pad + w] if pad else gxp
        return gx, gw, gb

    return make_result(out, (x, p.weight, p.bias), backward, "conv2d")


def conv2d_macs(c_in: int, c_out: int, k: int, ho: int, wo: int) -> int:
    return c_in * c_out * k * k * ho * wo


def batchnorm2d(x: Tensor, p: BatchNormParams) -> Tensor:
    """Batch normalization over (N, H, W) for each channel.

    In train mode the running statistics are updated in place; the running
    variance tracks the unbiased batch variance.
    """
    if x.ndim != 4 or x.shape[1] != p.gamma.shape[0]:
        raise ShapeError(f"batchnorm2d: input {x.shape} does not match {p.gamma.shape[0]} channels")
    n, c, h, w = x.shape
    m = n * h * w
    gamma = p.gamma.data.reshape(1, c, 1, 1)
    beta = p.beta.data.reshape(1, c, 1, 1)

    if p.mode == "train":
        if m < 2:
            raise ShapeError("batchnorm2d in train mode needs at least 2 values per channel")
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        p.running_mean[...] = (1 - p.momentum) * p.running_mean + p.momentum * mu
        p.running_var[...] = (1 - p.momentum) * p.running_var + p.momentum * var * (m / (m - 1))
    elif p.mode == "eval":
        mu, var = p.running_mean, p.running_var
    else:
        raise ValueError(f"batchnorm mode must be 'train' or 'eval', got {p.mode!r}")

    inv_std = (1.0 / np.sqrt(var + p.eps)).astype(x.dtype).reshape(1, c, 1, 1)
    xhat = (x.data - mu.reshape(1, c, 1, 1)) * inv_std
    out = xhat * gamma + beta
    training = p.mode == "train"

    def backward(g):
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        gbeta = g.sum(axis=(0, 2, 3))
        dxhat = g * gamma
        if training:
            gx = inv_std / m * (
                m * dxhat
                - dxhat.sum(axis=(0, 2, 3), keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            )
        else:
            gx = dxhat * inv_std
        return gx, ggamma, gbeta

    return make_result(out.astype(x.dtype), (x, p.gamma, p.beta), backward, "batchnorm2d")


def maxpool2d(x: Tensor, k: int, stride: int) -> Tensor:
    """Window maxima; ties send the gradient to the first position in row-major order."""
    if x.ndim != 4:
        raise ShapeError(f"maxpool2d expects NCHW input, got {x.shape}")
    n, c, h, w = x.shape
    if h < k or w < k:
        raise ShapeError(f"maxpool2d: window {k} larger than input {h}x{w}")
    ho, wo = conv_output_size(h, k, stride, 0), conv_output_size(w, k, stride, 0)
    windows = sliding_window_view(x.data, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    flat = windows.reshape(n, c, ho, wo, k * k)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gx = np.zeros_like(x.data)
        for pos in range(k * k):
            i, j = divmod(pos, k)
            gx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += np.where(arg == pos, g, 0)
        return (gx,)

    return make_result(np.ascontiguousarray(out), (x,), backward, "maxpool2d")


def adaptive_bins(size: int, out: int) -> list[tuple[int, int]]:
    """Half-open bins [floor(i*size/out), floor((i+1)*size/out))."""
    return [((i * size) // out, ((i + 1) * size) // out) for i in range(out)]


def adaptive_avgpool2d(x: Tensor, out: tuple[int, int]) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"adaptive_avgpool2d expects NCHW input, got {x.shape}")
    n, c, h, w = x.shape
    oh, ow = out
    if not (1 <= oh <= h and 1 <= ow <= w):
        raise ShapeError(f"adaptive_avgpool2d: output {out} must lie within input {h}x{w}")
    if (oh, ow) == (h, w):
        return make_result(x.data.copy(), (x,), lambda g: (g,), "adaptive_avgpool2d")
    rows, cols = adaptive_bins(h, oh), adaptive_bins(w, ow)
    res = np.empty((n, c, oh, ow), dtype=x.dtype)
    for i, (r0, r1) in enumerate(rows):
        for j, (c0, c1) in enumerate(cols):
            res[:, :, i, j] = x.data[:, :, r0:r1, c0:c1].mean(axis=(2, 3))

    def backward(g):
        gx = np.zeros_like(x.data)
        for i, (r0, r1) in enumerate(rows):
            for j, (c0, c1) in enumerate(cols):
                gx[:, :, r0:r1, c0:c1] += (g[:, :, i, j] / ((r1 - r0) * (c1 - c0)))[:, :, None, None]
        return (gx,)

    return make_result(res, (x,), backward, "adaptive_avgpool2d")


def global_avgpool(x: Tensor) -> Tensor:
    """[N, C, H, W] -> [N, C] spatial mean."""
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3))

    def backward(g):
        return (np.broadcast_to((g / (h * w))[:, :, None, None], x.shape).astype(x.dtype, copy=True),)

    return make_result(out, (x,), backward, "global_avgpool")


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    if bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear: bias {bias.shape} does not match weight {weight.shape}")

    def backward(g):
        return g @ weight.data, g.T @ x.data, g.sum(axis=0)

    return make_result(x.data @ weight.data.T + bias.data, (x, weight, bias), backward, "linear")


def spatial_gate(features: Tensor, attention: Tensor) -> Tensor:
    """Multiply [N, C, H, W] features by a [N, 1, H, W] map shared across channels."""
    if attention.ndim != 4 or attention.shape[1] != 1 or features.shape[2:] != attention.shape[2:] \
            or features.shape[0] != attention.shape[0]:
        raise ShapeError(f"spatial_gate: map {attention.shape} does not fit features {features.shape}")

    def backward(g):
        return g * attention.data, (g * features.data).sum(axis=1, keepdims=True)

    return make_result(features.data * attention.data, (features, attention), backward, "spatial_gate")


def interpolation_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """Row d holds the 1-D linear interpolation weights for output pixel d.

    Source coordinates use pixel centres, (d + 0.5) * n_in / n_out - 0.5,
    clamped to the valid range.
    """
    m = np.zeros((n_out, n_in), dtype=np.float64)
    scale = n_in / n_out
    for d in range(n_out):
        src = min(max((d + 0.5) * scale - 0.5, 0.0), n_in - 1.0)
        i0 = int(np.floor(src))
        i1 = min(i0 + 1, n_in - 1)
        frac = src - i0
        m[d, i0] += 1.0 - frac
        m[d, i1] += frac
    return m.astype(dtype)


def bilinear_resize(a: Tensor, out: tuple[int, int]) -> Tensor:
    if a.ndim != 4:
        raise ShapeError(f"bilinear_resize expects [N, C, h, w], got {a.shape}")
    oh, ow = out
    if oh < 1 or ow < 1:
        raise ShapeError(f"bilinear_resize: output size must be positive, got {out}")
    h, w = a.shape[2:]
    ry = interpolation_matrix(h, oh, a.dtype)
    rx = interpolation_matrix(w, ow, a.dtype)
    res = ry @ a.data @ rx.T

    def backward(g):
        return (ry.T @ g @ rx,)

    return make_result(res, (a,), backward, "bilinear_resize")


def cosine_distance(x: Tensor, y: Tensor, eps: float = 1e-8) -> Tensor:
    """1 - x.y / (max(|x|, eps) * max(|y|, eps)).

    Accepts a pair of vectors [D] (scalar result) or a pair of batches [N, D]
    (one distance per row).
    """
    if x.shape != y.shape or x.ndim not in (1, 2):
        raise ShapeError(f"cosine_distance: need matching [D] or [N, D] inputs, got {x.shape}, {y.shape}")
    xd, yd = x.data, y.data
    dot = (xd * yd).sum(axis=-1)
    nx_raw = np.sqrt((xd * xd).sum(axis=-1))
    ny_raw = np.sqrt((yd * yd).sum(axis=-1))
    nx = np.maximum(nx_raw, eps)
    ny = np.maximum(ny_raw, eps)
    cos = dot / (nx * ny)

    def backward(g):
        g = np.asarray(g)[..., None]
        c = cos[..., None]
        # norm gradient vanishes where the eps guard is active
        ux = np.where((nx_raw > eps)[..., None], xd / np.where(nx_raw > eps, nx_raw, 1)[..., None], 0)
        uy = np.where((ny_raw > eps)[..., None], yd / np.where(ny_raw > eps, ny_raw, 1)[..., None], 0)
        gx = -g * (yd / (nx * ny)[..., None] - c * ux / nx[..., None])
        gy = -g * (xd / (nx * ny)[..., None] - c * uy / ny[..., None])
        return gx.astype(x.dtype), gy.astype(y.dtype)

    return make_result(np.asarray(1.0 - cos, dtype=x.dtype), (x, y), backward, "cosine_distance")

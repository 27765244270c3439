"""Forward and backward passes for the layer types used by the models.

Every function accepts either a single example (H x W x C, or a rank-1
vector for dense/softmax) or a batch with a leading N axis, and preserves
the input dtype. Gradients are the exact analytic derivatives of the
forward definitions; batch reductions run in a fixed order so results do
not depend on how a batch is scheduled.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, ParameterError


@dataclass
class LayerParams:
    kernel: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        if self.bias.ndim != 1 or self.bias.shape[0] != self.kernel.shape[-1]:
            raise DimensionError(
                f"bias shape {self.bias.shape} does not match kernel output extent {self.kernel.shape[-1]}"
            )


@dataclass
class LayerGrads:
    d_kernel: np.ndarray | None
    d_bias: np.ndarray | None
    d_input: np.ndarray | None


def _batched(x: np.ndarray, rank: int) -> tuple[np.ndarray, bool]:
    if x.ndim == rank:
        return x[None], True
    if x.ndim == rank + 1:
        return x, False
    raise DimensionError(f"expected rank {rank} or {rank + 1} tensor, got shape {x.shape}")


# -- convolution -------------------------------------------------------------


def _shifted(xp: np.ndarray, u: int, v: int, h: int, w: int) -> np.ndarray:
    return np.ascontiguousarray(xp[:, u:u + h, v:v + w, :]).reshape(-1, xp.shape[-1])


def conv2d_forward(x: np.ndarray, p: LayerParams) -> np.ndarray:
    """Stride-1 convolution with zero "same" padding.

    y[i, j, co] = bias[co] + sum_{u, v, ci} x[i + u - KH//2, j + v - KW//2, ci] * k[u, v, ci, co]
    """
    xb, single = _batched(x, 3)
    kh, kw, cin, cout = p.kernel.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise DimensionError(f"same padding needs odd kernel extents, got {kh}x{kw}")
    n, h, w, c = xb.shape
    if c != cin:
        raise DimensionError(f"input has {c} channels, kernel expects {cin}")
    ph, pw = kh // 2, kw // 2
    xp = np.pad(xb, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    out = np.empty((n * h * w, cout), dtype=np.result_type(xb.dtype, p.kernel.dtype))
    out[...] = p.bias
    for u in range(kh):
        for v in range(kw):
            out += _shifted(xp, u, v, h, w) @ p.kernel[u, v]
    out = out.reshape(n, h, w, cout)
    return out[0] if single else out


def conv2d_backward(
    x: np.ndarray, p: LayerParams, d_out: np.ndarray, need_input_grad: bool = True
) -> LayerGrads:
    xb, single = _batched(x, 3)
    db, _ = _batched(d_out, 3)
    kh, kw, cin, cout = p.kernel.shape
    n, h, w, c = xb.shape
    if db.shape != (n, h, w, cout):
        raise DimensionError(f"d_out shape {d_out.shape} does not match forward output {(n, h, w, cout)}")
    ph, pw = kh // 2, kw // 2
    xp = np.pad(xb, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    g = db.reshape(-1, cout)
    d_kernel = np.empty_like(p.kernel)
    dxp = np.zeros_like(xp) if need_input_grad else None
    for u in range(kh):
        for v in range(kw):
            d_kernel[u, v] = _shifted(xp, u, v, h, w).T @ g
            if dxp is not None:
                dxp[:, u:u + h, v:v + w, :] += (g @ p.kernel[u, v].T).reshape(n, h, w, c)
    d_bias = g.sum(axis=0)
    d_input = None
    if dxp is not None:
        d_input = dxp[:, ph:ph + h, pw:pw + w, :]
        d_input = d_input[0] if single else np.ascontiguousarray(d_input)
    return LayerGrads(d_kernel, d_bias.astype(p.bias.dtype), d_input)


# -- activations -------------------------------------------------------------


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(x: np.ndarray, d_out: np.ndarray) -> np.ndarray:
    # Subgradient at exactly 0 is taken as 0.
    return d_out * (x > 0)


def softmax(z: np.ndarray) -> np.ndarray:
    if z.shape[-1] < 2:
        raise DimensionError("softmax needs at least 2 logits")
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


# -- pooling -----------------------------------------------------------------


@dataclass
class PoolRecord:
    argmax: np.ndarray
    input_shape: tuple[int, ...]


def maxpool2x2_forward(x: np.ndarray) -> tuple[np.ndarray, PoolRecord]:
    """Non-overlapping 2x2 max pooling; an odd trailing row/column is dropped."""
    xb, single = _batched(x, 3)
    n, h, w, c = xb.shape
    if h < 2 or w < 2:
        raise DimensionError(f"maxpool needs H, W >= 2, got {h}x{w}")
    ho, wo = h // 2, w // 2
    win = (
        xb[:, : 2 * ho, : 2 * wo, :]
        .reshape(n, ho, 2, wo, 2, c)
        .transpose(0, 1, 3, 5, 2, 4)
        .reshape(n, ho, wo, c, 4)
    )
    idx = win.argmax(axis=-1)
    y = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    rec = PoolRecord(idx, x.shape)
    return (y[0] if single else y), rec


def maxpool2x2_backward(d_out: np.ndarray, rec: PoolRecord) -> np.ndarray:
    db, single = _batched(d_out, 3)
    n, ho, wo, c = db.shape
    win = np.zeros((n, ho, wo, c, 4), dtype=db.dtype)
    np.put_along_axis(win, rec.argmax.reshape(n, ho, wo, c)[..., None], db[..., None], axis=-1)
    h, w = rec.input_shape[-3], rec.input_shape[-2]
    dx = np.zeros((n, h, w, c), dtype=db.dtype)
    dx[:, : 2 * ho, : 2 * wo, :] = (
        win.reshape(n, ho, wo, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(n, 2 * ho, 2 * wo, c)
    )
    return dx[0] if single else dx


def global_max_pool(x: np.ndarray) -> tuple[np.ndarray, PoolRecord]:
    """Per-channel spatial maximum; ties resolve to the first cell in row-major order."""
    xb, single = _batched(x, 3)
    n, h, w, c = xb.shape
    flat = xb.reshape(n, h * w, c)
    idx = flat.argmax(axis=1)
    y = np.take_along_axis(flat, idx[:, None, :], axis=1)[:, 0, :]
    rec = PoolRecord(idx, x.shape)
    return (y[0] if single else y), rec


def global_max_pool_backward(d_out: np.ndarray, rec: PoolRecord) -> np.ndarray:
    db, single = _batched(d_out, 1)
    n, c = db.shape
    h, w = rec.input_shape[-3], rec.input_shape[-2]
    dx = np.zeros((n, h * w, c), dtype=db.dtype)
    np.put_along_axis(dx, rec.argmax.reshape(n, c)[:, None, :], db[:, None, :], axis=1)
    dx = dx.reshape(n, h, w, c)
    return dx[0] if single else dx


# -- dense -------------------------------------------------------------------


def dense_forward(x: np.ndarray, p: LayerParams) -> np.ndarray:
    xb, single = _batched(x, 1)
    if xb.shape[1] != p.kernel.shape[0]:
        raise DimensionError(f"input extent {xb.shape[1]} does not match weights {p.kernel.shape}")
    y = xb @ p.kernel + p.bias
    return y[0] if single else y


def dense_backward(x: np.ndarray, p: LayerParams, d_out: np.ndarray) -> LayerGrads:
    xb, single = _batched(x, 1)
    db, _ = _batched(d_out, 1)
    if db.shape != (xb.shape[0], p.kernel.shape[1]):
        raise DimensionError(f"d_out shape {d_out.shape} does not match forward output")
    d_input = db @ p.kernel.T
    return LayerGrads(xb.T @ db, db.sum(axis=0), d_input[0] if single else d_input)


# -- dropout -----------------------------------------------------------------


def dropout_forward(
    x: np.ndarray, rate: float, rng: np.random.Generator | None, training: bool
) -> tuple[np.ndarray, np.ndarray | None]:
    """Inverted dropout: survivors are scaled by 1 / (1 - rate) at train time,
    evaluation is the identity. Returns the output and the scaling mask (None
    when the layer is a no-op)."""
    if not 0.0 <= rate < 1.0:
        raise ParameterError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x, None
    if rng is None:
        raise ParameterError("training-mode dropout needs an rng")
    keep = rng.random(x.shape) >= rate
    mask = keep.astype(x.dtype) / x.dtype.type(1.0 - rate)
    return x * mask, mask


def dropout_backward(d_out: np.ndarray, mask: np.ndarray | None) -> np.ndarray:
    return d_out if mask is None else d_out * mask

"""Dense float32 arrays, seeded randomness and the few array primitives the
layers build on.

Images and feature maps are ``numpy.ndarray`` in row-major H x W x C layout
(optionally with a leading batch axis); convolution kernels are
KH x KW x Cin x Cout and dense weights In x Out.
"""
from __future__ import annotations

import numpy as np

from .errors import DimensionError, ParameterError

DTYPE = np.float32


def seeded_rng(seed: int, *stream: int) -> np.random.Generator:
    """Return a Philox-4x64 generator keyed by ``seed`` and an optional stream path.

    Philox is counter-based, so the stream for a given key is identical on
    every platform. ``stream`` lets callers derive independent sub-streams,
    e.g. ``seeded_rng(seed, epoch, sample_index)``.
    """
    if seed < 0 or any(s < 0 for s in stream):
        raise ParameterError("seed and stream keys must be non-negative")
    seq = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, *map(int, stream)])
    return np.random.Generator(np.random.Philox(seq))


def _check_extents(shape) -> tuple[int, ...]:
    shape = tuple(int(s) for s in shape)
    if not 1 <= len(shape) <= 4 or any(s < 1 for s in shape):
        raise DimensionError(f"invalid tensor shape {shape}")
    return shape


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def _axis_weights(n_in: int, n_out: int):
    # Corner-aligned sampling: output index i reads source coordinate
    # i * (n_in - 1) / (n_out - 1). A single output sample reads the centre
    # (n_in - 1) / 2.
    if n_out == 1:
        coords = np.array([(n_in - 1) / 2.0])
    else:
        coords = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
    lo = np.clip(np.floor(coords).astype(np.int64), 0, n_in - 1)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = coords - lo
    return lo, hi, frac


def bilinear_resize(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of an H x W x C (or batched N x H x W x C) tensor.

    Uses the corner-aligned convention: the first and last output samples
    coincide with the first and last input samples along each axis.
    """
    if out_h < 1 or out_w < 1:
        raise DimensionError(f"target extents must be >= 1, got {out_h}x{out_w}")
    if x.ndim not in (3, 4):
        raise DimensionError(f"expected H x W x C tensor, got shape {x.shape}")
    h, w = x.shape[-3], x.shape[-2]
    if (h, w) == (out_h, out_w):
        return x.copy()
    dtype = x.dtype if np.issubdtype(x.dtype, np.floating) else DTYPE
    xf = x.astype(np.float64)
    r0, r1, fr = _axis_weights(h, out_h)
    c0, c1, fc = _axis_weights(w, out_w)
    fr = fr[:, None, None]
    fc = fc[None, :, None]
    top = xf[..., r0, :, :]
    bot = xf[..., r1, :, :]
    rows = top + (bot - top) * fr
    left = rows[..., :, c0, :]
    right = rows[..., :, c1, :]
    out = left + (right - left) * fc
    return out.astype(dtype)


def glorot_bound(fan_in: int, fan_out: int | None = None) -> float:
    if fan_in < 1 or (fan_out is not None and fan_out < 1):
        raise ParameterError("fan_in and fan_out must be >= 1")
    if fan_out is None:
        fan_out = fan_in
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


def random_init(shape, rng: np.random.Generator, fan_in: int, fan_out: int | None = None) -> np.ndarray:
    """Glorot-uniform draw on [-b, b] with b = sqrt(6 / (fan_in + fan_out)).

    ``fan_out`` defaults to ``fan_in``, giving b = sqrt(3 / fan_in).
    """
    shape = _check_extents(shape)
    bound = glorot_bound(fan_in, fan_out)
    return rng.uniform(-bound, bound, size=shape).astype(DTYPE)

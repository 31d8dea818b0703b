"""Extreme channel prior embedded layer.

The layer maps incoming features through three learned convolutions: a main
branch ``f`` and two prior branches ``lam``/``omega`` squashed into (0, 1).
Windowed dark (min) and bright (max) extractors reduce the prior branches to
single-channel maps and record, per output pixel, which input element was
selected.  The backward pass routes each upstream gradient to exactly that
element and accumulates where one element wins several windows.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Tuple

import numpy as np

from .layers import ConvParams, xavier_conv
from .tensor import ShapeError, Tensor, _make, concat_channels, conv2d, sigmoid

PRIOR_CHANNELS = 3


@dataclass(frozen=True)
class ExtremeChannelMask:
    """Flat ``c*H*W + h*W + w`` indices (per sample) of the selected elements."""

    index: np.ndarray  # (N, 1, H, W) int64
    input_shape: Tuple[int, int, int, int]
    window: int


def _check_window(window) -> None:
    if not isinstance(window, (int, np.integer)) or window < 1 or window % 2 == 0:
        raise ShapeError(f"window must be a positive odd integer, got {window!r}")


def _windowed_argmin(x: np.ndarray, window: int) -> np.ndarray:
    """Flat index of the minimum over all channels and a clamped spatial window.

    Ties resolve to the smallest flat index.  Ordering by the key (value, flat
    index) is total, so the reduction is done separably: channels first, then
    rows, then columns.
    """
    n, c, h, w = x.shape
    vals = x.min(axis=1)
    cidx = x.argmin(axis=1)  # first occurrence == smallest channel
    flat = cidx * (h * w) + np.arange(h)[:, None] * w + np.arange(w)[None, :]
    r = window // 2
    big = np.iinfo(np.int64).max
    for axis in (1, 2):
        pad = [(0, 0)] * 3
        pad[axis] = (r, r)
        pv = np.pad(vals, pad, constant_values=np.inf)
        pf = np.pad(flat, pad, constant_values=big)
        size = vals.shape[axis]
        take = [slice(None)] * 3
        take[axis] = slice(0, size)
        bv, bf = pv[tuple(take)], pf[tuple(take)]
        for k in range(1, window):
            take[axis] = slice(k, k + size)
            v, f = pv[tuple(take)], pf[tuple(take)]
            better = (v < bv) | ((v == bv) & (f < bf))
            bv = np.where(better, v, bv)
            bf = np.where(better, f, bf)
        vals, flat = bv, bf
    return flat.reshape(n, 1, h, w)


def _gather(x: np.ndarray, index: np.ndarray) -> np.ndarray:
    n = x.shape[0]
    return np.take_along_axis(x.reshape(n, -1), index.reshape(n, -1), axis=1).reshape(index.shape)


def dark_extract(lam: np.ndarray, window: int) -> Tuple[np.ndarray, ExtremeChannelMask]:
    """Dark channel: per pixel minimum over channels and the window around it."""
    _check_window(window)
    lam = np.asarray(lam)
    if lam.ndim != 4 or lam.shape[1] < 1:
        raise ShapeError(f"dark_extract expects (N, C>=1, H, W), got {lam.shape}")
    idx = _windowed_argmin(lam, window)
    return _gather(lam, idx), ExtremeChannelMask(idx, lam.shape, window)


def bright_extract(omega: np.ndarray, window: int) -> Tuple[np.ndarray, ExtremeChannelMask]:
    """Bright channel: per pixel maximum over channels and the window around it."""
    _check_window(window)
    omega = np.asarray(omega)
    if omega.ndim != 4 or omega.shape[1] < 1:
        raise ShapeError(f"bright_extract expects (N, C>=1, H, W), got {omega.shape}")
    # argmax under the smallest-index rule == argmin of the negation
    idx = _windowed_argmin(-omega, window)
    return _gather(omega, idx), ExtremeChannelMask(idx, omega.shape, window)


def _scatter_add(size: int, index: np.ndarray, values: np.ndarray) -> np.ndarray:
    return np.bincount(index, weights=values, minlength=size)


def extract_backward(upstream: np.ndarray, mask: ExtremeChannelMask) -> np.ndarray:
    """Route each upstream pixel's gradient to the input element its window selected."""
    n, c, h, w = mask.input_shape
    if upstream.shape != (n, 1, h, w):
        raise ShapeError(f"extract_backward: upstream {upstream.shape} does not match mask for {mask.input_shape}")
    per = c * h * w
    idx = mask.index.reshape(n, -1)
    if idx.min() < 0 or idx.max() >= per:
        raise RuntimeError("extractor mask index out of bounds: forward/backward mismatch")
    offsets = (np.arange(n) * per)[:, None]
    g = _scatter_add(n * per, (idx + offsets).ravel(), upstream.reshape(-1).astype(np.float64))
    return g.reshape(n, c, h, w).astype(upstream.dtype)


def dark_channel(lam: Tensor, window: int) -> Tuple[Tensor, ExtremeChannelMask]:
    values, mask = dark_extract(lam.data, window)

    def bw(g):
        return (extract_backward(g, mask),)

    return _make(values, (lam,), bw, "dark_extract"), mask


def bright_channel(omega: Tensor, window: int) -> Tuple[Tensor, ExtremeChannelMask]:
    values, mask = bright_extract(omega.data, window)

    def bw(g):
        return (extract_backward(g, mask),)

    return _make(values, (omega,), bw, "bright_extract"), mask


@dataclass
class ECPeLParams:
    theta: ConvParams  # main branch f, with PReLU
    alpha: ConvParams  # dark-prior branch, sigmoid applied after
    beta: ConvParams  # bright-prior branch, sigmoid applied after

    def named(self, prefix: str) -> Iterator[Tuple[str, Tensor]]:
        yield from self.theta.named(f"{prefix}.theta")
        yield from self.alpha.named(f"{prefix}.alpha")
        yield from self.beta.named(f"{prefix}.beta")


def init_ecpel(rng: np.random.Generator, c_in: int, channels: int, dtype=np.float32) -> ECPeLParams:
    return ECPeLParams(
        theta=xavier_conv(rng, c_in, channels, dtype=dtype),
        alpha=xavier_conv(rng, c_in, PRIOR_CHANNELS, activation=False, dtype=dtype),
        beta=xavier_conv(rng, c_in, PRIOR_CHANNELS, activation=False, dtype=dtype),
    )


@dataclass
class ECPeLOutput:
    features: Tensor  # [lam, f, omega] along channels
    dark: Tensor
    bright: Tensor
    dark_mask: ExtremeChannelMask
    bright_mask: ExtremeChannelMask
    lam: Tensor
    omega: Tensor


def ecpel_forward(features: Tensor, params: ECPeLParams, window: int) -> ECPeLOutput:
    for branch in (params.theta, params.alpha, params.beta):
        if branch.c_in != features.shape[1]:
            raise ShapeError(
                f"ECPeL mapping expects {branch.c_in} channels, features have shape {features.shape}"
            )
    f = params.theta(features)
    lam = sigmoid(conv2d(features, params.alpha.weight, params.alpha.bias))
    omega = sigmoid(conv2d(features, params.beta.weight, params.beta.bias))
    dark, dmask = dark_channel(lam, window)
    bright, bmask = bright_channel(omega, window)
    return ECPeLOutput(concat_channels([lam, f, omega]), dark, bright, dmask, bmask, lam, omega)

"""Convolution parameter bundles and Xavier initialization."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Optional, Tuple

import numpy as np

from .tensor import Tensor, conv2d, prelu


@dataclass
class ConvParams:
    """Weights (C_out, C_in, k, k), bias (C_out,) and optional PReLU slopes (C_out,)."""

    weight: Tensor
    bias: Tensor
    slope: Optional[Tensor] = None

    @property
    def c_in(self) -> int:
        return self.weight.shape[1]

    @property
    def c_out(self) -> int:
        return self.weight.shape[0]

    def named(self, prefix: str) -> Iterator[Tuple[str, Tensor]]:
        yield f"{prefix}.weight", self.weight
        yield f"{prefix}.bias", self.bias
        if self.slope is not None:
            yield f"{prefix}.slope", self.slope

    def __call__(self, x: Tensor) -> Tensor:
        y = conv2d(x, self.weight, self.bias)
        if self.slope is not None:
            y = prelu(y, self.slope)
        return y


def xavier_conv(
    rng: np.random.Generator,
    c_in: int,
    c_out: int,
    kernel: int = 3,
    activation: bool = True,
    dtype=np.float32,
    slope_init: float = 0.25,
) -> ConvParams:
    """Glorot-uniform weights (variance 2 / (fan_in + fan_out)), zero bias."""
    fan_in = c_in * kernel * kernel
    fan_out = c_out * kernel * kernel
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    w = rng.uniform(-limit, limit, size=(c_out, c_in, kernel, kernel)).astype(dtype)
    b = np.zeros(c_out, dtype=dtype)
    slope = Tensor(np.full(c_out, slope_init, dtype=dtype), requires_grad=True) if activation else None
    return ConvParams(Tensor(w, requires_grad=True), Tensor(b, requires_grad=True), slope)

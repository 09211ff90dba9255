"""Parameter initialization."""

from __future__ import annotations

import math

import numpy as np

from ..errors import ConfigError
from .core import Tensor

TANH_GAIN = 5.0 / 3.0


def fan_in_out(shape: tuple[int, ...]) -> tuple[int, int]:
    """Fan-in/fan-out for a weight shape.

    2-d weights use the (in, out) layout; conv kernels (C_out, C_in, k...)
    multiply the fans by the receptive field size.
    """
    if len(shape) == 2:
        return shape[0], shape[1]
    if len(shape) >= 3:
        rf = int(np.prod(shape[2:]))
        return shape[1] * rf, shape[0] * rf
    raise ConfigError(f"no identifiable fan-in/fan-out for shape {shape}")


def xavier_uniform(shape, gain: float, rng: np.random.Generator,
                   dtype=np.float64, requires_grad: bool = True) -> Tensor:
    """Uniform in +-gain*sqrt(6/(fan_in+fan_out))."""
    shape = tuple(int(s) for s in shape)
    fan_in, fan_out = fan_in_out(shape)
    bound = gain * math.sqrt(6.0 / (fan_in + fan_out))
    data = rng.uniform(-bound, bound, size=shape).astype(dtype)
    return Tensor(data, requires_grad=requires_grad)


def zeros(shape, dtype=np.float64, requires_grad: bool = True) -> Tensor:
    return Tensor(np.zeros(tuple(int(s) for s in shape), dtype=dtype),
                  requires_grad=requires_grad)


def ones(shape, dtype=np.float64, requires_grad: bool = True) -> Tensor:
    return Tensor(np.ones(tuple(int(s) for s in shape), dtype=dtype),
                  requires_grad=requires_grad)

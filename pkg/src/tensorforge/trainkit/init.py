"""Parameter initialization."""

import math

from ..errors import ArgumentError
from ..tensor import Tensor


def kaiming_bound(fan_in: int) -> float:
    if fan_in < 1:
        raise ArgumentError(f"kaiming_uniform: fan_in must be >= 1, got {fan_in}")
    # gain sqrt(2), uniform variance rule: b = gain * sqrt(3 / fan_in)
    return math.sqrt(6.0 / fan_in)


def kaiming_uniform_(param: Tensor, fan_in: int, seed) -> Tensor:
    """Fill ``param`` from U[-b, b) with b = sqrt(6 / fan_in)."""
    b = kaiming_bound(fan_in)
    return param.engine.uniform_fill(param, -b, b, seed)


def conv_fan_in(filter_shape) -> int:
    """Filters are [out, kh, kw, in]; fan-in counts one output's receptive field."""
    _, kh, kw, cin = filter_shape
    return kh * kw * cin

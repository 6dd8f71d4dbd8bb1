from __future__ import annotations

import math
from typing import Any, Iterable

import numpy as np
import torch

from esrtwin.errors import ValidationError

BLOCK = 4096


def counter_rng(seed: int, stream: int = 0) -> np.random.Generator:
    """Counter-based generator for the pair (seed, stream).

    Each stream owns its own region of the Philox counter space, so results do not depend on
    the order or the worker that consumes the streams.
    """
    if seed < 0 or stream < 0:
        raise ValidationError(f"seed and stream must be non-negative, got {seed}, {stream}")
    return np.random.Generator(np.random.Philox(key=int(seed), counter=[0, 0, int(stream), 0]))


def blocked_draw(seed: int, n: int, draw: Any, block: int = BLOCK) -> np.ndarray:
    """Concatenate `draw(rng, size)` over fixed-size blocks, one counter stream per block."""
    chunks = []
    for b in range(math.ceil(n / block)):
        size = min(block, n - b * block)
        chunks.append(draw(counter_rng(seed, b), size))
    if not chunks:
        return np.empty(0)
    return np.concatenate(chunks, axis=0)


def tree_sum(x: torch.Tensor) -> torch.Tensor:
    """Pairwise reduction of a 1D tensor in a fixed order, independent of thread count."""
    n = x.shape[0]
    if n == 0:
        return torch.zeros((), dtype=x.dtype, device=x.device)
    size = 1 << (n - 1).bit_length()
    if size != n:
        x = torch.cat([x, torch.zeros(size - n, dtype=x.dtype, device=x.device)])
    while x.shape[0] > 1:
        x = x[0::2] + x[1::2]
    return x[0]


def check_finite(**values: Any) -> None:
    for name, value in values.items():
        arr = np.asarray(value.detach().cpu() if isinstance(value, torch.Tensor) else value)
        if not np.all(np.isfinite(arr)):
            raise ValidationError(f"'{name}' must be finite, got {value!r}")


def check_positive(**values: Any) -> None:
    check_finite(**values)
    for name, value in values.items():
        if not np.all(np.asarray(value) > 0):
            raise ValidationError(f"'{name}' must be > 0, got {value!r}")


def as_array(values: Iterable[float]) -> np.ndarray:
    return np.asarray(list(values) if not isinstance(values, np.ndarray) else values, dtype=float)

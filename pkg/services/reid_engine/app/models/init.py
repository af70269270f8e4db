"""
Parameter initializers.
Each takes an explicit numpy Generator so every parameter block draws from
its own named seed stream.
"""

from typing import Sequence

import numpy as np

from app.autograd.tensor import Tensor, get_default_dtype
from app.core.errors import DimensionError

GAUSSIAN_VARIANCE = 0.01


def _check_shape(shape: Sequence[int]) -> tuple:
    shape = tuple(int(d) for d in shape)
    if not shape or any(d <= 0 for d in shape):
        raise DimensionError(f"cannot initialize a tensor of shape {shape}")
    return shape


def init_gaussian(shape: Sequence[int], rng: np.random.Generator, mean: float = 0.0, variance: float = GAUSSIAN_VARIANCE) -> Tensor:
    shape = _check_shape(shape)
    data = rng.normal(mean, np.sqrt(variance), size=shape)
    return Tensor(data, requires_grad=True, dtype=get_default_dtype())


def init_orthogonal(shape: Sequence[int], rng: np.random.Generator) -> Tensor:
    """
    QR-based orthogonal matrix. The shape is read as (shape[0], prod(rest));
    the longer side gets orthonormal vectors along the shorter one, so a
    [H, 4H] block satisfies W Wᵀ = I and its transpose WᵀW = I.
    """
    shape = _check_shape(shape)
    if len(shape) < 2:
        raise DimensionError(f"orthogonal init needs at least 2 dimensions, got shape {shape}")
    rows, cols = shape[0], int(np.prod(shape[1:]))
    tall = rng.normal(0.0, 1.0, size=(max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(tall)
    # columns signed so that diag(R) is positive
    q = q * np.sign(np.where(np.diag(r) == 0, 1.0, np.diag(r)))
    if rows < cols:
        q = q.T
    return Tensor(q.reshape(shape), requires_grad=True, dtype=get_default_dtype())


def init_constant(shape: Sequence[int], value: float = 0.0) -> Tensor:
    shape = _check_shape(shape)
    return Tensor(np.full(shape, value), requires_grad=True, dtype=get_default_dtype())

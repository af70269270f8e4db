"""
RTRL DESK - Temporal residual learning
Generic features: temporal mean of the first recurrence's outputs.
Specific features: temporal mean of a second recurrence fed with the
mean-centered residuals ḡ1 − g1_t. Fusion weights α (per stream) and β
(across streams).
"""

from dataclasses import dataclass
from typing import Optional, Tuple, Union

import numpy as np

from app.autograd import ops
from app.autograd.tensor import Tensor
from app.core.errors import ConfigError, DimensionError, NumericError
from app.core.seeding import SeedStreams
from app.models.layers import BiLSTM, LSTM, Module, as_sequence_batch, temporal_cell

Recurrence = Union[LSTM, BiLSTM]


@dataclass
class StreamFeatures:
    """Per-stream intermediate results, batched [N, ...]"""

    g1_seq: Tensor
    g1_mean: Tensor
    residuals: Optional[Tensor]
    g2_seq: Optional[Tensor]
    g2_mean: Optional[Tensor]
    fused: Tensor


def generic_features(f_seq: Tensor, lstm1: Recurrence) -> Tuple[Tensor, Tensor]:
    """([N,] T, D) -> (g1_seq ([N,] T, 2H), ḡ1 ([N,] 2H))"""
    batch, unbatched = as_sequence_batch(f_seq)
    g1_seq = lstm1(batch)
    g1_mean = ops.reduce_mean(g1_seq, axis=1)
    if unbatched:
        return ops.select(g1_seq, 0, 0), ops.select(g1_mean, 0, 0)
    return g1_seq, g1_mean


def residuals(g1_seq: Tensor, g1_mean: Tensor) -> Tensor:
    """r_t = ḡ1 − g1_t, summing to zero over t"""
    if g1_seq.ndim < 2 or g1_seq.shape[:-2] + g1_seq.shape[-1:] != g1_mean.shape:
        raise DimensionError(f"residuals: sequence {g1_seq.shape} does not match mean {g1_mean.shape}")
    expanded = ops.reshape(g1_mean, g1_mean.shape[:-1] + (1,) + g1_mean.shape[-1:])
    return ops.sub(ops.broadcast_to(expanded, g1_seq.shape), g1_seq)


def specific_features(g1_seq: Tensor, g1_mean: Tensor, lstm2: Recurrence) -> Tuple[Tensor, Tensor]:
    """Second recurrence over the residuals; returns (g2_seq, ḡ2)"""
    r = residuals(g1_seq, g1_mean)
    batch, unbatched = as_sequence_batch(r)
    g2_seq = lstm2(batch)
    g2_mean = ops.reduce_mean(g2_seq, axis=1)
    if unbatched:
        return ops.select(g2_seq, 0, 0), ops.select(g2_mean, 0, 0)
    return g2_seq, g2_mean


def _check_weight(name: str, value: float) -> None:
    if not 0.0 <= value <= 1.0:
        raise ConfigError(f"{name} must lie in [0, 1], got {value}", key=f"ablation.{name}")


def fuse_stream(g1_mean: Tensor, g2_mean: Optional[Tensor], alpha: float) -> Tensor:
    """g = α·ḡ1 + (1−α)·ḡ2; α = 1 returns ḡ1 itself and α = 0 returns ḡ2"""
    _check_weight("alpha", alpha)
    if alpha == 1.0:
        return g1_mean
    if g2_mean is None:
        raise ConfigError("alpha < 1 needs specific features", key="ablation.alpha")
    if g1_mean.shape != g2_mean.shape:
        raise DimensionError(f"fuse_stream: ḡ1 {g1_mean.shape} vs ḡ2 {g2_mean.shape}")
    if alpha == 0.0:
        return g2_mean
    return ops.add(ops.scale(g1_mean, alpha), ops.scale(g2_mean, 1.0 - alpha))


def _weighted_unit(g: Tensor, weight: float, stream: str) -> Tensor:
    batch = g if g.ndim == 2 else ops.reshape(g, (1, g.shape[0]))
    if weight == 0.0:
        zeros = Tensor._wrap(np.zeros(batch.shape, dtype=g.dtype))
        return zeros if g.ndim == 2 else ops.reshape(zeros, g.shape)
    norms = np.sqrt((batch.data.astype(np.float64) ** 2).sum(axis=1))
    if np.any(norms == 0.0):
        row = int(np.flatnonzero(norms == 0.0)[0])
        raise NumericError(f"fuse_overall: {stream}-stream vector {row} has zero norm")
    norm = ops.sqrt(ops.reduce_sum(ops.square(batch), axis=1))
    unit = ops.div(batch, ops.broadcast_to(ops.reshape(norm, (batch.shape[0], 1)), batch.shape))
    out = ops.scale(unit, weight) if weight != 1.0 else unit
    return out if g.ndim == 2 else ops.reshape(out, g.shape)


def fuse_overall(g_original: Tensor, g_aligned: Tensor, beta: float) -> Tensor:
    """[β·gO/‖gO‖ ; (1−β)·gA/‖gA‖]; a zero weight yields an exact zero half"""
    _check_weight("beta", beta)
    if g_original.shape != g_aligned.shape:
        raise DimensionError(f"fuse_overall: gO {g_original.shape} vs gA {g_aligned.shape}")
    parts = [
        _weighted_unit(g_original, beta, "original"),
        _weighted_unit(g_aligned, 1.0 - beta, "aligned"),
    ]
    return ops.concat(parts, axis=g_original.ndim - 1)


class TemporalResidual(Module):
    """
    One stream's TRL. features='generic' builds only the first recurrence;
    'specific' and 'both' build both.
    """

    def __init__(self, input_dim: int, hidden: int, cell: str, features: str, alpha: float, seeds: SeedStreams, name: str):
        super().__init__()
        self.features = features
        self.alpha = {"generic": 1.0, "specific": 0.0}.get(features, alpha)
        self.lstm1 = temporal_cell(cell, input_dim, hidden, seeds, f"{name}.lstm1")
        self.lstm2: Optional[Recurrence] = None
        if features != "generic":
            self.lstm2 = temporal_cell(cell, self.lstm1.output_dim, hidden, seeds, f"{name}.lstm2")
        self.output_dim = self.lstm1.output_dim

    def __call__(self, f_seq: Tensor) -> StreamFeatures:
        """f_seq [N, T, D]"""
        g1_seq, g1_mean = generic_features(f_seq, self.lstm1)
        r = g2_seq = g2_mean = None
        if self.lstm2 is not None:
            r = residuals(g1_seq, g1_mean)
            g2_seq = self.lstm2(r)
            g2_mean = ops.reduce_mean(g2_seq, axis=1)
        fused = fuse_stream(g1_mean, g2_mean, self.alpha)
        return StreamFeatures(g1_seq, g1_mean, r, g2_seq, g2_mean, fused)

"""
RTRL DESK - Spatial-temporal transformer
Predicts per-frame scale/translation θ_t = (s_x, s_y, τ_x, τ_y) from the
high-level maps with bidirectional temporal context, then resamples the
low-level maps through the resulting affine grid.
"""

from typing import Optional, Tuple

import numpy as np

from app.autograd import ops
from app.autograd.tensor import Tensor
from app.core.config import ST2NConfig
from app.core.errors import DimensionError, EmptySequenceError
from app.core.seeding import SeedStreams
from app.models.layers import BiLSTM, Conv2d, Linear, Module, Norm2d, dropout, global_avg_pool

IDENTITY_THETA = (1.0, 1.0, 0.0, 0.0)


class SpatialTemporalTransformer(Module):
    """
    Localization network: 1×1 conv + norm + ReLU, 2×2 max pool, 1×1 conv +
    norm + ReLU, global average pool -> c_t; BiLSTM over c_1..c_T (dropout on
    its outputs); FC to 4 parameters. temporal=False drops the BiLSTM and maps
    each c_t on its own (per-frame STN).
    """

    def __init__(self, in_channels: int, config: ST2NConfig, seeds: SeedStreams, temporal: bool = True, name: str = "st2n"):
        super().__init__()
        self.config = config
        self.temporal = temporal
        width = config.conv_width
        # per-frame STN: each frame normalized on its own, so θ_t sees frame t only
        per_frame = not temporal
        self.conv1 = Conv2d(in_channels, width, 1, seeds, f"{name}.conv1")
        self.norm1 = Norm2d(width, config.norm_eps, config.norm_momentum, per_sample=per_frame)
        self.conv2 = Conv2d(width, width, 1, seeds, f"{name}.conv2")
        self.norm2 = Norm2d(width, config.norm_eps, config.norm_momentum, per_sample=per_frame)
        self.bilstm: Optional[BiLSTM] = None
        fc_in = width
        if temporal:
            self.bilstm = BiLSTM(width, config.lstm_hidden, seeds, f"{name}.bilstm")
            fc_in = self.bilstm.output_dim
        self.fc = Linear(fc_in, 4, seeds, f"{name}.fc", zero_weight=True, bias_value=IDENTITY_THETA)

    def context(self, x_seq: Tensor) -> Tensor:
        """[N, T, h, w, C] -> c [N, T, conv_width]"""
        n, t = x_seq.shape[:2]
        x = ops.reshape(x_seq, (n * t,) + x_seq.shape[2:])
        x = ops.relu(self.norm1(self.conv1(x)))
        if self.config.pool:
            x = ops.max_pool2d(x)
        x = ops.relu(self.norm2(self.conv2(x)))
        return ops.reshape(global_avg_pool(x), (n, t, self.config.conv_width))

    def localize(self, x_seq: Tensor, rng: Optional[np.random.Generator] = None) -> Tensor:
        """[N, T, h, w, C] -> θ [N, T, 4]"""
        n, t = x_seq.shape[:2]
        c = self.context(x_seq)
        if self.bilstm is not None:
            c = dropout(self.bilstm(c), self.config.dropout, self.training, rng)
        theta = ops.reshape(self.fc(ops.reshape(c, (n * t, c.shape[2]))), (n, t, 4))
        return self._clamp_scale(theta)

    def _clamp_scale(self, theta: Tensor) -> Tensor:
        low, high = self.config.scale_min, self.config.scale_max
        if low is None and high is None:
            return theta
        scales = ops.clamp(ops.slice_axis(theta, 2, 0, 2), low, high)
        return ops.concat([scales, ops.slice_axis(theta, 2, 2, 4)], axis=2)

    def align(self, y_seq: Tensor, x_seq: Tensor, rng: Optional[np.random.Generator] = None) -> Tuple[Tensor, Tensor]:
        """Returns (Ŷ [N, T, H1, W1, C1], θ [N, T, 4])"""
        if y_seq.shape[:2] != x_seq.shape[:2]:
            raise DimensionError(f"align: Y frames {y_seq.shape[:2]} do not match X frames {x_seq.shape[:2]}")
        n, t, h, w, ch = y_seq.shape
        theta = self.localize(x_seq, rng)
        grid = ops.affine_grid(ops.assemble_affine(ops.reshape(theta, (n * t, 4))), h, w)
        aligned = ops.bilinear_sample(ops.reshape(y_seq, (n * t, h, w, ch)), grid)
        return ops.reshape(aligned, y_seq.shape), theta


def _batched_sequence(seq: Tensor, rank: int) -> Tuple[Tensor, bool]:
    if seq.ndim == rank:
        return ops.reshape(seq, (1,) + seq.shape), True
    if seq.ndim == rank + 1:
        return seq, False
    raise DimensionError(f"expected a rank-{rank} sequence or a batch of them, got {seq.shape}")


def localize(x_seq: Tensor, params: SpatialTemporalTransformer, rng: Optional[np.random.Generator] = None) -> Tensor:
    """[T, h, w, C] -> θ [T, 4] (batched inputs keep their batch axis)"""
    if x_seq.ndim in (0, 1) or x_seq.shape[0] == 0:
        raise EmptySequenceError("localize needs at least one frame")
    batch, unbatched = _batched_sequence(x_seq, 4)
    theta = params.localize(batch, rng)
    return ops.select(theta, 0, 0) if unbatched else theta


def build_affine(theta: Tensor) -> Tensor:
    """(s_x, s_y, τ_x, τ_y) -> [[s_x, 0, τ_x], [0, s_y, τ_y]]; accepts [4] or [N, 4]"""
    if theta.ndim == 1:
        return ops.select(ops.assemble_affine(ops.reshape(theta, (1, 4))), 0, 0)
    return ops.assemble_affine(theta)


def generate_grid(affine: Tensor, out_h: int, out_w: int) -> Tensor:
    """[2, 3] -> [out_h, out_w, 2] (x, y) source coordinates; batched [N, 2, 3] also accepted"""
    if affine.ndim == 2:
        return ops.select(ops.affine_grid(ops.reshape(affine, (1, 2, 3)), out_h, out_w), 0, 0)
    return ops.affine_grid(affine, out_h, out_w)


def bilinear_sample(y: Tensor, grid: Tensor) -> Tensor:
    if y.ndim == 3 and grid.ndim == 3:
        return ops.select(ops.bilinear_sample(ops.reshape(y, (1,) + y.shape), ops.reshape(grid, (1,) + grid.shape)), 0, 0)
    return ops.bilinear_sample(y, grid)


def align_sequence(
    y_seq: Tensor, x_seq: Tensor, params: SpatialTemporalTransformer, rng: Optional[np.random.Generator] = None
) -> Tensor:
    """[T, H1, W1, C1] low-level maps aligned by θ predicted from [T, H2, W2, C2] high-level maps"""
    y_batch, unbatched = _batched_sequence(y_seq, 4)
    x_batch, _ = _batched_sequence(x_seq, 4)
    aligned, _ = params.align(y_batch, x_batch, rng)
    return ops.select(aligned, 0, 0) if unbatched else aligned

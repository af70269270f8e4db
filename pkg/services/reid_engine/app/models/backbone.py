"""
RTRL DESK - Two-stream convolutional backbone
Shared front-end (low-level maps Y) and unshared per-stream tails
(high-level maps X) plus the per-frame descriptor f_t.
"""

from typing import List, Optional

from app.autograd import ops
from app.autograd.tensor import Tensor
from app.core.config import BackboneConfig
from app.core.errors import ContractError, DimensionError
from app.core.seeding import SeedStreams
from app.models.layers import Conv2d, Linear, Module, global_avg_pool

STREAMS = ("main", "aligned")


class ConvStack(Module):
    """[conv k×k + ReLU (+ 2×2 max pool)] per configured width"""

    def __init__(self, in_channels: int, widths: List[int], kernel_size: int, pool: bool, seeds: SeedStreams, name: str):
        super().__init__()
        self.pool = pool
        self.convs = []
        for i, width in enumerate(widths):
            self.convs.append(Conv2d(in_channels, width, kernel_size, seeds, f"{name}.convs.{i}"))
            in_channels = width

    def __call__(self, x: Tensor) -> Tensor:
        for conv in self.convs:
            x = ops.relu(conv(x))
            if self.pool:
                x = ops.max_pool2d(x)
        return x


class StreamTail(Module):
    """Unshared high-level layers of one stream plus its descriptor head"""

    def __init__(self, config: BackboneConfig, seeds: SeedStreams, name: str):
        super().__init__()
        self.stack = ConvStack(config.front_width, config.tail_channels, config.kernel_size, config.tail_pool, seeds, f"{name}.stack")
        self.projection: Optional[Linear] = None
        if config.descriptor_dim is not None:
            self.projection = Linear(config.tail_width, config.descriptor_dim, seeds, f"{name}.projection")

    def __call__(self, y: Tensor) -> Tensor:
        return self.stack(y)

    def descriptor(self, x: Tensor) -> Tensor:
        f = global_avg_pool(x)
        return self.projection(f) if self.projection is not None else f


class Backbone(Module):
    """
    front_end is one module referenced by both streams, so an update to it
    affects both; main_tail and aligned_tail hold disjoint parameters.
    """

    def __init__(self, config: BackboneConfig, seeds: SeedStreams):
        super().__init__()
        self.config = config
        self.front_end = ConvStack(3, config.front_channels, config.kernel_size, config.front_pool, seeds, "backbone.front_end")
        self.main_tail = StreamTail(config, seeds, "backbone.main_tail")
        self.aligned_tail = StreamTail(config, seeds, "backbone.aligned_tail")

    def front(self, frames: Tensor) -> Tensor:
        """[H, W, 3] or [N, H, W, 3] frames -> Y maps"""
        size = self.config.input_size
        if frames.ndim not in (3, 4) or frames.shape[-3:] != (size, size, 3):
            raise DimensionError(f"front_end expects {size}x{size}x3 frames, got {frames.shape}")
        return self.front_end(frames)

    def tail(self, y: Tensor, stream: str) -> Tensor:
        return self._tail(stream)(y)

    def frame_descriptor(self, x: Tensor, stream: str = "main") -> Tensor:
        return self._tail(stream).descriptor(x)

    def _tail(self, stream: str) -> StreamTail:
        if stream == "main":
            return self.main_tail
        if stream == "aligned":
            return self.aligned_tail
        raise ContractError(f"unknown stream '{stream}' (expected one of {STREAMS})")


def front_end(frame: Tensor, backbone: Backbone) -> Tensor:
    return backbone.front(frame)


def tail(y: Tensor, stream: str, backbone: Backbone) -> Tensor:
    return backbone.tail(y, stream)


def frame_descriptor(x: Tensor, backbone: Backbone, stream: str = "main") -> Tensor:
    return backbone.frame_descriptor(x, stream)

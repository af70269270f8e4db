"""
RTRL DESK - Neural building blocks
Module base class, fully connected / conv / normalization layers,
LSTM and BiLSTM recurrences, dropout and global average pooling.
"""

from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from app.autograd import ops
from app.autograd.tensor import Tensor
from app.core.errors import ContractError, DimensionError, EmptySequenceError
from app.core.seeding import SeedStreams
from app.models.init import init_constant, init_gaussian, init_orthogonal


class Module:
    """
    Parameter container. Parameters are Tensor attributes with requires_grad,
    children are Module attributes (or lists of them); names are dotted paths
    in attribute insertion order.
    """

    def __init__(self) -> None:
        self.training = True
        self._buffers: Dict[str, np.ndarray] = {}

    def _children(self) -> Iterator[Tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, list) and value and all(isinstance(v, Module) for v in value):
                for i, child in enumerate(value):
                    yield f"{name}.{i}", child

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
        for name, child in self._children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def parameters(self) -> List[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[Tuple[str, np.ndarray]]:
        for name, value in self._buffers.items():
            yield prefix + name, value
        for name, child in self._children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, child in self._children():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update({name: b for name, b in self.named_buffers()})
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        missing = [name for name in list(params) + list(buffers) if name not in state]
        if missing:
            raise ContractError(f"state is missing {len(missing)} entries, first '{missing[0]}'")
        for name, tensor in params.items():
            if state[name].shape != tensor.shape:
                raise DimensionError(f"'{name}': stored shape {state[name].shape} does not match {tensor.shape}")
            tensor.data[...] = state[name]
        for name, buffer in buffers.items():
            buffer[...] = state[name]


def _constant(array: np.ndarray, like: Tensor) -> Tensor:
    return Tensor._wrap(np.asarray(array, dtype=like.dtype))


def _add_bias(x: Tensor, bias: Tensor) -> Tensor:
    return ops.add(x, ops.broadcast_to(bias, x.shape))


# --- Fully connected ---

class Linear(Module):
    """y = x·W + b with W stored [in, out]"""

    def __init__(
        self,
        in_dim: int,
        out_dim: int,
        seeds: SeedStreams,
        name: str,
        zero_weight: bool = False,
        bias_value: Optional[Sequence[float]] = None,
    ):
        super().__init__()
        self.in_dim = in_dim
        self.out_dim = out_dim
        if zero_weight:
            self.weight = init_constant((in_dim, out_dim), 0.0)
        else:
            self.weight = init_gaussian((in_dim, out_dim), seeds.generator("init", f"{name}.weight"))
        self.bias = init_constant((out_dim,), 0.0)
        if bias_value is not None:
            self.bias.data[...] = np.asarray(bias_value, dtype=self.bias.dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return fully_connected(x, self.weight, self.bias)


def fully_connected(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    if x.shape[-1] != weight.shape[0]:
        raise DimensionError(f"fully_connected: input {x.shape} does not match weight {weight.shape}")
    if x.ndim == 1:
        out = ops.matmul(ops.reshape(x, (1, x.shape[0])), weight)
        return ops.reshape(ops.add(out, ops.reshape(bias, (1, bias.shape[0]))), (bias.shape[0],))
    return _add_bias(ops.matmul(x, weight), bias)


# --- Convolution and normalization ---

class Conv2d(Module):
    """Stride-1 convolution with 'same' zero padding, kernel [k, k, Cin, Cout]"""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, seeds: SeedStreams, name: str):
        super().__init__()
        self.padding = kernel_size // 2
        self.kernel = init_gaussian(
            (kernel_size, kernel_size, in_channels, out_channels), seeds.generator("init", f"{name}.kernel")
        )
        self.bias = init_constant((out_channels,), 0.0)

    def __call__(self, x: Tensor) -> Tensor:
        return _add_bias(ops.conv2d(x, self.kernel, stride=1, padding=self.padding), self.bias)


class Norm2d(Module):
    """
    Batch normalization over every axis but the channel axis.
    Training mode normalizes with batch statistics and updates the running
    estimates; eval mode uses the running estimates.

    per_sample=True normalizes each leading-axis entry over its own spatial
    positions in both modes, so no output row depends on another row of the
    batch. It keeps no running estimates.
    """

    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1, per_sample: bool = False):
        super().__init__()
        self.eps = eps
        self.momentum = momentum
        self.per_sample = per_sample
        self.gamma = init_constant((channels,), 1.0)
        self.beta = init_constant((channels,), 0.0)
        if not per_sample:
            self._buffers["running_mean"] = np.zeros(channels, dtype=self.gamma.dtype)
            self._buffers["running_var"] = np.ones(channels, dtype=self.gamma.dtype)

    def _sample_statistics(self, x: Tensor) -> Tuple[Tensor, Tensor, Tensor]:
        """x [B, ..., C] -> (rows [B, P, C], centered rows, variance broadcast to rows)"""
        channels = x.shape[-1]
        rows = ops.reshape(x, (x.shape[0], -1, channels))
        stat_shape = (rows.shape[0], 1, channels)
        mean = ops.reshape(ops.reduce_mean(rows, axis=1), stat_shape)
        centered = ops.sub(rows, ops.broadcast_to(mean, rows.shape))
        var = ops.reshape(ops.reduce_mean(ops.square(centered), axis=1), stat_shape)
        return rows, centered, ops.broadcast_to(var, rows.shape)

    def __call__(self, x: Tensor) -> Tensor:
        channels = x.shape[-1]
        if self.per_sample:
            flat, centered, var = self._sample_statistics(x)
        else:
            flat = ops.reshape(x, (-1, channels))
            if self.training:
                mean = ops.reduce_mean(flat, axis=0)
                centered = ops.sub(flat, ops.broadcast_to(mean, flat.shape))
                var = ops.reduce_mean(ops.square(centered), axis=0)
                count = flat.shape[0]
                unbiased = var.data * (count / (count - 1)) if count > 1 else var.data
                m = self.momentum
                self._buffers["running_mean"][...] = (1 - m) * self._buffers["running_mean"] + m * mean.data
                self._buffers["running_var"][...] = (1 - m) * self._buffers["running_var"] + m * unbiased
            else:
                centered = ops.sub(flat, ops.broadcast_to(_constant(self._buffers["running_mean"], flat), flat.shape))
                var = _constant(self._buffers["running_var"], flat)
            var = ops.broadcast_to(var, flat.shape)
        eps = _constant(np.full(flat.shape, self.eps), flat)
        std = ops.sqrt(ops.add(var, eps))
        normalized = ops.div(centered, std)
        out = ops.add(
            ops.mul(normalized, ops.broadcast_to(self.gamma, flat.shape)),
            ops.broadcast_to(self.beta, flat.shape),
        )
        return ops.reshape(out, x.shape)


# --- Recurrences ---

class LSTMCell(Module):
    """
    Gate order (input, forget, cell candidate, output).
    w_ih [D, 4H] gaussian, w_hh [H, 4H] orthogonal, forget bias 1.
    """

    def __init__(self, input_dim: int, hidden: int, seeds: SeedStreams, name: str):
        super().__init__()
        self.input_dim = input_dim
        self.hidden = hidden
        self.w_ih = init_gaussian((input_dim, 4 * hidden), seeds.generator("init", f"{name}.w_ih"))
        self.w_hh = init_orthogonal((hidden, 4 * hidden), seeds.generator("init", f"{name}.w_hh"))
        self.bias = init_constant((4 * hidden,), 0.0)
        self.bias.data[hidden:2 * hidden] = 1.0

    def step(self, x: Tensor, h_prev: Tensor, c_prev: Tensor) -> Tuple[Tensor, Tensor]:
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise DimensionError(f"lstm step: input {x.shape} does not match input dim {self.input_dim}")
        if h_prev.shape != (x.shape[0], self.hidden) or c_prev.shape != h_prev.shape:
            raise DimensionError(f"lstm step: states {h_prev.shape}/{c_prev.shape} do not match hidden {self.hidden}")
        H = self.hidden
        gates = _add_bias(ops.add(ops.matmul(x, self.w_ih), ops.matmul(h_prev, self.w_hh)), self.bias)
        i = ops.sigmoid(ops.slice_axis(gates, 1, 0, H))
        f = ops.sigmoid(ops.slice_axis(gates, 1, H, 2 * H))
        g = ops.tanh(ops.slice_axis(gates, 1, 2 * H, 3 * H))
        o = ops.sigmoid(ops.slice_axis(gates, 1, 3 * H, 4 * H))
        c = ops.add(ops.mul(f, c_prev), ops.mul(i, g))
        h = ops.mul(o, ops.tanh(c))
        return h, c

    def run(self, seq: Tensor, reverse: bool = False) -> Tensor:
        """[N, T, D] -> [N, T, H] from zero initial states"""
        n, steps = seq.shape[0], seq.shape[1]
        zeros = _constant(np.zeros((n, self.hidden)), seq)
        h, c = zeros, zeros
        outputs: List[Optional[Tensor]] = [None] * steps
        order = range(steps - 1, -1, -1) if reverse else range(steps)
        for t in order:
            h, c = self.step(ops.select(seq, 1, t), h, c)
            outputs[t] = h
        return ops.stack(outputs, axis=1)


def lstm_cell_step(x: Tensor, h_prev: Tensor, c_prev: Tensor, params: LSTMCell) -> Tuple[Tensor, Tensor]:
    """Single step on unbatched vectors x [D], h_prev [H], c_prev [H]"""
    if x.ndim != 1 or h_prev.ndim != 1 or c_prev.ndim != 1:
        raise DimensionError(f"lstm_cell_step expects vectors, got {x.shape}, {h_prev.shape}, {c_prev.shape}")
    h, c = params.step(
        ops.reshape(x, (1, x.shape[0])),
        ops.reshape(h_prev, (1, h_prev.shape[0])),
        ops.reshape(c_prev, (1, c_prev.shape[0])),
    )
    return ops.reshape(h, (params.hidden,)), ops.reshape(c, (params.hidden,))


SequenceInput = Union[Tensor, Sequence[Tensor]]


def as_sequence_batch(seq: SequenceInput) -> Tuple[Tensor, bool]:
    """Accept [T, D], [N, T, D] or a list of T frame vectors; returns ([N, T, D], unbatched flag)"""
    if not isinstance(seq, Tensor):
        frames = list(seq)
        if not frames:
            raise EmptySequenceError("sequence has no frames")
        seq = ops.stack(frames, axis=0)
    if seq.ndim == 2:
        return ops.reshape(seq, (1,) + seq.shape), True
    if seq.ndim == 3:
        return seq, False
    raise DimensionError(f"expected a [T, D] or [N, T, D] sequence, got {seq.shape}")


class LSTM(Module):
    """Unidirectional recurrence; output dim H"""

    def __init__(self, input_dim: int, hidden: int, seeds: SeedStreams, name: str):
        super().__init__()
        self.fwd = LSTMCell(input_dim, hidden, seeds, f"{name}.fwd")
        self.output_dim = hidden

    def __call__(self, seq: SequenceInput) -> Tensor:
        batch, unbatched = as_sequence_batch(seq)
        out = self.fwd.run(batch)
        return ops.select(out, 0, 0) if unbatched else out


class BiLSTM(Module):
    """Forward and backward recurrences with independent cells; output [h_fw ; h_bw], dim 2H"""

    def __init__(self, input_dim: int, hidden: int, seeds: SeedStreams, name: str):
        super().__init__()
        self.fwd = LSTMCell(input_dim, hidden, seeds, f"{name}.fwd")
        self.bwd = LSTMCell(input_dim, hidden, seeds, f"{name}.bwd")
        self.output_dim = 2 * hidden

    def __call__(self, seq: SequenceInput) -> Tensor:
        batch, unbatched = as_sequence_batch(seq)
        out = ops.concat([self.fwd.run(batch), self.bwd.run(batch, reverse=True)], axis=2)
        return ops.select(out, 0, 0) if unbatched else out


def bilstm_forward(seq: SequenceInput, params: BiLSTM) -> Tensor:
    return params(seq)


def temporal_cell(kind: str, input_dim: int, hidden: int, seeds: SeedStreams, name: str) -> Union[LSTM, BiLSTM]:
    if kind == "bilstm":
        return BiLSTM(input_dim, hidden, seeds, name)
    if kind == "lstm":
        return LSTM(input_dim, hidden, seeds, name)
    raise ContractError(f"unknown temporal cell '{kind}'")


# --- Stateless helpers ---

def dropout(x: Tensor, rate: float, training: bool, rng: Optional[np.random.Generator]) -> Tensor:
    """Inverted dropout; eval mode and rate 0 return x itself"""
    if not 0.0 <= rate < 1.0:
        raise ContractError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ContractError("training-mode dropout needs a random generator")
    keep = rng.random(x.shape) >= rate
    return ops.mul(x, _constant(keep / (1.0 - rate), x))


def global_avg_pool(maps: Tensor) -> Tensor:
    """[H, W, C] -> [C] or [N, H, W, C] -> [N, C]"""
    if maps.ndim not in (3, 4):
        raise DimensionError(f"global_avg_pool expects [H,W,C] or [N,H,W,C], got {maps.shape}")
    axis = maps.ndim - 3
    return ops.reduce_mean(ops.reduce_mean(maps, axis=axis), axis=axis)

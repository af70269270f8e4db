"""
RTRL DESK - Differentiable operations
Forward functions plus the backward rules they register.
Image tensors are channels-last: [H, W, C] or batched [N, H, W, C].
"""

from typing import Any, Optional, Sequence, Tuple, Union

import numpy as np

from app.autograd.tensor import Node, Tensor, is_grad_enabled, register_backward
from app.core.errors import ContractError, DimensionError, NumericError


def _result(op: str, data: np.ndarray, inputs: Sequence[Tensor], **ctx: Any) -> Tensor:
    requires = is_grad_enabled() and any(t.requires_grad for t in inputs)
    out = Tensor._wrap(data, requires_grad=requires)
    if requires:
        out._node = Node(op, tuple(inputs), ctx)
    return out


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _check_axis(op: str, x: Tensor, axis: int) -> int:
    if not 0 <= axis < x.ndim:
        raise DimensionError(f"{op}: axis {axis} out of range for rank-{x.ndim} tensor {x.shape}")
    return axis


# --- Binary elementwise ---

def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _result("add", a.data + b.data, (a, b))


@register_backward("add")
def _add_backward(ctx, inputs, out, g):
    return g, g


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _result("sub", a.data - b.data, (a, b))


@register_backward("sub")
def _sub_backward(ctx, inputs, out, g):
    return g, -g


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    return _result("mul", a.data * b.data, (a, b))


@register_backward("mul")
def _mul_backward(ctx, inputs, out, g):
    a, b = inputs
    return g * b.data, g * a.data


def div(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("div", a, b)
    return _result("div", a.data / b.data, (a, b))


@register_backward("div")
def _div_backward(ctx, inputs, out, g):
    a, b = inputs
    return g / b.data, -g * out / b.data


# --- Unary elementwise ---

def scale(x: Tensor, factor: float) -> Tensor:
    return _result("scale", x.data * x.data.dtype.type(factor), (x,), factor=factor)


@register_backward("scale")
def _scale_backward(ctx, inputs, out, g):
    return (g * g.dtype.type(ctx["factor"]),)


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so exp never overflows
    data = x.data
    out = np.empty_like(data)
    positive = data >= 0
    out[positive] = 1.0 / (1.0 + np.exp(-data[positive]))
    exp_x = np.exp(data[~positive])
    out[~positive] = exp_x / (1.0 + exp_x)
    return _result("sigmoid", out, (x,))


@register_backward("sigmoid")
def _sigmoid_backward(ctx, inputs, out, g):
    return (g * out * (1.0 - out),)


def tanh(x: Tensor) -> Tensor:
    return _result("tanh", np.tanh(x.data), (x,))


@register_backward("tanh")
def _tanh_backward(ctx, inputs, out, g):
    return (g * (1.0 - out * out),)


def relu(x: Tensor) -> Tensor:
    return _result("relu", np.maximum(x.data, 0), (x,))


@register_backward("relu")
def _relu_backward(ctx, inputs, out, g):
    # gradient at exactly 0 is 0
    return (g * (inputs[0].data > 0),)


def exp(x: Tensor) -> Tensor:
    return _result("exp", np.exp(x.data), (x,))


@register_backward("exp")
def _exp_backward(ctx, inputs, out, g):
    return (g * out,)


def log(x: Tensor) -> Tensor:
    return _result("log", np.log(x.data), (x,))


@register_backward("log")
def _log_backward(ctx, inputs, out, g):
    return (g / inputs[0].data,)


def square(x: Tensor) -> Tensor:
    return _result("square", x.data * x.data, (x,))


@register_backward("square")
def _square_backward(ctx, inputs, out, g):
    return (g * 2.0 * inputs[0].data,)


def sqrt(x: Tensor) -> Tensor:
    return _result("sqrt", np.sqrt(x.data), (x,))


@register_backward("sqrt")
def _sqrt_backward(ctx, inputs, out, g):
    return (g * 0.5 / out,)


def clamp(x: Tensor, low: Optional[float] = None, high: Optional[float] = None) -> Tensor:
    return _result("clamp", np.clip(x.data, low, high), (x,), low=low, high=high)


@register_backward("clamp")
def _clamp_backward(ctx, inputs, out, g):
    data = inputs[0].data
    inside = np.ones(data.shape, dtype=bool)
    if ctx["low"] is not None:
        inside &= data >= ctx["low"]
    if ctx["high"] is not None:
        inside &= data <= ctx["high"]
    return (g * inside,)


_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}
_UNARY = {"sigmoid": sigmoid, "tanh": tanh, "relu": relu, "exp": exp, "log": log, "square": square, "sqrt": sqrt}


def elementwise(kind: str, *operands: Tensor, factor: Optional[float] = None) -> Tensor:
    """Dispatch by op kind: add, sub, mul, div, sigmoid, tanh, relu, exp, log, square, sqrt, scale"""
    if kind in _BINARY:
        if len(operands) != 2:
            raise ContractError(f"elementwise '{kind}' takes 2 operands, got {len(operands)}")
        return _BINARY[kind](*operands)
    if kind == "scale":
        if len(operands) != 1 or factor is None:
            raise ContractError("elementwise 'scale' takes 1 operand and a factor")
        return scale(operands[0], factor)
    if kind in _UNARY:
        if len(operands) != 1:
            raise ContractError(f"elementwise '{kind}' takes 1 operand, got {len(operands)}")
        return _UNARY[kind](operands[0])
    raise ContractError(f"unknown elementwise op '{kind}'")


# --- Linear algebra ---

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return _result("matmul", a.data @ b.data, (a, b))


@register_backward("matmul")
def _matmul_backward(ctx, inputs, out, g):
    a, b = inputs
    return g @ b.data.T, a.data.T @ g


# --- Shape manipulation ---

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        data = x.data.reshape(tuple(shape))
    except ValueError:
        raise DimensionError(f"reshape: cannot reshape {x.shape} into {tuple(shape)}") from None
    return _result("reshape", data, (x,))


@register_backward("reshape")
def _reshape_backward(ctx, inputs, out, g):
    return (g.reshape(inputs[0].shape),)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise DimensionError(f"transpose: {axes} is not a permutation for shape {x.shape}")
    return _result("transpose", np.transpose(x.data, axes), (x,), axes=axes)


@register_backward("transpose")
def _transpose_backward(ctx, inputs, out, g):
    return (np.transpose(g, np.argsort(ctx["axes"])),)


def broadcast_to(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        data = np.broadcast_to(x.data, shape)
    except ValueError:
        raise DimensionError(f"broadcast_to: cannot broadcast {x.shape} to {shape}") from None
    return _result("broadcast_to", data.copy(), (x,))


@register_backward("broadcast_to")
def _broadcast_backward(ctx, inputs, out, g):
    target = inputs[0].shape
    lead = g.ndim - len(target)
    grad = g.sum(axis=tuple(range(lead))) if lead else g
    axes = tuple(i for i, dim in enumerate(target) if dim == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return (grad,)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    if not tensors:
        raise ContractError("concat needs at least one tensor")
    _check_axis("concat", tensors[0], axis)
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise DimensionError(f"concat: incompatible shapes {[t.shape for t in tensors]} on axis {axis}") from None
    sizes = [t.shape[axis] for t in tensors]
    return _result("concat", data, tuple(tensors), axis=axis, sizes=sizes)


@register_backward("concat")
def _concat_backward(ctx, inputs, out, g):
    bounds = np.cumsum(ctx["sizes"])[:-1]
    return tuple(np.split(g, bounds, axis=ctx["axis"]))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ContractError("stack needs at least one tensor")
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise DimensionError(f"stack: shapes differ {sorted(shapes)}")
    return _result("stack", np.stack([t.data for t in tensors], axis=axis), tuple(tensors), axis=axis)


@register_backward("stack")
def _stack_backward(ctx, inputs, out, g):
    axis = ctx["axis"]
    return tuple(np.take(g, i, axis=axis) for i in range(len(inputs)))


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    _check_axis("slice_axis", x, axis)
    if not 0 <= start < stop <= x.shape[axis]:
        raise DimensionError(f"slice_axis: [{start}:{stop}] out of range for axis {axis} of {x.shape}")
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, stop)
    return _result("slice_axis", x.data[tuple(index)], (x,), index=tuple(index))


@register_backward("slice_axis")
def _slice_backward(ctx, inputs, out, g):
    grad = np.zeros_like(inputs[0].data, dtype=g.dtype)
    grad[ctx["index"]] = g
    return (grad,)


def select(x: Tensor, axis: int, index: int) -> Tensor:
    """Take one position along axis and drop that axis"""
    _check_axis("select", x, axis)
    if not 0 <= index < x.shape[axis]:
        raise DimensionError(f"select: index {index} out of range for axis {axis} of {x.shape}")
    return _result("select", np.take(x.data, index, axis=axis), (x,), axis=axis, index=index)


@register_backward("select")
def _select_backward(ctx, inputs, out, g):
    grad = np.zeros_like(inputs[0].data, dtype=g.dtype)
    index = [slice(None)] * grad.ndim
    index[ctx["axis"]] = ctx["index"]
    grad[tuple(index)] = g
    return (grad,)


# --- Reductions ---

def reduce_mean(x: Tensor, axis: int) -> Tensor:
    _check_axis("reduce_mean", x, axis)
    return _result("reduce_mean", x.data.mean(axis=axis), (x,), axis=axis)


@register_backward("reduce_mean")
def _mean_backward(ctx, inputs, out, g):
    axis = ctx["axis"]
    shape = inputs[0].shape
    grad = np.expand_dims(g, axis) / shape[axis]
    return (np.broadcast_to(grad, shape).copy(),)


def reduce_sum(x: Tensor, axis: Optional[int] = None) -> Tensor:
    if axis is not None:
        _check_axis("reduce_sum", x, axis)
    return _result("reduce_sum", np.asarray(x.data.sum(axis=axis)), (x,), axis=axis)


@register_backward("reduce_sum")
def _sum_backward(ctx, inputs, out, g):
    shape = inputs[0].shape
    grad = g if ctx["axis"] is None else np.expand_dims(g, ctx["axis"])
    return (np.broadcast_to(grad, shape).copy(),)


# --- Convolution and pooling ---

def _as_batch(op: str, x: Tensor) -> Tuple[Tensor, bool]:
    if x.ndim == 3:
        return reshape(x, (1,) + x.shape), True
    if x.ndim == 4:
        return x, False
    raise DimensionError(f"{op}: expected [H,W,C] or [N,H,W,C], got {x.shape}")


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation with zero padding; kernel is [kH, kW, Cin, Cout]"""
    if stride < 1 or padding < 0:
        raise ContractError(f"conv2d: stride must be positive and padding nonnegative (got {stride}, {padding})")
    batch, squeezed = _as_batch("conv2d", x)
    if kernel.ndim != 4 or kernel.shape[2] != batch.shape[3]:
        raise DimensionError(f"conv2d: kernel {kernel.shape} does not match input channels of {x.shape}")
    n, h, w, cin = batch.shape
    kh, kw, _, cout = kernel.shape
    out_h = (h + 2 * padding - kh) // stride + 1
    out_w = (w + 2 * padding - kw) // stride + 1
    if out_h < 1 or out_w < 1:
        raise DimensionError(f"conv2d: kernel {kh}x{kw} with padding {padding} yields empty output for input {x.shape}")

    padded = batch.data
    if padding:
        padded = np.pad(padded, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    windows = np.lib.stride_tricks.sliding_window_view(padded, (kh, kw), axis=(1, 2))
    windows = windows[:, ::stride, ::stride][:, :out_h, :out_w]
    cols = windows.transpose(0, 1, 2, 4, 5, 3).reshape(n * out_h * out_w, kh * kw * cin)
    weights = kernel.data.reshape(kh * kw * cin, cout)
    data = (cols @ weights).reshape(n, out_h, out_w, cout)
    out = _result(
        "conv2d", data, (batch, kernel),
        cols=cols, stride=stride, padding=padding, padded_shape=padded.shape,
    )
    return reshape(out, out.shape[1:]) if squeezed else out


@register_backward("conv2d")
def _conv2d_backward(ctx, inputs, out, g):
    batch, kernel = inputs
    kh, kw, cin, cout = kernel.shape
    n, out_h, out_w, _ = g.shape
    stride, padding = ctx["stride"], ctx["padding"]
    g2 = g.reshape(-1, cout)

    grad_kernel = None
    if kernel.requires_grad:
        grad_kernel = (ctx["cols"].T @ g2).reshape(kernel.shape)

    grad_input = None
    if batch.requires_grad:
        dcols = (g2 @ kernel.data.reshape(kh * kw * cin, cout).T).reshape(n, out_h, out_w, kh, kw, cin)
        dpad = np.zeros(ctx["padded_shape"], dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                dpad[:, i:i + stride * out_h:stride, j:j + stride * out_w:stride, :] += dcols[:, :, :, i, j, :]
        h, w = batch.shape[1], batch.shape[2]
        grad_input = dpad[:, padding:padding + h, padding:padding + w, :]
    return grad_input, grad_kernel


def max_pool2d(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2; ties go to the first position in row-major window order"""
    batch, squeezed = _as_batch("max_pool2d", x)
    n, h, w, c = batch.shape
    if h % 2 or w % 2:
        raise DimensionError(f"max_pool2d: spatial size {h}x{w} is not divisible by 2")
    windows = batch.data.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 2, 4, 5).reshape(n, h // 2, w // 2, 4, c)
    winner = windows.argmax(axis=3)
    data = np.take_along_axis(windows, winner[:, :, :, None, :], axis=3)[:, :, :, 0, :]
    out = _result("max_pool2d", data, (batch,), winner=winner)
    return reshape(out, out.shape[1:]) if squeezed else out


@register_backward("max_pool2d")
def _max_pool_backward(ctx, inputs, out, g):
    n, h, w, c = inputs[0].shape
    windows = np.zeros((n, h // 2, w // 2, 4, c), dtype=g.dtype)
    np.put_along_axis(windows, ctx["winner"][:, :, :, None, :], g[:, :, :, None, :], axis=3)
    grad = windows.reshape(n, h // 2, w // 2, 2, 2, c).transpose(0, 1, 3, 2, 4, 5).reshape(n, h, w, c)
    return (grad,)


# --- Spatial transformer primitives ---

def assemble_affine(theta: Tensor) -> Tensor:
    """[N,4] (s_x, s_y, t_x, t_y) -> [N,2,3] [[s_x, 0, t_x], [0, s_y, t_y]]"""
    if theta.ndim != 2 or theta.shape[1] != 4:
        raise DimensionError(f"assemble_affine: expected [N,4] parameters, got {theta.shape}")
    n = theta.shape[0]
    data = np.zeros((n, 2, 3), dtype=theta.dtype)
    data[:, 0, 0] = theta.data[:, 0]
    data[:, 1, 1] = theta.data[:, 1]
    data[:, 0, 2] = theta.data[:, 2]
    data[:, 1, 2] = theta.data[:, 3]
    return _result("assemble_affine", data, (theta,))


@register_backward("assemble_affine")
def _assemble_backward(ctx, inputs, out, g):
    return (np.stack([g[:, 0, 0], g[:, 1, 1], g[:, 0, 2], g[:, 1, 2]], axis=1),)


def normalized_coords(size: int, dtype: type = np.float64) -> np.ndarray:
    """Corner-aligned coordinates -1 + 2j/(size-1); a single pixel sits at 0"""
    if size == 1:
        return np.zeros(1, dtype=dtype)
    return (-1.0 + 2.0 * np.arange(size, dtype=np.float64) / (size - 1)).astype(dtype)


def affine_grid(affine: Tensor, out_h: int, out_w: int) -> Tensor:
    """[N,2,3] affine -> [N,out_h,out_w,2] source (x, y) per target pixel"""
    if out_h < 1 or out_w < 1:
        raise DimensionError(f"affine_grid: output size must be positive, got {out_h}x{out_w}")
    if affine.ndim != 3 or affine.shape[1:] != (2, 3):
        raise DimensionError(f"affine_grid: expected [N,2,3] affine, got {affine.shape}")
    ys = normalized_coords(out_h, affine.dtype)
    xs = normalized_coords(out_w, affine.dtype)
    base = np.stack(
        [np.broadcast_to(xs[None, :], (out_h, out_w)), np.broadcast_to(ys[:, None], (out_h, out_w)), np.ones((out_h, out_w), dtype=affine.dtype)],
        axis=-1,
    )
    data = np.einsum("nkc,hwc->nhwk", affine.data, base)
    return _result("affine_grid", data, (affine,), base=base)


@register_backward("affine_grid")
def _affine_grid_backward(ctx, inputs, out, g):
    return (np.einsum("nhwk,hwc->nkc", g, ctx["base"]),)


def bilinear_sample(source: Tensor, grid: Tensor) -> Tensor:
    """
    Sample [N,H,W,C] maps at [N,oh,ow,2] normalized (x, y) locations.
    Neighbours outside the map contribute zero.
    """
    if source.ndim != 4 or grid.ndim != 4 or grid.shape[3] != 2 or grid.shape[0] != source.shape[0]:
        raise DimensionError(f"bilinear_sample: incompatible source {source.shape} and grid {grid.shape}")
    if not np.all(np.isfinite(grid.data)):
        raise NumericError("bilinear_sample: sampling grid contains non-finite coordinates")
    n, h, w, c = source.shape
    px = (grid.data[..., 0] + 1.0) * 0.5 * (w - 1)
    py = (grid.data[..., 1] + 1.0) * 0.5 * (h - 1)
    x0 = np.floor(np.clip(px, -2.0, w + 1.0))
    y0 = np.floor(np.clip(py, -2.0, h + 1.0))
    wx1 = px - x0
    wy1 = py - y0
    wx0 = 1.0 - wx1
    wy0 = 1.0 - wy1
    batch_index = np.arange(n)[:, None, None]

    corners = []
    for dy, dx in ((0, 0), (0, 1), (1, 0), (1, 1)):
        xc = x0 + dx
        yc = y0 + dy
        valid = (xc >= 0) & (xc < w) & (yc >= 0) & (yc < h)
        xi = np.clip(xc, 0, w - 1).astype(np.int64)
        yi = np.clip(yc, 0, h - 1).astype(np.int64)
        values = source.data[batch_index, yi, xi] * valid[..., None]
        corners.append((yi, xi, valid, values))

    weights = (wy0 * wx0, wy0 * wx1, wy1 * wx0, wy1 * wx1)
    data = np.zeros((n,) + grid.shape[1:3] + (c,), dtype=source.dtype)
    for weight, (_, _, _, values) in zip(weights, corners):
        data += weight[..., None] * values
    return _result(
        "bilinear_sample", data, (source, grid),
        corners=corners, weights=weights, wx=(wx0, wx1), wy=(wy0, wy1), batch_index=batch_index,
    )


@register_backward("bilinear_sample")
def _bilinear_backward(ctx, inputs, out, g):
    source, grid = inputs
    n, h, w, c = source.shape
    corners, weights = ctx["corners"], ctx["weights"]

    grad_source = None
    if source.requires_grad:
        grad_source = np.zeros_like(source.data, dtype=g.dtype)
        for weight, (yi, xi, valid, _) in zip(weights, corners):
            np.add.at(grad_source, (ctx["batch_index"], yi, xi), g * (weight * valid)[..., None])

    grad_grid = None
    if grid.requires_grad:
        wx0, wx1 = ctx["wx"]
        wy0, wy1 = ctx["wy"]
        v00, v01, v10, v11 = (values for _, _, _, values in corners)
        d_px = (g * (wy0[..., None] * (v01 - v00) + wy1[..., None] * (v11 - v10))).sum(axis=-1)
        d_py = (g * (wx0[..., None] * (v10 - v00) + wx1[..., None] * (v11 - v01))).sum(axis=-1)
        grad_grid = np.stack([d_px * 0.5 * (w - 1), d_py * 0.5 * (h - 1)], axis=-1)
    return grad_source, grad_grid


# --- Losses ---

def softmax_cross_entropy(logits: Tensor, labels: Union[int, Sequence[int], np.ndarray]) -> Tensor:
    """Mean of -log softmax(logits)[label] over rows; [K] logits take a single int label"""
    if logits.ndim == 1:
        logits = reshape(logits, (1, logits.shape[0]))
    if logits.ndim != 2:
        raise DimensionError(f"softmax_cross_entropy: expected [N,K] logits, got {logits.shape}")
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    n, k = logits.shape
    if labels.shape != (n,):
        raise DimensionError(f"softmax_cross_entropy: {labels.shape[0]} labels for {n} rows")
    if labels.min() < 0 or labels.max() >= k:
        raise ContractError(f"softmax_cross_entropy: label out of range [0, {k}): {labels.tolist()}")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    exp_shifted = np.exp(shifted)
    total = exp_shifted.sum(axis=1)
    per_row = np.log(total) - shifted[np.arange(n), labels]
    probs = exp_shifted / total[:, None]
    return _result("softmax_cross_entropy", np.asarray(per_row.mean()), (logits,), probs=probs, labels=labels)


@register_backward("softmax_cross_entropy")
def _xent_backward(ctx, inputs, out, g):
    probs = ctx["probs"].copy()
    labels = ctx["labels"]
    probs[np.arange(labels.shape[0]), labels] -= 1.0
    return (probs * (g / labels.shape[0]),)

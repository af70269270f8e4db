"""
RTRL DESK - Gradient verification
Central finite differences against the recorded backward pass.
"""

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
from loguru import logger

from app.autograd.tensor import Tensor, backward, no_grad
from app.core.errors import ContractError, NumericError

ABSOLUTE_FALLBACK = 1e-8


def relative_error(analytic: float, numeric: float) -> float:
    """|a - n| / max(|a|, |n|), plain |a - n| when both are below 1e-8"""
    scale = max(abs(analytic), abs(numeric))
    if scale < ABSOLUTE_FALLBACK:
        return abs(analytic - numeric)
    return abs(analytic - numeric) / scale


def _scalar(value: Tensor) -> float:
    if value.size != 1:
        raise ContractError(f"gradient check needs a scalar-valued function, got shape {value.shape}")
    result = value.item()
    if not np.isfinite(result):
        raise NumericError(f"function value is not finite ({result})")
    return result


def _central_difference(f: Callable[[], Tensor], target: Tensor, index: tuple, step: float) -> float:
    original = target.data[index]
    with no_grad():
        target.data[index] = original + step
        plus = _scalar(f())
        target.data[index] = original - step
        minus = _scalar(f())
    target.data[index] = original
    return (plus - minus) / (2.0 * step)


def finite_difference_check(f: Callable[[Tensor], Tensor], point: Tensor, step: float = 1e-6) -> float:
    """
    Max relative deviation between backward() and central differences of a
    scalar function f at point, over every coordinate of point.
    """
    if step <= 0:
        raise ContractError(f"finite-difference step must be positive, got {step}")
    x = Tensor._wrap(point.data.copy(), requires_grad=True)
    value = f(x)
    _scalar(value)
    if value.requires_grad:
        backward(value)
    analytic = x.grad.copy()

    worst = 0.0
    for index in np.ndindex(*x.shape):
        numeric = _central_difference(lambda: f(x), x, index, step)
        worst = max(worst, relative_error(float(analytic[index]), numeric))
    return worst


@dataclass
class BlockResult:
    name: str
    max_error: float
    coordinates: int


@dataclass
class GradCheckReport:
    tolerance: float
    blocks: List[BlockResult] = field(default_factory=list)

    @property
    def max_error(self) -> float:
        return max((b.max_error for b in self.blocks), default=0.0)

    @property
    def worst_block(self) -> Optional[BlockResult]:
        if not self.blocks:
            return None
        return max(self.blocks, key=lambda b: b.max_error)

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tolerance

    def lines(self) -> List[str]:
        rows = [f"{b.name:<48} {b.coordinates:>5} coords  max rel err {b.max_error:.3e}" for b in self.blocks]
        worst = self.worst_block
        verdict = "PASS" if self.passed else "FAIL"
        if worst is not None:
            rows.append(f"{verdict}: max relative error {self.max_error:.3e} (tolerance {self.tolerance:.0e}) in '{worst.name}'")
        return rows


def check_parameter_blocks(
    loss_fn: Callable[[], Tensor],
    params: Dict[str, Tensor],
    rng: np.random.Generator,
    step: float = 1e-5,
    coords_per_block: int = 8,
    tolerance: float = 1e-4,
    names: Optional[Sequence[str]] = None,
) -> GradCheckReport:
    """
    Compare backward() with central differences for sampled coordinates of
    every named parameter block. loss_fn must rebuild the graph on each call.
    """
    for tensor in params.values():
        tensor.grad = None
    loss = loss_fn()
    _scalar(loss)
    backward(loss)

    report = GradCheckReport(tolerance=tolerance)
    for name in names or list(params):
        tensor = params[name]
        analytic = tensor.grad.copy()
        flat = np.arange(tensor.size)
        if tensor.size > coords_per_block:
            flat = np.sort(rng.choice(tensor.size, size=coords_per_block, replace=False))
        worst = 0.0
        for position in flat:
            index = np.unravel_index(int(position), tensor.shape)
            numeric = _central_difference(loss_fn, tensor, index, step)
            worst = max(worst, relative_error(float(analytic[index]), numeric))
        report.blocks.append(BlockResult(name=name, max_error=worst, coordinates=len(flat)))
        logger.debug(f"🔬 {name}: {len(flat)} coords, max rel err {worst:.3e}")
    return report

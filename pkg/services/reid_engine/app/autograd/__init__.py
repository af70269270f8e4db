from app.autograd import ops
from app.autograd.tensor import (
    BACKWARD_RULES,
    Graph,
    Tensor,
    backward,
    get_default_dtype,
    is_grad_enabled,
    no_grad,
    precision,
    register_backward,
    set_default_dtype,
    zero_grad,
)

__all__ = [
    "BACKWARD_RULES",
    "Graph",
    "Tensor",
    "backward",
    "get_default_dtype",
    "is_grad_enabled",
    "no_grad",
    "ops",
    "precision",
    "register_backward",
    "set_default_dtype",
    "zero_grad",
]

"""
Identity supervision for both training stages.
"""

from typing import Dict, Sequence, Union

import numpy as np

from app.autograd import ops
from app.autograd.tensor import Tensor
from app.core.errors import ContractError
from app.models.two_stream import ForwardResult, TwoStreamReID


def softmax_xent_loss(logits: Tensor, label: Union[int, Sequence[int], np.ndarray]) -> Tensor:
    """-log softmax(logits)[label]; [N, K] logits with N labels give the mean over rows"""
    return ops.softmax_cross_entropy(logits, label)


def frame_loss(model: TwoStreamReID, result: ForwardResult, labels: np.ndarray) -> Tensor:
    """Stage 1: every frame of sequence n carries label n"""
    frame_labels = np.repeat(np.asarray(labels, dtype=np.int64), result.frames)
    return softmax_xent_loss(model.frame_logits(result), frame_labels)


def stream_weights(beta: float) -> Dict[str, float]:
    return {"main": beta, "aligned": 1.0 - beta}


def sequence_loss(model: TwoStreamReID, result: ForwardResult, labels: np.ndarray) -> Tensor:
    """
    Stage 2: one classifier per stream on that stream's sequence vector,
    losses summed with equal weight. A stream with zero fusion weight is
    left out.
    """
    if result.main is None or result.aligned is None:
        raise ContractError("sequence_loss needs a sequence-level forward pass")
    logits = model.sequence_logits(result)
    weights = stream_weights(model.config.ablation.beta)
    terms = [softmax_xent_loss(logits[s], labels) for s in ("main", "aligned") if weights[s] > 0.0]
    total = terms[0]
    for term in terms[1:]:
        total = ops.add(total, term)
    return total

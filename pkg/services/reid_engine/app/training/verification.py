"""
Full-model gradient check on a tiny instance: 2 identities, 2 frames,
8×8 frames, 64-bit precision, dropout off. The loss is the stage-1 frame
loss plus the stage-2 sequence loss so every parameter block is covered.
"""

import numpy as np
from loguru import logger

from app.autograd.gradcheck import GradCheckReport, check_parameter_blocks
from app.autograd.tensor import Tensor, precision
from app.core.config import ArchitectureConfig
from app.core.seeding import SeedStreams
from app.models.two_stream import TwoStreamReID, toy_architecture
from app.training.losses import frame_loss, sequence_loss

GRADCHECK_TOLERANCE = 1e-4


def perturb_parameters(model: TwoStreamReID, rng: np.random.Generator, scale: float = 0.1) -> None:
    """Move every parameter off its initialization (zero FC weights, exact identity θ)"""
    for _, param in model.named_parameters():
        param.data += rng.normal(0.0, scale, size=param.shape).astype(param.dtype)


def run_model_gradcheck(
    config: ArchitectureConfig,
    seed: int = 0,
    step: float = 1e-5,
    coords_per_block: int = 8,
    tolerance: float = GRADCHECK_TOLERANCE,
    num_identities: int = 2,
    frames: int = 2,
) -> GradCheckReport:
    toy = toy_architecture(config)
    seeds = SeedStreams(seed)
    with precision("float64"):
        model = TwoStreamReID(toy, num_identities, seeds)
        perturb_parameters(model, seeds.generator("init", "gradcheck.perturb"))
        size = toy.backbone.input_size
        clips = seeds.generator("sampling", "gradcheck.frames").uniform(0.0, 1.0, size=(num_identities, frames, size, size, 3))
        inputs = Tensor(clips)
        labels = np.arange(num_identities)
        model.train()

        def loss_fn() -> Tensor:
            result = model.forward(inputs)
            return frame_loss(model, result, labels) + sequence_loss(model, result, labels)

        params = dict(model.named_parameters())
        logger.info(f"🔬 Gradient check over {len(params)} parameter blocks ({model.num_parameters()} parameters)")
        report = check_parameter_blocks(
            loss_fn, params, seeds.generator("sampling", "gradcheck.coords"),
            step=step, coords_per_block=coords_per_block, tolerance=tolerance,
        )
    worst = report.worst_block
    if report.passed:
        logger.success(f"✅ Gradient check passed: max relative error {report.max_error:.3e}")
    else:
        logger.error(f"❌ Gradient check failed: {report.max_error:.3e} in '{worst.name if worst else '?'}'")
    return report

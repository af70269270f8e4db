"""
RTRL DESK - Two-stage training

Stage 1 pretrains the front-end convs and the ST²N with per-frame identity
supervision through a temporary frame head. Stage 2 starts from those
parameters and trains the whole two-stream model with sequence-level
supervision at the lower learning rate.

Each stage writes <output_dir>/stage<n>.ckpt every checkpoint_interval
iterations and at its end, and appends to <output_dir>/loss_log.csv.
Batch i and its dropout draws depend only on (seed, stage, i), so a resumed
stage continues on the same trajectory.
"""

from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from loguru import logger

from app.analysis.protocols import split_identities
from app.autograd.tensor import Tensor, backward
from app.core.config import RunConfig
from app.core.errors import CheckpointError, DatasetError, NumericError
from app.core.seeding import SeedStreams
from app.models.schemas import LossRecord
from app.models.two_stream import STAGE_GROUPS, TwoStreamReID, analytic_parameter_count
from app.services.dataset import DatasetIndex, load_dataset
from app.training.checkpoint import Checkpoint, load_checkpoint, meta_block, save_checkpoint, text_block
from app.training.losses import frame_loss, sequence_loss
from app.training.optimizer import Adam
from app.training.sampler import SequenceSampler

LOSS_LOG = "loss_log.csv"
LOSS_COLUMNS = ["iteration", "stage", "loss"]


@dataclass
class TrainingResult:
    model: TwoStreamReID
    identities: List[int]
    losses: List[LossRecord] = field(default_factory=list)


def checkpoint_path(config: RunConfig, stage: int) -> Path:
    return Path(config.run.output_dir) / f"stage{stage}.ckpt"


def identity_labels(identities: Sequence[int]) -> Dict[int, int]:
    return {identity: label for label, identity in enumerate(sorted(identities))}


def training_identities(dataset: DatasetIndex, config: RunConfig) -> List[int]:
    """Training half of the configured protocol (trial 0 for half10)"""
    train, _ = split_identities(
        dataset.identities(), config.eval.protocol, SeedStreams(config.run.seed),
        trial=0, fixed_train=config.eval.fixed_train_identities,
    )
    return train


def build_model(config: RunConfig, num_classes: int) -> TwoStreamReID:
    architecture = config.architecture()
    model = TwoStreamReID(architecture, num_classes, SeedStreams(config.run.seed))
    expected = analytic_parameter_count(architecture, num_classes)
    logger.info(f"📊 Model parameters: {model.num_parameters():,} (analytic {expected:,}), {num_classes} classes")
    return model


# ============================================================
# CHECKPOINT STATE
# ============================================================

def build_checkpoint(
    model: TwoStreamReID,
    optimizer: Adam,
    config: RunConfig,
    stage: int,
    iteration: int,
    identities: Sequence[int],
) -> Checkpoint:
    blocks: Dict[str, np.ndarray] = {}
    for name, param in model.named_parameters():
        blocks[f"param.{name}"] = param.data
    for name, buffer in model.named_buffers():
        blocks[f"buffer.{name}"] = buffer
    for name in optimizer.state.m:
        blocks[f"adam.m.{name}"] = optimizer.state.m[name]
        blocks[f"adam.v.{name}"] = optimizer.state.v[name]
    blocks["meta.stage"] = meta_block(stage)
    blocks["meta.iteration"] = meta_block(iteration)
    blocks["meta.adam_step"] = meta_block(optimizer.state.step)
    blocks["meta.num_classes"] = meta_block(model.num_classes)
    blocks["meta.train_identities"] = np.asarray(sorted(identities), dtype=np.float64)
    blocks["meta.config"] = text_block(config.portable_text())
    return Checkpoint(digest=config.digest(), blocks=blocks)


def restore_model(model: TwoStreamReID, checkpoint: Checkpoint) -> None:
    model.load_state_dict({**checkpoint.section("param"), **checkpoint.section("buffer")})


def restore_optimizer(optimizer: Adam, checkpoint: Checkpoint) -> None:
    moments_m = checkpoint.section("adam.m")
    moments_v = checkpoint.section("adam.v")
    for name, _ in optimizer.params:
        if name in moments_m:
            optimizer.state.m[name] = moments_m[name].copy()
            optimizer.state.v[name] = moments_v[name].copy()
    optimizer.state.step = int(checkpoint.meta("adam_step"))


def load_model(config: RunConfig, path: Union[str, Path]) -> Tuple[TwoStreamReID, List[int]]:
    """Model and training identities from a checkpoint written under the same config"""
    checkpoint = load_checkpoint(path, config.digest())
    model = build_model(config, int(checkpoint.meta("num_classes")))
    restore_model(model, checkpoint)
    logger.info(f"📂 Loaded {path} (stage {int(checkpoint.meta('stage'))}, iteration {int(checkpoint.meta('iteration'))})")
    return model, checkpoint.train_identities()


# ============================================================
# LOSS LOG
# ============================================================

def read_loss_log(path: Path) -> pd.DataFrame:
    if not path.exists():
        return pd.DataFrame(columns=LOSS_COLUMNS)
    return pd.read_csv(path)


def write_loss_log(path: Path, frame: pd.DataFrame) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    frame[LOSS_COLUMNS].to_csv(path, index=False, float_format="%.8e")


def _log_prefix(path: Path, stage: int, keep_through: int) -> pd.DataFrame:
    """Rows of earlier stages plus this stage's rows up to keep_through"""
    previous = read_loss_log(path)
    if previous.empty:
        return previous
    keep = (previous["stage"] < stage) | ((previous["stage"] == stage) & (previous["iteration"] <= keep_through))
    return previous[keep].reset_index(drop=True)


# ============================================================
# STAGES
# ============================================================

def _stage_settings(config: RunConfig, stage: int) -> Tuple[float, int]:
    if stage == 1:
        return config.train.stage1_lr, config.train.stage1_iterations
    return config.train.stage2_lr, config.train.stage2_iterations


def run_stage(
    model: TwoStreamReID,
    dataset: DatasetIndex,
    config: RunConfig,
    identities: Sequence[int],
    stage: int,
    resume: bool = False,
) -> List[LossRecord]:
    lr, iterations = _stage_settings(config, stage)
    train_cfg = config.train
    seeds = SeedStreams(config.run.seed)
    params = model.stage_parameters(stage)
    optimizer = Adam(params, lr, train_cfg.adam_beta1, train_cfg.adam_beta2, train_cfg.adam_eps)
    ckpt_path = checkpoint_path(config, stage)
    log_path = Path(config.run.output_dir) / LOSS_LOG

    start = 0
    resumed = resume and ckpt_path.exists()
    if resumed:
        checkpoint = load_checkpoint(ckpt_path, config.digest())
        if checkpoint.train_identities() != sorted(identities):
            raise CheckpointError(f"{ckpt_path} was trained on different identities")
        restore_model(model, checkpoint)
        restore_optimizer(optimizer, checkpoint)
        start = int(checkpoint.meta("iteration"))
        logger.info(f"📂 Resuming stage {stage} from iteration {start}")
    history = _log_prefix(log_path, stage, start)

    records = dataset.select(identities)
    sampler = SequenceSampler(dataset, records, identity_labels(identities), train_cfg.frames, train_cfg.batch_size, seeds, stage)
    groups = ", ".join(STAGE_GROUPS[stage])
    logger.info(f"🚀 Stage {stage}: {iterations} iterations at lr {lr:g} on {len(records)} sequences [{groups}]")

    losses: List[LossRecord] = []

    def flush(iteration: int) -> None:
        save_checkpoint(ckpt_path, build_checkpoint(model, optimizer, config, stage, iteration, identities))
        rows = pd.DataFrame([r.model_dump() for r in losses], columns=LOSS_COLUMNS)
        write_loss_log(log_path, pd.concat([history, rows], ignore_index=True) if not history.empty else rows)

    model.train()
    for iteration in range(start + 1, iterations + 1):
        frames, labels = sampler.batch(iteration)
        for param in model.parameters():
            param.grad = None
        result = model.forward(Tensor(frames), seeds.generator("dropout", stage, iteration), sequence_level=stage == 2)
        loss = frame_loss(model, result, labels) if stage == 1 else sequence_loss(model, result, labels)
        value = loss.item()
        if not np.isfinite(value):
            raise NumericError(f"stage {stage} loss is {value} at iteration {iteration}")
        backward(loss)
        optimizer.step(train_cfg.clip)
        losses.append(LossRecord(iteration=iteration, stage=stage, loss=value))

        if iteration % train_cfg.log_interval == 0 or iteration == iterations:
            window = [r.loss for r in losses[-train_cfg.log_interval:]]
            logger.info(f"📊 Stage {stage} [{iteration}/{iterations}] loss {value:.6f} (trailing mean {np.mean(window):.6f})")
        if iteration % train_cfg.checkpoint_interval == 0 and iteration != iterations:
            flush(iteration)

    if resumed and start >= iterations:
        logger.info(f"⏭️ Stage {stage} already complete in {ckpt_path}")
        return losses
    flush(iterations)
    logger.success(f"✅ Stage {stage} finished")
    return losses


def stage1_pretrain(model: TwoStreamReID, dataset: DatasetIndex, config: RunConfig, identities: Sequence[int], resume: bool = False) -> List[LossRecord]:
    return run_stage(model, dataset, config, identities, 1, resume)


def stage2_joint_train(model: TwoStreamReID, dataset: DatasetIndex, config: RunConfig, identities: Sequence[int], resume: bool = False) -> List[LossRecord]:
    return run_stage(model, dataset, config, identities, 2, resume)


# ============================================================
# ORCHESTRATION
# ============================================================

def train_model(
    config: RunConfig,
    dataset: DatasetIndex,
    identities: Sequence[int],
    stage: str = "all",
    resume: bool = False,
) -> TrainingResult:
    identities = sorted(identities)
    if not dataset.select(identities):
        raise DatasetError("no training sequences", path=str(dataset.root))
    model = build_model(config, len(identities))
    result = TrainingResult(model=model, identities=identities)

    if stage == "2":
        path = checkpoint_path(config, 1)
        if not path.exists():
            raise CheckpointError(f"stage 2 needs the stage-1 checkpoint {path}")
        checkpoint = load_checkpoint(path, config.digest())
        if checkpoint.train_identities() != identities:
            raise CheckpointError(f"{path} was trained on different identities")
        restore_model(model, checkpoint)
        logger.info(f"📂 Stage-1 parameters loaded from {path}")

    if stage in ("1", "all"):
        result.losses += stage1_pretrain(model, dataset, config, identities, resume)
    if stage in ("2", "all"):
        result.losses += stage2_joint_train(model, dataset, config, identities, resume)
    return result


def train(config: RunConfig, stage: str = "all", resume: bool = False, dataset: Optional[DatasetIndex] = None) -> TrainingResult:
    """Train on the configured protocol's training identities"""
    if dataset is None:
        dataset = load_dataset(config.data.root, config.data.min_length)
    if not dataset.identities():
        raise DatasetError("dataset holds no identities", path=config.data.root)
    return train_model(config, dataset, training_identities(dataset, config), stage, resume)

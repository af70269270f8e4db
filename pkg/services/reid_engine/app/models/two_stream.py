"""
RTRL DESK - Two-stream re-identification model
Shared front-end, main stream (original sequence descriptors) and alignment
stream (ST²N-aligned descriptors), one TRL per stream, fusion, and the
classifier heads used by the two training stages.
"""

from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from app.autograd import ops
from app.autograd.tensor import Tensor, no_grad
from app.core.config import ArchitectureConfig, BackboneConfig, ST2NConfig, TRLConfig
from app.core.errors import ConfigError, DimensionError
from app.core.seeding import SeedStreams
from app.models.backbone import Backbone
from app.models.layers import Linear, Module
from app.models.st2n import SpatialTemporalTransformer
from app.models.trl import StreamFeatures, TemporalResidual, fuse_overall

PARAMETER_GROUPS = (
    "front_end", "main_tail", "aligned_tail", "st2n",
    "main_trl", "aligned_trl", "main_head", "aligned_head", "frame_head",
)
STAGE_GROUPS = {
    1: ("front_end", "st2n", "frame_head"),
    2: ("front_end", "main_tail", "aligned_tail", "st2n", "main_trl", "aligned_trl", "main_head", "aligned_head"),
}
DESCRIPTOR_STREAMS = ("fused", "main", "aligned")


@dataclass
class ForwardResult:
    y: Tensor                 # [N*T, H1, W1, C1]
    y_aligned: Tensor         # [N*T, H1, W1, C1]
    theta: Optional[Tensor]   # [N, T, 4]
    f_main: Tensor            # [N, T, D]
    f_aligned: Tensor         # [N, T, D]
    main: Optional[StreamFeatures] = None
    aligned: Optional[StreamFeatures] = None
    fused: Optional[Tensor] = None

    @property
    def batch(self) -> int:
        return self.f_main.shape[0]

    @property
    def frames(self) -> int:
        return self.f_main.shape[1]


class TwoStreamReID(Module):
    """
    Forward pass:
        frames -> front_end -> Y -> main_tail -> X -> f (OSD) -> main TRL -> gO
        Y --(ST²N, localized on X)--> Ŷ -> aligned_tail -> f (ASD) -> aligned TRL -> gA
        g = fuse_overall(gO, gA, β)
    """

    def __init__(self, config: ArchitectureConfig, num_classes: int, seeds: SeedStreams):
        super().__init__()
        if num_classes < 1:
            raise DimensionError(f"model needs at least one identity class, got {num_classes}")
        self.config = config
        self.num_classes = num_classes
        ablation = config.ablation
        backbone = config.backbone
        feature_dim = backbone.feature_dim

        self.backbone = Backbone(backbone, seeds)
        self.st2n: Optional[SpatialTemporalTransformer] = None
        if ablation.alignment != "none":
            self.st2n = SpatialTemporalTransformer(
                backbone.tail_width, config.st2n, seeds, temporal=ablation.alignment == "st2n"
            )
        trl_args = (feature_dim, config.trl.hidden, ablation.temporal_cell, ablation.features, ablation.alpha, seeds)
        self.main_trl = TemporalResidual(*trl_args, name="main_trl")
        self.aligned_trl = TemporalResidual(*trl_args, name="aligned_trl")
        stream_dim = self.main_trl.output_dim
        self.main_head = Linear(stream_dim, num_classes, seeds, "main_head")
        self.aligned_head = Linear(stream_dim, num_classes, seeds, "aligned_head")
        self.frame_head = Linear(feature_dim, num_classes, seeds, "frame_head")

        self.stream_dim = stream_dim
        self.descriptor_dims = {"fused": 2 * stream_dim, "main": stream_dim, "aligned": stream_dim}

    # --- Parameter bookkeeping ---

    def parameter_groups(self) -> Dict[str, List[Tuple[str, Tensor]]]:
        groups: Dict[str, List[Tuple[str, Tensor]]] = {g: [] for g in PARAMETER_GROUPS}
        for name, param in self.named_parameters():
            groups[group_of(name)].append((name, param))
        return groups

    def stage_parameters(self, stage: int) -> List[Tuple[str, Tensor]]:
        groups = self.parameter_groups()
        return [item for group in STAGE_GROUPS[stage] for item in groups[group]]

    # --- Forward ---

    def _as_batch(self, frames: Tensor) -> Tensor:
        size = self.config.backbone.input_size
        if frames.ndim == 4:
            frames = ops.reshape(frames, (1,) + frames.shape)
        if frames.ndim != 5 or frames.shape[2:] != (size, size, 3):
            raise DimensionError(f"expected [N, T, {size}, {size}, 3] frames, got {frames.shape}")
        return frames

    def forward(self, frames: Tensor, rng: Optional[np.random.Generator] = None, sequence_level: bool = True) -> ForwardResult:
        """frames [N, T, S, S, 3] or [T, S, S, 3]; rng feeds training-mode dropout"""
        frames = self._as_batch(frames)
        n, t = frames.shape[:2]
        flat = ops.reshape(frames, (n * t,) + frames.shape[2:])

        y = self.backbone.front(flat)
        x_main = self.backbone.tail(y, "main")

        theta = None
        y_aligned = y
        if self.st2n is not None:
            y_seq = ops.reshape(y, (n, t) + y.shape[1:])
            x_loc = ops.reshape(x_main, (n, t) + x_main.shape[1:])
            aligned_seq, theta = self.st2n.align(y_seq, x_loc, rng)
            y_aligned = ops.reshape(aligned_seq, y.shape)
        x_aligned = self.backbone.tail(y_aligned, "aligned")

        f_main = ops.reshape(self.backbone.frame_descriptor(x_main, "main"), (n, t, -1))
        f_aligned = ops.reshape(self.backbone.frame_descriptor(x_aligned, "aligned"), (n, t, -1))
        result = ForwardResult(y=y, y_aligned=y_aligned, theta=theta, f_main=f_main, f_aligned=f_aligned)
        if not sequence_level:
            return result

        result.main = self.main_trl(f_main)
        result.aligned = self.aligned_trl(f_aligned)
        result.fused = fuse_overall(result.main.fused, result.aligned.fused, self.config.ablation.beta)
        return result

    __call__ = forward

    def frame_logits(self, result: ForwardResult) -> Tensor:
        """Per-frame identity logits on the alignment stream's descriptors, [N*T, K]"""
        f = result.f_aligned
        return self.frame_head(ops.reshape(f, (f.shape[0] * f.shape[1], f.shape[2])))

    def sequence_logits(self, result: ForwardResult) -> Dict[str, Tensor]:
        return {
            "main": self.main_head(result.main.fused),
            "aligned": self.aligned_head(result.aligned.fused),
        }

    def descriptors(self, frames: Tensor) -> Dict[str, np.ndarray]:
        """Eval-mode fused / main / aligned sequence vectors, each [N, dim]"""
        was_training = self.training
        self.eval()
        try:
            with no_grad():
                result = self.forward(frames)
        finally:
            self.train(was_training)
        return {
            "fused": result.fused.data.copy(),
            "main": result.main.fused.data.copy(),
            "aligned": result.aligned.fused.data.copy(),
        }

    def thetas(self, frames: Tensor) -> np.ndarray:
        """Eval-mode θ trace [N, T, 4]; identity rows when alignment is disabled"""
        was_training = self.training
        self.eval()
        try:
            with no_grad():
                result = self.forward(frames, sequence_level=False)
        finally:
            self.train(was_training)
        if result.theta is None:
            return np.tile(np.array([1.0, 1.0, 0.0, 0.0]), (result.batch, result.frames, 1))
        return result.theta.data.copy()


def group_of(name: str) -> str:
    """Parameter group of a dotted parameter name"""
    head = name.split(".", 1)[0]
    if head == "backbone":
        return name.split(".")[1]
    if head in PARAMETER_GROUPS:
        return head
    raise KeyError(f"parameter '{name}' belongs to no group")


# ============================================================
# ANALYTIC PARAMETER COUNT
# ============================================================

def _conv_count(k: int, cin: int, cout: int) -> int:
    return k * k * cin * cout + cout


def _cell_count(input_dim: int, hidden: int) -> int:
    return input_dim * 4 * hidden + hidden * 4 * hidden + 4 * hidden


def _stack_count(k: int, cin: int, widths: List[int]) -> int:
    total = 0
    for width in widths:
        total += _conv_count(k, cin, width)
        cin = width
    return total


def analytic_parameter_count(config: ArchitectureConfig, num_classes: int) -> int:
    """Closed-form trainable parameter count for an architecture and class count"""
    bb: BackboneConfig = config.backbone
    st: ST2NConfig = config.st2n
    trl: TRLConfig = config.trl
    ablation = config.ablation
    feature_dim = bb.feature_dim

    front = _stack_count(bb.kernel_size, 3, bb.front_channels)
    tail = _stack_count(bb.kernel_size, bb.front_width, bb.tail_channels)
    if bb.descriptor_dim is not None:
        tail += bb.tail_width * bb.descriptor_dim + bb.descriptor_dim

    st2n = 0
    if ablation.alignment != "none":
        w = st.conv_width
        st2n = _conv_count(1, bb.tail_width, w) + _conv_count(1, w, w) + 2 * (2 * w)
        if ablation.alignment == "st2n":
            st2n += 2 * _cell_count(w, st.lstm_hidden)
            st2n += 2 * st.lstm_hidden * 4 + 4
        else:
            st2n += w * 4 + 4

    directions = 2 if ablation.temporal_cell == "bilstm" else 1
    stream_dim = directions * trl.hidden
    per_stream = directions * _cell_count(feature_dim, trl.hidden)
    if ablation.features != "generic":
        per_stream += directions * _cell_count(stream_dim, trl.hidden)

    heads = 2 * (stream_dim * num_classes + num_classes) + feature_dim * num_classes + num_classes
    return front + 2 * tail + st2n + 2 * per_stream + heads


# ============================================================
# ABLATION VARIANTS
# ============================================================

ABLATION_VARIANTS: Dict[str, Dict[str, object]] = {
    "G+LSTM_g": {"temporal_cell": "lstm", "alignment": "none", "features": "generic"},
    "G+BiLSTM_g": {"temporal_cell": "bilstm", "alignment": "none", "features": "generic"},
    "G+BiLSTM_s": {"temporal_cell": "bilstm", "alignment": "none", "features": "specific"},
    "G+BiLSTM_g+BiLSTM_s": {"temporal_cell": "bilstm", "alignment": "none", "features": "both"},
    "G+BiLSTM_g+STN": {"temporal_cell": "bilstm", "alignment": "stn", "features": "generic"},
    "G+BiLSTM_s+STN": {"temporal_cell": "bilstm", "alignment": "stn", "features": "specific"},
    "G+BiLSTM_g+BiLSTM_s+STN": {"temporal_cell": "bilstm", "alignment": "stn", "features": "both"},
    "G+BiLSTM_g+ST2N": {"temporal_cell": "bilstm", "alignment": "st2n", "features": "generic"},
    "G+BiLSTM_s+ST2N": {"temporal_cell": "bilstm", "alignment": "st2n", "features": "specific"},
    "G+BiLSTM_g+BiLSTM_s+ST2N": {"temporal_cell": "bilstm", "alignment": "st2n", "features": "both"},
}


def variant_overrides(variant: str) -> Dict[str, object]:
    """Dotted-key config overrides for one named variant; unaligned variants use the main stream only (β = 1)"""
    if variant not in ABLATION_VARIANTS:
        raise ConfigError(f"unknown variant '{variant}' (expected one of {sorted(ABLATION_VARIANTS)})", key="ablation")
    flags = ABLATION_VARIANTS[variant]
    overrides: Dict[str, object] = {f"ablation.{key}": value for key, value in flags.items()}
    if flags["alignment"] == "none":
        overrides["ablation.beta"] = 1.0
    return overrides


def toy_architecture(config: ArchitectureConfig) -> ArchitectureConfig:
    """2-frame, 8×8 instance of the same ablation flags, dropout off"""
    return ArchitectureConfig(
        backbone=BackboneConfig(
            input_size=8, kernel_size=3, front_channels=[3], tail_channels=[4],
            front_pool=True, tail_pool=False, descriptor_dim=None,
        ),
        st2n=config.st2n.model_copy(update={"conv_width": 4, "lstm_hidden": 3, "dropout": 0.0, "pool": True}),
        trl=TRLConfig(hidden=3),
        ablation=config.ablation,
    )

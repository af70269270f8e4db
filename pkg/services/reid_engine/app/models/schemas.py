"""
RTRL DESK - Pydantic models for run outputs
"""

from typing import Dict, List, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


# Alignment Models

class TransformParams(BaseModel):
    """Per-frame scale/translation parameters"""
    t: int = Field(..., ge=0, description="frame index within the sequence")
    s_x: float
    s_y: float
    tau_x: float
    tau_y: float


class PlacementRecord(BaseModel):
    """Ground-truth patch placement written by the generator"""
    sequence: str
    frame: int
    cx: float
    cy: float
    scale: float


# Dataset Models

class DatasetSummary(BaseModel):
    root: str
    identities: int
    cameras: int
    sequences: int
    frames: int
    distractors: int = 0

    def line(self) -> str:
        return (
            f"{self.identities} identities, {self.cameras} cameras, {self.sequences} sequences, "
            f"{self.frames} frames, {self.distractors} distractor sequences -> {self.root}"
        )


# Training Models

class LossRecord(BaseModel):
    iteration: int = Field(..., ge=1)
    stage: int = Field(..., ge=1, le=2)
    loss: float


# Evaluation Models

class EvalReport(BaseModel):
    """One evaluation of one descriptor stream on one probe/gallery split"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    protocol: str
    trial: int = 0
    stream: str = "fused"
    train_domain: Optional[str] = None
    test_domain: Optional[str] = None
    ranks: List[int]
    cmc: List[float]
    mean_ap: float = Field(..., ge=0.0, le=1.0)
    distances: np.ndarray
    probe_ids: List[int]
    gallery_ids: List[int]

    @field_validator("cmc")
    @classmethod
    def cmc_in_unit_interval(cls, values: List[float]) -> List[float]:
        if any(v < 0.0 or v > 1.0 for v in values):
            raise ValueError("CMC values must lie in [0, 1]")
        if any(b < a for a, b in zip(values, values[1:])):
            raise ValueError("CMC must be nondecreasing in rank")
        return values

    @model_validator(mode="after")
    def shapes_agree(self) -> "EvalReport":
        if len(self.cmc) != len(self.ranks):
            raise ValueError("one CMC value per rank")
        if self.distances.shape != (len(self.probe_ids), len(self.gallery_ids)):
            raise ValueError("distance matrix must be probes x gallery")
        return self

    def cmc_at(self, rank: int) -> float:
        return self.cmc[self.ranks.index(rank)]


class EvalSummary(BaseModel):
    """Per-stream average over trials"""
    protocol: str
    stream: str
    trials: int
    ranks: List[int]
    cmc: List[float]
    mean_ap: float
    train_domain: Optional[str] = None
    test_domain: Optional[str] = None

    def as_row(self) -> Dict[str, float]:
        row = {f"Rank-{k}": v for k, v in zip(self.ranks, self.cmc)}
        row["mAP"] = self.mean_ap
        return row

    def line(self) -> str:
        cells = "  ".join(f"{name} {value * 100:6.2f}" for name, value in self.as_row().items())
        domains = f" [{self.train_domain} -> {self.test_domain}]" if self.train_domain or self.test_domain else ""
        return f"{self.stream:<8} {cells}{domains}"


class AblationRow(BaseModel):
    variant: str
    seed: int
    rank1: float
    rank5: float
    rank20: float
    mean_ap: float

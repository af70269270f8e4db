"""
RTRL DESK - Alignment diagnostics
θ trace of one sequence, channel-mean renderings of the original and aligned
feature maps, and correlation of the predicted transform with the
generator's ground-truth placement when it is available.
"""

from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Union

import numpy as np
import pandas as pd
from loguru import logger

from app.autograd.tensor import Tensor, no_grad
from app.models.schemas import TransformParams
from app.models.two_stream import TwoStreamReID
from app.services.dataset import DatasetIndex
from app.services.image_io import image_write

# predicted component -> ground-truth placement column
CORRELATED = {"tau_x": "cx", "tau_y": "cy", "s_x": "scale", "s_y": "scale"}


@dataclass
class AlignmentReport:
    sequence: str
    thetas: np.ndarray                      # [T, 4] as (s_x, s_y, tau_x, tau_y)
    theta_csv: Path
    images: List[Path] = field(default_factory=list)
    correlations: Dict[str, float] = field(default_factory=dict)

    def lines(self) -> List[str]:
        out = [f"{self.sequence}: {len(self.thetas)} frames, θ trace -> {self.theta_csv}, {len(self.images)} images"]
        for name, value in self.correlations.items():
            out.append(f"  corr({name}, true {CORRELATED[name]}) = {value:+.4f}")
        return out


def channel_mean_image(maps: np.ndarray, low: float, high: float, size: int) -> np.ndarray:
    """[h, w, C] feature map -> [size, size, 3] gray image scaled by (low, high)"""
    mean = maps.mean(axis=-1)
    scaled = np.full_like(mean, 0.5) if high <= low else (mean - low) / (high - low)
    factor = max(1, size // mean.shape[0])
    scaled = np.kron(np.clip(scaled, 0.0, 1.0), np.ones((factor, factor)))
    return np.repeat(scaled[..., None], 3, axis=-1)


def theta_frame(thetas: np.ndarray) -> pd.DataFrame:
    rows = [TransformParams(t=t, s_x=row[0], s_y=row[1], tau_x=row[2], tau_y=row[3]).model_dump() for t, row in enumerate(thetas)]
    return pd.DataFrame(rows, columns=list(TransformParams.model_fields))


def placement_correlations(thetas: pd.DataFrame, truth: pd.DataFrame) -> Dict[str, float]:
    """Pearson correlation per component; NaN when either side is constant"""
    joined = thetas.merge(truth, left_on="t", right_on="frame", how="inner")
    if len(joined) < 2:
        return {}
    return {name: float(joined[name].corr(joined[column])) for name, column in CORRELATED.items()}


def alignment_report(
    model: TwoStreamReID,
    dataset: DatasetIndex,
    sequence: str,
    out_dir: Union[str, Path],
    max_frames: int = 0,
) -> AlignmentReport:
    record = dataset.find(sequence)
    frames = dataset.load_frames(record, max_frames)
    out_dir = Path(out_dir) / record.key.replace("/", "_")
    out_dir.mkdir(parents=True, exist_ok=True)

    was_training = model.training
    model.eval()
    try:
        with no_grad():
            result = model.forward(Tensor(frames[None]), sequence_level=False)
    finally:
        model.train(was_training)
    thetas = model.thetas(Tensor(frames[None]))[0]

    table = theta_frame(thetas)
    theta_csv = out_dir / "theta.csv"
    table.to_csv(theta_csv, index=False)

    # --- Feature-map renderings ---
    size = frames.shape[1]
    original = result.y.data
    aligned = result.y_aligned.data
    images: List[Path] = []
    for t in range(len(frames)):
        pair = np.stack([original[t].mean(axis=-1), aligned[t].mean(axis=-1)])
        low, high = float(pair.min()), float(pair.max())
        for tag, maps in (("original", original[t]), ("aligned", aligned[t])):
            path = out_dir / f"{tag}_{t:04d}.ppm"
            image_write(path, channel_mean_image(maps, low, high, size))
            images.append(path)

    correlations: Dict[str, float] = {}
    placements: Optional[pd.DataFrame] = dataset.placements()
    if placements is not None:
        truth = placements[placements["sequence"] == record.key]
        correlations = placement_correlations(table, truth)
    else:
        logger.info("📂 No ground-truth placements for this dataset; correlation skipped")

    report = AlignmentReport(sequence=record.key, thetas=thetas, theta_csv=theta_csv, images=images, correlations=correlations)
    logger.success(f"✅ Alignment report for {record.key}: {len(thetas)} θ rows, {len(images)} images")
    return report

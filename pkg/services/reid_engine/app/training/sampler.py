"""
Training batches of consecutive frame windows.

Visits run epoch by epoch over a fresh permutation of the training
sequences; each visit draws a uniformly random start for a T-frame
consecutive window. Sequences shorter than T repeat cyclically. Batch i is
a pure function of (seed, stage, i), so a resumed run sees the same batches.
"""

from typing import Dict, List, Sequence, Tuple

import numpy as np

from app.core.errors import DatasetError
from app.core.seeding import SeedStreams
from app.services.dataset import DatasetIndex, SequenceRecord


def consecutive_window(frames: np.ndarray, start: int, length: int) -> np.ndarray:
    count = frames.shape[0]
    if count >= length:
        return frames[start:start + length]
    return frames[np.arange(length) % count]


class SequenceSampler:
    def __init__(
        self,
        dataset: DatasetIndex,
        records: Sequence[SequenceRecord],
        labels: Dict[int, int],
        frames: int,
        batch_size: int,
        seeds: SeedStreams,
        stage: int,
    ):
        if not records:
            raise DatasetError("no training sequences", path=str(dataset.root))
        self.dataset = dataset
        self.records = list(records)
        self.labels = labels
        self.frames = frames
        self.batch_size = batch_size
        self.seeds = seeds
        self.stage = stage
        self._epochs: Dict[int, Tuple[np.ndarray, np.ndarray]] = {}

    def _epoch(self, epoch: int) -> Tuple[np.ndarray, np.ndarray]:
        if epoch not in self._epochs:
            n = len(self.records)
            order = self.seeds.generator("sampling", self.stage, epoch).permutation(n)
            starts_rng = self.seeds.generator("sampling", self.stage, epoch, "windows")
            spans = np.array([max(1, self.records[i].frame_count - self.frames + 1) for i in order])
            starts = starts_rng.integers(0, spans)
            self._epochs = {epoch: (order, starts)}  # only the latest epoch is cached
        return self._epochs[epoch]

    def batch(self, iteration: int) -> Tuple[np.ndarray, np.ndarray]:
        """Iteration counts from 1; returns frames [N, T, S, S, 3] and labels [N]"""
        n = len(self.records)
        clips: List[np.ndarray] = []
        labels: List[int] = []
        for j in range(self.batch_size):
            position = (iteration - 1) * self.batch_size + j
            order, starts = self._epoch(position // n)
            slot = position % n
            record = self.records[order[slot]]
            clips.append(consecutive_window(self.dataset.load_frames(record), int(starts[slot]), self.frames))
            labels.append(self.labels[record.identity])
        return np.stack(clips), np.asarray(labels, dtype=np.int64)

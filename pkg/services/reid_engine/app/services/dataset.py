"""
RTRL DESK - On-disk sequence datasets

Layout:
    root/<identity>/<camera>/frame_%04d.ppm               one sequence per camera
    root/<identity>/<camera>/<sequence>/frame_%04d.ppm    several sequences per camera

<identity> is a decimal id or `junk` (distractor tracklets, id -1);
<camera> is `cam<N>` or `<N>`. Files directly under root (placements.csv)
are not part of the index.
"""

import re
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from loguru import logger

from app.core.errors import DatasetError
from app.models.schemas import DatasetSummary
from app.services.image_io import image_read

JUNK_ID = -1
JUNK_DIR = "junk"
PLACEMENTS_FILE = "placements.csv"
FRAME_PATTERN = re.compile(r"^frame_(\d{4})\.ppm$")
CAMERA_PATTERN = re.compile(r"^(?:cam)?(\d+)$")


@dataclass(frozen=True)
class SequenceRecord:
    identity: int
    camera: int
    key: str                      # root-relative posix path of the sequence directory
    frame_paths: Tuple[Path, ...]

    @property
    def frame_count(self) -> int:
        return len(self.frame_paths)

    @property
    def is_junk(self) -> bool:
        return self.identity == JUNK_ID


class DatasetIndex:
    """Lexicographically ordered sequence records plus a frame cache"""

    def __init__(self, root: Path, records: List[SequenceRecord]):
        self.root = root
        self.records = records
        self._frame_cache: Dict[str, np.ndarray] = {}

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[SequenceRecord]:
        return iter(self.records)

    def identities(self) -> List[int]:
        return sorted({r.identity for r in self.records if not r.is_junk})

    def cameras(self) -> List[int]:
        return sorted({r.camera for r in self.records})

    def junk(self) -> List[SequenceRecord]:
        return [r for r in self.records if r.is_junk]

    def select(self, identities: Optional[Sequence[int]] = None, camera: Optional[int] = None) -> List[SequenceRecord]:
        wanted = None if identities is None else set(identities)
        return [
            r for r in self.records
            if not r.is_junk
            and (wanted is None or r.identity in wanted)
            and (camera is None or r.camera == camera)
        ]

    def find(self, key: str) -> SequenceRecord:
        for record in self.records:
            if record.key == key.strip("/"):
                return record
        raise DatasetError("unknown sequence id", path=key)

    def load_frames(self, record: SequenceRecord, max_frames: int = 0) -> np.ndarray:
        """[T, H, W, 3] float32; max_frames > 0 keeps the first max_frames frames"""
        if record.key not in self._frame_cache:
            frames = [image_read(p) for p in record.frame_paths]
            shapes = {f.shape for f in frames}
            if len(shapes) != 1:
                raise DatasetError(f"frames of differing sizes {sorted(shapes)}", path=record.key)
            self._frame_cache[record.key] = np.stack(frames)
        frames = self._frame_cache[record.key]
        return frames[:max_frames] if max_frames > 0 else frames

    def frame_size(self) -> Optional[int]:
        if not self.records:
            return None
        return int(self.load_frames(self.records[0]).shape[1])

    def placements(self) -> Optional[pd.DataFrame]:
        path = self.root / PLACEMENTS_FILE
        if not path.exists():
            return None
        return pd.read_csv(path)

    def summary(self) -> DatasetSummary:
        real = [r for r in self.records if not r.is_junk]
        return DatasetSummary(
            root=str(self.root),
            identities=len(self.identities()),
            cameras=len(self.cameras()),
            sequences=len(real),
            frames=sum(r.frame_count for r in self.records),
            distractors=len(self.records) - len(real),
        )


def _identity_of(path: Path) -> int:
    if path.name == JUNK_DIR:
        return JUNK_ID
    if path.name.isdigit():
        return int(path.name)
    raise DatasetError("identity directory must be a decimal id or 'junk'", path=str(path))


def _camera_of(path: Path) -> int:
    match = CAMERA_PATTERN.match(path.name)
    if not match or not path.is_dir():
        raise DatasetError("expected a camera directory named cam<N> or <N>", path=str(path))
    return int(match.group(1))


def _frames_in(directory: Path) -> Tuple[Path, ...]:
    frames = []
    for entry in sorted(directory.iterdir(), key=lambda p: p.name):
        if not entry.is_file() or not FRAME_PATTERN.match(entry.name):
            raise DatasetError("expected frame files named frame_NNNN.ppm", path=str(entry))
        frames.append(entry)
    if not frames:
        raise DatasetError("sequence directory holds no frames", path=str(directory))
    return tuple(frames)


def load_dataset(root: Union[str, Path], min_length: int = 1) -> DatasetIndex:
    """Index every sequence with at least min_length frames"""
    root = Path(root)
    if not root.is_dir():
        raise DatasetError("dataset root is not a directory", path=str(root))

    records: List[SequenceRecord] = []
    skipped = 0
    for identity_dir in sorted((p for p in root.iterdir() if p.is_dir()), key=lambda p: p.name):
        identity = _identity_of(identity_dir)
        for camera_dir in sorted(identity_dir.iterdir(), key=lambda p: p.name):
            camera = _camera_of(camera_dir)
            entries = sorted(camera_dir.iterdir(), key=lambda p: p.name)
            if entries and all(e.is_dir() for e in entries):
                sequence_dirs = entries
            elif all(e.is_file() for e in entries):
                sequence_dirs = [camera_dir]
            else:
                raise DatasetError("camera directory mixes frame files and sequence directories", path=str(camera_dir))
            for sequence_dir in sequence_dirs:
                frames = _frames_in(sequence_dir)
                if len(frames) < min_length:
                    skipped += 1
                    continue
                key = sequence_dir.relative_to(root).as_posix()
                records.append(SequenceRecord(identity, camera, key, frames))

    logger.info(f"📂 Indexed {len(records)} sequences under {root} ({skipped} shorter than {min_length} frames)")
    return DatasetIndex(root, records)

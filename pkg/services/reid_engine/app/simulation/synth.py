"""
RTRL DESK - Synthetic tracklet generator
Each identity owns a deterministic texture patch. A tracklet renders that
patch over a cluttered background while its placement follows a bounded
random walk, so frame-to-frame displacement never exceeds the configured
step. Cameras after the first apply an appearance shift.
"""

from pathlib import Path
from typing import Dict, List, Tuple, Union

import numpy as np
import pandas as pd
from loguru import logger

from app.core.config import SynthConfig
from app.core.errors import DatasetError
from app.core.seeding import SeedStreams
from app.models.schemas import DatasetSummary, PlacementRecord
from app.services.dataset import JUNK_DIR, PLACEMENTS_FILE
from app.services.image_io import image_write

PATCH_RESOLUTION = 16
DOMAIN_SHIFT_DIRECTION = np.array([1.0, 0.0, -1.0])


class PlacementWalk:
    """Bounded random walk of (cx, cy, scale) in normalized image coordinates"""

    def __init__(self, config: SynthConfig, rng: np.random.Generator):
        self.config = config
        self.rng = rng
        self.cx = 0.0
        self.cy = 0.0
        self.scale = 1.0

    def step(self) -> None:
        cfg = self.config
        angle = self.rng.uniform(0.0, 2.0 * np.pi)
        radius = self.rng.uniform(0.0, cfg.max_translation_step)
        # per-axis clipping only shortens the step
        self.cx = float(np.clip(self.cx + radius * np.cos(angle), -cfg.max_offset, cfg.max_offset))
        self.cy = float(np.clip(self.cy + radius * np.sin(angle), -cfg.max_offset, cfg.max_offset))
        drift = self.rng.uniform(-cfg.max_scale_step, cfg.max_scale_step)
        self.scale = float(np.clip(self.scale + drift, 1.0 - cfg.scale_spread, 1.0 + cfg.scale_spread))


class TrackletSimulator:
    """Renders frames for one (identity, camera, sequence)"""

    def __init__(self, config: SynthConfig, seeds: SeedStreams):
        self.config = config
        self.seeds = seeds
        self._patch_cache: Dict[int, np.ndarray] = {}

    # --- Appearance ---

    def identity_patch(self, identity: int) -> np.ndarray:
        """[P, P, 3] texture: head blob, striped torso, legs"""
        if identity not in self._patch_cache:
            rng = self.seeds.generator("synth", "identity", identity)
            p = PATCH_RESOLUTION
            patch = np.empty((p, p, 3))
            torso, legs, stripe = rng.uniform(0.05, 0.95, size=(3, 3))
            patch[: p // 2] = torso
            patch[p // 2:] = legs
            period = int(rng.integers(2, 5))
            rows = np.arange(p // 4, p // 2)
            patch[rows[(rows // period) % 2 == 0]] = stripe
            head = rng.uniform(0.3, 0.9, size=3)
            yy, xx = np.mgrid[0:p, 0:p]
            patch[((yy - p // 8) ** 2 + (xx - p // 2) ** 2) <= (p // 8) ** 2] = head
            self._patch_cache[identity] = patch
        return self._patch_cache[identity]

    def camera_offset(self, camera: int) -> np.ndarray:
        if camera <= 1:
            return np.zeros(3)
        rng = self.seeds.generator("synth", "camera", camera)
        return self.config.appearance_shift * rng.uniform(-1.0, 1.0, size=3)

    def background(self, rng: np.random.Generator) -> np.ndarray:
        size = self.config.image_size
        image = np.empty((size, size, 3))
        image[...] = rng.uniform(0.2, 0.8, size=3)
        for _ in range(int(round(self.config.clutter_density * 12))):
            h, w = rng.integers(max(1, size // 10), max(2, size // 3), size=2)
            top, left = rng.integers(0, size - h + 1), rng.integers(0, size - w + 1)
            image[top:top + h, left:left + w] = rng.uniform(0.0, 1.0, size=3)
        return image

    # --- Rendering ---

    def render(self, base: np.ndarray, patch: np.ndarray, cx: float, cy: float, scale: float) -> np.ndarray:
        """Nearest-neighbour paste of patch centered at (cx, cy) with side patch_size·scale·S"""
        size = self.config.image_size
        side = self.config.patch_size * scale * size
        center_x = (cx + 1.0) * 0.5 * (size - 1)
        center_y = (cy + 1.0) * 0.5 * (size - 1)
        coords = np.arange(size)
        u = (coords - center_x) / side + 0.5
        v = (coords - center_y) / side + 0.5
        inside_x = (u >= 0.0) & (u < 1.0)
        inside_y = (v >= 0.0) & (v < 1.0)
        p = patch.shape[0]
        cols = np.clip((u * p).astype(int), 0, p - 1)
        rows = np.clip((v * p).astype(int), 0, p - 1)
        frame = base.copy()
        mask = inside_y[:, None] & inside_x[None, :]
        frame[mask] = patch[rows[:, None].repeat(size, 1)[mask], cols[None, :].repeat(size, 0)[mask]]
        return frame

    def finish(self, frame: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        cfg = self.config
        if cfg.noise > 0:
            frame = frame + rng.normal(0.0, cfg.noise, size=frame.shape)
        if cfg.domain_shift != 0:
            frame = frame + cfg.domain_shift * DOMAIN_SHIFT_DIRECTION
        return np.clip(frame, 0.0, 1.0)

    def tracklet(self, identity: int, camera: int, sequence: int) -> Tuple[List[np.ndarray], List[Tuple[float, float, float]]]:
        """Frames and (cx, cy, scale) placements of one sequence"""
        rng = self.seeds.generator("synth", "sequence", identity, camera, sequence)
        base = self.background(rng)
        patch = np.clip(self.identity_patch(identity) + self.camera_offset(camera), 0.0, 1.0)
        walk = PlacementWalk(self.config, rng)
        frames, placements = [], []
        for t in range(self.config.frames):
            if t > 0:
                walk.step()
            frame = self.render(base, patch, walk.cx, walk.cy, walk.scale)
            frames.append(self.finish(frame, rng))
            placements.append((walk.cx, walk.cy, walk.scale))
        return frames, placements

    def distractor(self, camera: int, sequence: int) -> List[np.ndarray]:
        """Clutter-only tracklet (a false detection)"""
        rng = self.seeds.generator("synth", "junk", camera, sequence)
        base = self.background(rng)
        return [self.finish(base, rng) for _ in range(self.config.frames)]


def _write_sequence(directory: Path, frames: List[np.ndarray]) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    for t, frame in enumerate(frames):
        image_write(directory / f"frame_{t:04d}.ppm", frame)


def synth_generate(config: SynthConfig, root: Union[str, Path], seed: int) -> DatasetSummary:
    """Write the dataset under root in the sequence-subdirectory layout plus placements.csv"""
    root = Path(root)
    simulator = TrackletSimulator(config, SeedStreams(seed))
    logger.info(f"🚀 Generating {config.num_identities} identities x {config.cameras} cameras -> {root}")

    placements: List[PlacementRecord] = []
    try:
        root.mkdir(parents=True, exist_ok=True)
        for identity in range(1, config.num_identities + 1):
            for camera in range(1, config.cameras + 1):
                for sequence in range(config.sequences_per_camera):
                    key = f"{identity:04d}/cam{camera}/seq{sequence:02d}"
                    frames, trace = simulator.tracklet(identity, camera, sequence)
                    _write_sequence(root / key, frames)
                    placements.extend(
                        PlacementRecord(sequence=key, frame=t, cx=cx, cy=cy, scale=s)
                        for t, (cx, cy, s) in enumerate(trace)
                    )
        for camera in range(1, config.cameras + 1):
            for sequence in range(config.distractor_sequences):
                _write_sequence(root / JUNK_DIR / f"cam{camera}" / f"seq{sequence:02d}", simulator.distractor(camera, sequence))
        pd.DataFrame([p.model_dump() for p in placements]).to_csv(root / PLACEMENTS_FILE, index=False)
    except OSError as exc:
        raise DatasetError(f"cannot write dataset ({exc})", path=str(root)) from None

    sequences = config.num_identities * config.cameras * config.sequences_per_camera
    distractors = config.cameras * config.distractor_sequences
    summary = DatasetSummary(
        root=str(root),
        identities=config.num_identities,
        cameras=config.cameras,
        sequences=sequences,
        frames=(sequences + distractors) * config.frames,
        distractors=distractors,
    )
    logger.success(f"✅ Dataset written: {summary.line()}")
    return summary

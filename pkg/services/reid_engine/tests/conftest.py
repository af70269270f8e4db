"""
Shared fixtures: 64-bit precision, tiny architectures and run configs, and a
small generated dataset reused across the session.
"""

from pathlib import Path
from typing import Any, Callable, Dict, Optional

import numpy as np
import pytest

from app.autograd.tensor import precision
from app.core.config import (
    AblationConfig,
    ArchitectureConfig,
    BackboneConfig,
    RunConfig,
    ST2NConfig,
    SynthConfig,
    TRLConfig,
    run_config_from_mapping,
)
from app.core.seeding import SeedStreams
from app.services.dataset import DatasetIndex, load_dataset
from app.simulation.synth import synth_generate

TINY_SYNTH = dict(
    num_identities=4,
    cameras=2,
    sequences_per_camera=1,
    frames=3,
    image_size=8,
    noise=0.0,
)


# =============================================================================
# Precision and randomness
# =============================================================================

@pytest.fixture
def float64():
    with precision("float64"):
        yield


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def seeds() -> SeedStreams:
    return SeedStreams(7)


# =============================================================================
# Architectures and run configs
# =============================================================================

@pytest.fixture
def make_architecture() -> Callable[..., ArchitectureConfig]:
    """8×8 input, one front conv (pooled), one tail conv, 4-wide localization"""

    def build(descriptor_dim=None, dropout=0.0, **ablation: Any) -> ArchitectureConfig:
        return ArchitectureConfig(
            backbone=BackboneConfig(
                input_size=8, kernel_size=3, front_channels=[3], tail_channels=[4],
                front_pool=True, tail_pool=False, descriptor_dim=descriptor_dim,
            ),
            st2n=ST2NConfig(conv_width=4, lstm_hidden=3, dropout=dropout),
            trl=TRLConfig(hidden=3),
            ablation=AblationConfig(**ablation),
        )

    return build


def tiny_run_mapping(root: Path, output_dir: Path) -> Dict[str, Dict[str, Any]]:
    return {
        "run": {"output_dir": str(output_dir), "seed": 0},
        "data": {"root": str(root)},
        "backbone": {"input_size": 8, "front_channels": [3], "tail_channels": [4], "tail_pool": False},
        "st2n": {"conv_width": 4, "lstm_hidden": 3},
        "trl": {"hidden": 3},
        "train": {
            "stage1_iterations": 2, "stage2_iterations": 2, "batch_size": 2, "frames": 2,
            "log_interval": 1, "checkpoint_interval": 1,
        },
        "synth": dict(TINY_SYNTH),
        "eval": {"trials": 2, "ranks": [1, 2]},
    }


@pytest.fixture
def make_run_config(synth_root: Path, tmp_path: Path) -> Callable[..., RunConfig]:
    """RunConfig over the shared tiny dataset, writing under tmp_path/<name>"""

    def build(name: str = "run", overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
        config = run_config_from_mapping(tiny_run_mapping(synth_root, tmp_path / name))
        return config.with_overrides(overrides) if overrides else config

    return build


# =============================================================================
# Data
# =============================================================================

@pytest.fixture(scope="session")
def synth_root(tmp_path_factory) -> Path:
    root = tmp_path_factory.mktemp("synth") / "tiny"
    synth_generate(SynthConfig(**TINY_SYNTH), root, seed=3)
    return root


@pytest.fixture
def dataset(synth_root: Path) -> DatasetIndex:
    return load_dataset(synth_root)

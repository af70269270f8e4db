"""
TSR1 tensor files, PPM frames, the synthetic generator and the dataset loader.
"""

from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from app.autograd.tensor import Tensor
from app.core.config import SynthConfig
from app.core.errors import ContractError, DatasetError, FormatError
from app.services.dataset import JUNK_ID, load_dataset
from app.services.image_io import image_read, image_write, quantize
from app.services.tensor_io import decode_tensor, encode_tensor, tensor_file_read, tensor_file_write
from app.simulation.synth import synth_generate


def _write_frames(directory: Path, count: int, size: int = 4, value: float = 0.5) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    for t in range(count):
        image_write(directory / f"frame_{t:04d}.ppm", np.full((size, size, 3), value))


def _tree(root: Path) -> dict:
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


# =============================================================================
# Tensor files
# =============================================================================

class TestTensorFiles:

    @pytest.mark.parametrize("dtype", [np.float32, np.float64])
    def test_round_trip(self, tmp_path, rng, dtype):
        array = rng.normal(size=(2, 3, 4)).astype(dtype)
        tensor_file_write(tmp_path / "a.tsr", array)
        restored = tensor_file_read(tmp_path / "a.tsr")
        assert restored.dtype == dtype
        np.testing.assert_array_equal(restored.data, array)

    def test_header_layout(self):
        encoded = encode_tensor(np.zeros((2, 3), dtype=np.float64))
        assert encoded[:4] == b"TSR1"
        assert encoded[4] == 2 and encoded[5] == 2
        assert len(encoded) == 6 + 2 * 8 + 6 * 8

    def test_scalar_is_stored_with_one_dim(self):
        encoded = encode_tensor(np.float32(1.5))
        assert len(encoded) == 18
        data, end = decode_tensor(encoded)
        assert data.shape == (1,) and data[0] == 1.5 and end == 18

    def test_accepts_tensors(self, tmp_path):
        tensor_file_write(tmp_path / "t.tsr", Tensor(np.ones(3)))
        np.testing.assert_array_equal(tensor_file_read(tmp_path / "t.tsr").data, np.ones(3))

    def test_bad_magic(self):
        encoded = b"TSR2" + encode_tensor(np.ones(2))[4:]
        with pytest.raises(FormatError) as info:
            decode_tensor(encoded)
        assert info.value.offset == 0

    def test_decode_at_offset(self):
        encoded = b"xx" + encode_tensor(np.arange(3, dtype=np.float32))
        data, end = decode_tensor(encoded, 2)
        np.testing.assert_array_equal(data, [0, 1, 2])
        assert end == len(encoded)
        with pytest.raises(FormatError) as info:
            decode_tensor(encoded, 1)
        assert info.value.offset == 1

    def test_unknown_dtype_code(self):
        encoded = bytearray(encode_tensor(np.ones(2)))
        encoded[4] = 9
        with pytest.raises(FormatError) as info:
            decode_tensor(bytes(encoded))
        assert info.value.offset == 4

    def test_truncation(self, tmp_path):
        encoded = encode_tensor(np.ones((4, 4), dtype=np.float32))
        for cut in (3, 10, len(encoded) - 1):
            with pytest.raises(FormatError):
                decode_tensor(encoded[:cut])

    def test_trailing_bytes(self, tmp_path):
        (tmp_path / "a.tsr").write_bytes(encode_tensor(np.ones(2)) + b"\x00\x00")
        with pytest.raises(FormatError) as info:
            tensor_file_read(tmp_path / "a.tsr")
        assert info.value.offset == 6 + 8 + 16

    @pytest.mark.parametrize("array", [np.arange(3), np.ones(2, dtype=np.float16)])
    def test_non_float_data_is_refused(self, array):
        with pytest.raises(ContractError):
            encode_tensor(array)


# =============================================================================
# PPM frames
# =============================================================================

class TestImages:

    def test_quantization_rounds_half_up(self):
        np.testing.assert_array_equal(quantize(np.array([0.0, 0.5, 1.0, 0.2])), [0, 128, 255, 51])

    @pytest.mark.parametrize("bad", [-0.01, 1.01, np.nan])
    def test_out_of_range_values(self, tmp_path, bad):
        image = np.full((2, 2, 3), 0.5)
        image[0, 0, 0] = bad
        with pytest.raises(ContractError):
            image_write(tmp_path / "bad.ppm", image)

    def test_white_pixel_bytes(self, tmp_path):
        image_write(tmp_path / "w.ppm", np.ones((1, 1, 3)))
        raw = (tmp_path / "w.ppm").read_bytes()
        assert raw.startswith(b"P6")
        assert raw.endswith(b"\xff\xff\xff")

    def test_read_returns_quantized_values(self, tmp_path, rng):
        image = rng.uniform(size=(5, 4, 3))
        image_write(tmp_path / "a.ppm", image)
        restored = image_read(tmp_path / "a.ppm")
        assert restored.shape == (5, 4, 3) and restored.dtype == np.float32
        np.testing.assert_allclose(restored, quantize(image) / 255.0, atol=1e-7)

    def test_unreadable_file(self, tmp_path):
        (tmp_path / "junk.ppm").write_bytes(b"not an image")
        with pytest.raises(DatasetError):
            image_read(tmp_path / "junk.ppm")


# =============================================================================
# Synthetic generator
# =============================================================================

SMALL = dict(num_identities=3, cameras=2, sequences_per_camera=2, frames=4, image_size=16)


class TestSynth:

    def test_same_seed_same_bytes(self, tmp_path):
        synth_generate(SynthConfig(**SMALL), tmp_path / "a", seed=11)
        synth_generate(SynthConfig(**SMALL), tmp_path / "b", seed=11)
        assert _tree(tmp_path / "a") == _tree(tmp_path / "b")

    def test_different_seed_differs(self, tmp_path):
        synth_generate(SynthConfig(**SMALL), tmp_path / "a", seed=11)
        synth_generate(SynthConfig(**SMALL), tmp_path / "b", seed=12)
        assert _tree(tmp_path / "a") != _tree(tmp_path / "b")

    def test_layout_and_summary(self, tmp_path):
        summary = synth_generate(SynthConfig(**SMALL, distractor_sequences=1), tmp_path / "d", seed=0)
        assert (summary.identities, summary.cameras, summary.sequences, summary.distractors) == (3, 2, 12, 2)
        dataset = load_dataset(tmp_path / "d")
        assert dataset.identities() == [1, 2, 3]
        assert dataset.cameras() == [1, 2]
        assert dataset.select()[0].key == "0001/cam1/seq00"
        assert len(dataset.junk()) == 2
        frames = dataset.load_frames(dataset.select()[0])
        assert frames.shape == (4, 16, 16, 3)
        assert 0.0 <= frames.min() and frames.max() <= 1.0

    def test_frozen_walk_stays_centered(self, tmp_path):
        synth_generate(SynthConfig(**SMALL, max_translation_step=0.0, max_scale_step=0.0), tmp_path / "c", seed=0)
        placements = pd.read_csv(tmp_path / "c" / "placements.csv")
        assert list(placements.columns) == ["sequence", "frame", "cx", "cy", "scale"]
        assert (placements[["cx", "cy"]] == 0.0).all().all()
        assert (placements["scale"] == 1.0).all()

    def test_steps_are_bounded(self, tmp_path):
        config = SynthConfig(**{**SMALL, "frames": 12}, max_translation_step=0.1, max_scale_step=0.05)
        synth_generate(config, tmp_path / "w", seed=4)
        placements = pd.read_csv(tmp_path / "w" / "placements.csv")
        assert len(placements) == 12 * 12
        for _, walk in placements.groupby("sequence"):
            walk = walk.sort_values("frame")
            step = np.hypot(np.diff(walk["cx"]), np.diff(walk["cy"]))
            assert np.all(step <= 0.1 + 1e-9)
            assert np.all(np.abs(np.diff(walk["scale"])) <= 0.05 + 1e-9)
            assert np.all(np.abs(walk[["cx", "cy"]].values) <= config.max_offset + 1e-9)

    def test_unwritable_root(self, tmp_path):
        (tmp_path / "file").write_text("x")
        with pytest.raises(DatasetError):
            synth_generate(SynthConfig(**SMALL), tmp_path / "file" / "sub", seed=0)


# =============================================================================
# Dataset loader
# =============================================================================

class TestLoader:

    def test_empty_root(self, tmp_path):
        dataset = load_dataset(tmp_path)
        assert len(dataset) == 0 and dataset.identities() == [] and dataset.frame_size() is None

    def test_missing_root(self, tmp_path):
        with pytest.raises(DatasetError):
            load_dataset(tmp_path / "nowhere")

    def test_single_sequence_layout(self, tmp_path):
        _write_frames(tmp_path / "0007" / "cam1", 2)
        _write_frames(tmp_path / "0007" / "2", 2)
        dataset = load_dataset(tmp_path)
        assert [(r.identity, r.camera, r.key) for r in dataset] == [(7, 2, "0007/2"), (7, 1, "0007/cam1")]

    def test_lexicographic_order(self, tmp_path):
        for identity in ("0010", "0002", "0001"):
            _write_frames(tmp_path / identity / "cam1", 1)
        keys = [r.key for r in load_dataset(tmp_path)]
        assert keys == ["0001/cam1", "0002/cam1", "0010/cam1"]

    def test_min_length_filter(self, tmp_path):
        _write_frames(tmp_path / "0001" / "cam1" / "seq00", 3)
        _write_frames(tmp_path / "0001" / "cam1" / "seq01", 1)
        dataset = load_dataset(tmp_path, min_length=2)
        assert [r.key for r in dataset] == ["0001/cam1/seq00"]
        assert dataset.select()[0].frame_count == 3

    def test_junk_identity(self, tmp_path):
        _write_frames(tmp_path / "0001" / "cam1", 1)
        _write_frames(tmp_path / "junk" / "cam2", 1)
        dataset = load_dataset(tmp_path)
        assert [r.identity for r in dataset.junk()] == [JUNK_ID]
        assert dataset.identities() == [1]
        assert dataset.summary().distractors == 1

    def test_placements_file_is_not_indexed(self, tmp_path):
        _write_frames(tmp_path / "0001" / "cam1", 1)
        (tmp_path / "placements.csv").write_text("sequence,frame,cx,cy,scale\n")
        assert len(load_dataset(tmp_path)) == 1

    @pytest.mark.parametrize("bad", ["person1/cam1", "0001/left", "0001/cam1/extra.txt"])
    def test_malformed_layout(self, tmp_path, bad):
        _write_frames(tmp_path / "0001" / "cam1", 1)
        target = tmp_path / bad
        if target.suffix:
            target.write_text("x")
        else:
            _write_frames(target, 1)
        with pytest.raises(DatasetError):
            load_dataset(tmp_path)

    def test_mixed_camera_directory(self, tmp_path):
        _write_frames(tmp_path / "0001" / "cam1", 1)
        _write_frames(tmp_path / "0001" / "cam1" / "seq00", 1)
        with pytest.raises(DatasetError):
            load_dataset(tmp_path)

    def test_frames_of_different_sizes(self, tmp_path):
        _write_frames(tmp_path / "0001" / "cam1", 1, size=4)
        image_write(tmp_path / "0001" / "cam1" / "frame_0001.ppm", np.zeros((5, 5, 3)))
        dataset = load_dataset(tmp_path)
        with pytest.raises(DatasetError):
            dataset.load_frames(dataset.select()[0])

    def test_load_frames_and_lookup(self, tmp_path):
        _write_frames(tmp_path / "0001" / "cam1", 3, size=6, value=1.0)
        dataset = load_dataset(tmp_path)
        record = dataset.find("0001/cam1/")
        assert dataset.load_frames(record).shape == (3, 6, 6, 3)
        assert dataset.load_frames(record, max_frames=2).shape == (2, 6, 6, 3)
        assert dataset.frame_size() == 6
        assert dataset.placements() is None
        with pytest.raises(DatasetError):
            dataset.find("0002/cam1")

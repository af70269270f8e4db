"""
Flat config files, run config validation, digests and seed streams.
"""

from pathlib import Path

import numpy as np
import pytest

from app.core.config import (
    EvalConfig,
    Settings,
    load_run_config,
    parse_config_text,
    run_config_from_mapping,
)
from app.core.errors import ConfigError, ContractError
from app.core.seeding import STREAMS, SeedStreams

CONFIG_DIR = Path(__file__).resolve().parent.parent / "configs"


def _config(text: str):
    mapping, lines = parse_config_text(text)
    return run_config_from_mapping(mapping, lines)


# =============================================================================
# Parsing
# =============================================================================

class TestParsing:

    def test_sections_keys_and_comments(self):
        mapping, lines = parse_config_text("# header\n\ndata.root = /tmp/x  # trailing\ntrain.frames=4\n")
        assert mapping == {"data": {"root": "/tmp/x"}, "train": {"frames": "4"}}
        assert lines == {"data.root": 3, "train.frames": 4}

    def test_line_without_equals(self):
        with pytest.raises(ConfigError) as info:
            parse_config_text("data.root = x\njust words\n")
        assert info.value.line == 2
        assert str(info.value).startswith("line 2: ")

    def test_key_without_section(self):
        with pytest.raises(ConfigError) as info:
            parse_config_text("root = x\n")
        assert info.value.key == "root"

    def test_unknown_section(self):
        with pytest.raises(ConfigError) as info:
            parse_config_text("data.root = x\nmodel.depth = 3\n")
        assert info.value.line == 2

    def test_duplicate_key(self):
        with pytest.raises(ConfigError) as info:
            parse_config_text("data.root = x\ndata.root = y\n")
        assert info.value.line == 2
        assert "first set on line 1" in str(info.value)


# =============================================================================
# Validation
# =============================================================================

class TestValidation:

    def test_missing_root_names_the_key(self):
        with pytest.raises(ConfigError) as info:
            _config("train.frames = 4\n")
        assert info.value.key == "data.root"
        assert "missing required key 'data.root'" in str(info.value)

    def test_unknown_key_reports_its_line(self):
        with pytest.raises(ConfigError) as info:
            _config("data.root = x\ntrain.momentum = 0.9\n")
        assert info.value.key == "train.momentum" and info.value.line == 2
        assert "unknown config key" in str(info.value)

    def test_invalid_value_reports_its_line(self):
        with pytest.raises(ConfigError) as info:
            _config("data.root = x\n\ntrain.batch_size = 0\n")
        assert info.value.line == 3

    def test_pool_divisibility(self):
        with pytest.raises(ConfigError):
            _config("data.root = x\nbackbone.input_size = 30\n")

    def test_values_are_coerced(self):
        config = _config(
            "data.root = x\nbackbone.front_channels = 4, 8\nbackbone.tail_pool = false\n"
            "backbone.descriptor_dim = none\neval.ranks = 20,1,5,5\nablation.alignment = stn\n"
        )
        assert config.backbone.front_channels == [4, 8]
        assert config.backbone.tail_pool is False
        assert config.backbone.descriptor_dim is None
        assert config.eval.ranks == [1, 5, 20]
        assert config.ablation.alignment == "stn"

    def test_defaults(self):
        config = _config("data.root = x\n")
        assert config.train.clip == 5.0
        assert (config.train.stage1_lr, config.train.stage2_lr) == (2e-4, 2e-5)
        assert config.eval.protocol == "half10"
        assert config.ablation.beta == 0.5
        assert config.architecture().backbone == config.backbone

    def test_ranks_must_be_positive(self):
        with pytest.raises(ValueError):
            EvalConfig(ranks=[0, 1])

    def test_canonical_text_reloads_to_the_same_config(self):
        config = _config("data.root = x\nbackbone.front_channels = 4,8\nrun.seed = 9\n")
        assert _config(config.canonical_text()) == config

    @pytest.mark.parametrize("name", ["toy.cfg", "desk.cfg", "full.cfg"])
    def test_bundled_configs_load(self, name):
        config = load_run_config(CONFIG_DIR / name)
        assert config.data.root
        assert config.backbone.tail_size >= 1

    def test_unreadable_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_run_config(tmp_path / "missing.cfg")


# =============================================================================
# Overrides and digests
# =============================================================================

class TestDigest:

    def test_digest_ignores_output_directory(self):
        a = _config("data.root = x\nrun.output_dir = runs/a\n")
        b = _config("data.root = x\nrun.output_dir = runs/b\n")
        assert a.digest() == b.digest()
        assert len(a.digest()) == 32
        assert "run.output_dir" not in a.portable_text()
        assert "run.output_dir = runs/a" in a.canonical_text()

    def test_digest_follows_every_other_setting(self):
        base = _config("data.root = x\n")
        assert base.with_overrides({"run.seed": 1}).digest() != base.digest()
        assert base.with_overrides({"ablation.alpha": 0.25}).digest() != base.digest()

    def test_with_overrides_revalidates(self):
        base = _config("data.root = x\n")
        updated = base.with_overrides({"train.frames": 3, "eval.ranks": "2,1"})
        assert updated.train.frames == 3 and updated.eval.ranks == [1, 2]
        assert base.train.frames == 10
        with pytest.raises(ConfigError):
            base.with_overrides({"train.frames": 0})
        with pytest.raises(ConfigError):
            base.with_overrides({"nothing": 1})


# =============================================================================
# Process settings and seed streams
# =============================================================================

class TestSettings:

    def test_environment_prefix(self, monkeypatch):
        monkeypatch.setenv("RTRL_LOG_LEVEL", "DEBUG")
        monkeypatch.setenv("RTRL_DEFAULT_OUTPUT_DIR", "/tmp/elsewhere")
        settings = Settings()
        assert settings.LOG_LEVEL == "DEBUG"
        assert settings.DEFAULT_OUTPUT_DIR == "/tmp/elsewhere"


class TestSeedStreams:

    def test_same_keys_same_draws(self):
        a = SeedStreams(3).generator("init", "backbone.conv0.weight").normal(size=5)
        b = SeedStreams(3).generator("init", "backbone.conv0.weight").normal(size=5)
        np.testing.assert_array_equal(a, b)

    def test_streams_and_keys_are_independent(self):
        draws = {
            (stream, key): SeedStreams(3).generator(stream, key).random()
            for stream in STREAMS for key in (0, 1, "a")
        }
        assert len(set(draws.values())) == len(draws)
        assert SeedStreams(4).generator("init", 0).random() != draws[("init", 0)]

    def test_unknown_stream(self):
        with pytest.raises(ContractError):
            SeedStreams(0).generator("weights")

"""
Command-line surface: every subcommand end to end on a tiny generated dataset.
"""

from pathlib import Path

import pandas as pd
import pytest

from app.analysis.ablation import run_ablation, variant_config
from app.autograd.tensor import BACKWARD_RULES
from app.core.config import load_run_config
from app.core.errors import ConfigError
from main import EXIT_CHECK_FAILED, EXIT_ERROR, EXIT_OK, main

TINY_CFG = """\
# tiny end-to-end run
run.output_dir = {out}
run.seed = 0
data.root = {data}

backbone.input_size = 8
backbone.front_channels = 3
backbone.tail_channels = 4
backbone.tail_pool = false
st2n.conv_width = 4
st2n.lstm_hidden = 3
trl.hidden = 3

train.stage1_iterations = 2
train.stage2_iterations = 2
train.batch_size = 2
train.frames = 2
train.log_interval = 1
train.checkpoint_interval = 1

synth.num_identities = 4
synth.cameras = 2
synth.sequences_per_camera = 1
synth.frames = 3
synth.image_size = 8
synth.noise = 0

eval.trials = 2
eval.ranks = 1,2
"""


@pytest.fixture
def cfg(tmp_path) -> Path:
    path = tmp_path / "tiny.cfg"
    path.write_text(TINY_CFG.format(out=tmp_path / "out", data=tmp_path / "data"))
    return path


@pytest.fixture
def generated(cfg) -> Path:
    assert main(["gen", "--config", str(cfg)]) == EXIT_OK
    return cfg


@pytest.fixture
def trained(generated) -> Path:
    assert main(["train", "--config", str(generated)]) == EXIT_OK
    return generated


# =============================================================================
# gen / train
# =============================================================================

class TestGenAndTrain:

    def test_gen_writes_the_dataset(self, cfg, tmp_path, capsys):
        assert main(["gen", "--config", str(cfg)]) == EXIT_OK
        assert (tmp_path / "data" / "placements.csv").exists()
        assert (tmp_path / "data" / "0004" / "cam2" / "seq00" / "frame_0002.ppm").exists()
        assert "4 identities, 2 cameras, 8 sequences" in capsys.readouterr().out

    def test_missing_required_key(self, tmp_path):
        path = tmp_path / "broken.cfg"
        path.write_text("train.frames = 2\n")
        assert main(["gen", "--config", str(path)]) == EXIT_ERROR

    def test_malformed_line(self, tmp_path):
        path = tmp_path / "broken.cfg"
        path.write_text("data.root = x\nnot a setting\n")
        assert main(["gen", "--config", str(path)]) == EXIT_ERROR

    def test_unknown_command(self, cfg):
        with pytest.raises(SystemExit):
            main(["fit", "--config", str(cfg)])

    def test_train_all_writes_both_stages(self, generated, tmp_path, capsys):
        assert main(["train", "--config", str(generated), "--stage", "all"]) == EXIT_OK
        out = tmp_path / "out"
        assert (out / "stage1.ckpt").exists() and (out / "stage2.ckpt").exists()
        assert len(pd.read_csv(out / "loss_log.csv")) == 4
        assert "stage 2 iteration 2" in capsys.readouterr().out

    def test_train_out_override(self, generated, tmp_path):
        assert main(["train", "--config", str(generated), "--stage", "1", "--out", str(tmp_path / "other")]) == EXIT_OK
        assert (tmp_path / "other" / "stage1.ckpt").exists()
        assert not (tmp_path / "out" / "stage1.ckpt").exists()

    def test_stage_two_without_stage_one(self, generated):
        assert main(["train", "--config", str(generated), "--stage", "2"]) == EXIT_ERROR

    def test_train_without_data(self, cfg):
        assert main(["train", "--config", str(cfg)]) == EXIT_ERROR

    def test_resume_finished_run(self, trained, tmp_path):
        before = (tmp_path / "out" / "stage2.ckpt").read_bytes()
        assert main(["train", "--config", str(trained), "--resume"]) == EXIT_OK
        assert (tmp_path / "out" / "stage2.ckpt").read_bytes() == before


# =============================================================================
# eval / alignviz
# =============================================================================

class TestEvalAndAlignviz:

    def test_eval_prints_summary(self, trained, tmp_path, capsys):
        assert main(["eval", "--config", str(trained)]) == EXIT_OK
        printed = capsys.readouterr().out
        assert "Rank-1" in printed and "mAP" in printed
        summary = pd.read_csv(tmp_path / "out" / "eval_half10_summary.csv")
        assert list(summary["stream"]) == ["fused", "main", "aligned"]
        assert (summary["Rank-2"] == 1.0).all()

    def test_eval_fixed_protocol(self, trained, tmp_path):
        checkpoint = tmp_path / "out" / "stage2.ckpt"
        assert main(["eval", "--config", str(trained), "--protocol", "fixed", "--checkpoint", str(checkpoint)]) == EXIT_OK
        assert (tmp_path / "out" / "eval_fixed_summary.csv").exists()

    def test_eval_cross_dataset(self, trained, tmp_path, capsys):
        assert main(["eval", "--config", str(trained), "--cross", str(tmp_path / "data")]) == EXIT_OK
        assert "[data -> data]" in capsys.readouterr().out
        summary = pd.read_csv(tmp_path / "out" / "cross_half10_summary.csv")
        assert set(summary["test_domain"]) == {"data"}

    def test_cross_without_a_root(self, trained):
        assert main(["eval", "--config", str(trained), "--cross"]) == EXIT_ERROR

    def test_checkpoint_from_another_seed(self, trained, tmp_path):
        checkpoint = tmp_path / "out" / "stage2.ckpt"
        assert main(["eval", "--config", str(trained), "--seed", "3", "--checkpoint", str(checkpoint)]) == EXIT_ERROR

    def test_alignviz(self, trained, tmp_path, capsys):
        assert main(["alignviz", "--config", str(trained), "--sequence", "0001/cam1/seq00"]) == EXIT_OK
        report_dir = tmp_path / "out" / "alignviz" / "0001_cam1_seq00"
        assert len(pd.read_csv(report_dir / "theta.csv")) == 3
        assert len(list(report_dir.glob("*.ppm"))) == 6
        assert "corr(" in capsys.readouterr().out

    def test_alignviz_unknown_sequence(self, generated):
        assert main(["alignviz", "--config", str(generated), "--sequence", "0042/cam1/seq00"]) == EXIT_ERROR


# =============================================================================
# gradcheck / ablate
# =============================================================================

class TestGradcheckAndAblate:

    def test_gradcheck_passes(self, cfg, capsys):
        assert main(["gradcheck", "--config", str(cfg)]) == EXIT_OK
        assert "PASS: max relative error" in capsys.readouterr().out

    def test_gradcheck_catches_a_broken_rule(self, cfg, monkeypatch):
        monkeypatch.setitem(BACKWARD_RULES, "tanh", lambda ctx, inputs, out, g: (2.0 * g * (1.0 - out * out),))
        assert main(["gradcheck", "--config", str(cfg)]) == EXIT_CHECK_FAILED

    def test_ablate_writes_table(self, generated, tmp_path, capsys):
        variant = "G+BiLSTM_g+BiLSTM_s+ST2N"
        assert main(["ablate", "--config", str(generated), "--variants", variant, "--seeds", "0"]) == EXIT_OK
        table = pd.read_csv(tmp_path / "out" / "ablation.csv")
        assert list(table.columns) == ["variant", "seed", "Rank-1", "Rank-5", "Rank-20", "mAP"]
        assert table["variant"].tolist() == [variant]
        # two test identities per trial, so every probe is matched by rank 5
        assert table["Rank-5"].tolist() == [1.0]
        trial_dir = tmp_path / "out" / "ablation" / "G-BiLSTM_g-BiLSTM_s-ST2N" / "seed0" / "trial01"
        assert (trial_dir / "stage2.ckpt").exists()
        assert variant in capsys.readouterr().out

    def test_ablate_unknown_variant(self, generated):
        assert main(["ablate", "--config", str(generated), "--variants", "G+GRU", "--seeds", "0"]) == EXIT_ERROR

    def test_variant_config(self, cfg):
        config = variant_config(load_run_config(cfg), "G+LSTM_g", 4)
        assert config.ablation.alignment == "none" and config.ablation.beta == 1.0
        assert config.run.seed == 4
        assert config.eval.streams == ["fused"] and config.eval.ranks == [1, 5, 20]

    def test_unknown_variant_fails_before_training(self, cfg):
        with pytest.raises(ConfigError):
            run_ablation(load_run_config(cfg), ["G+GRU"], [0])

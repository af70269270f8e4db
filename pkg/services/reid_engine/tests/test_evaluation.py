"""
Retrieval metrics, identity splits and the evaluation protocols.
"""

import numpy as np
import pandas as pd
import pytest

from app.analysis.alignment_report import CORRELATED, alignment_report
from app.analysis.metrics import (
    average_precision,
    cmc_curve,
    first_match_ranks,
    mean_average_precision,
    pairwise_distances,
    same_camera_mask,
)
from app.analysis.protocols import (
    build_probe_gallery,
    cross_dataset_eval,
    extract_descriptors,
    run_protocol,
    split_identities,
    summarize,
    write_reports,
)
from app.core.config import ArchitectureConfig, BackboneConfig, EvalConfig, SynthConfig
from app.core.errors import ContractError, DatasetError, DimensionError, NumericError, ProtocolError
from app.core.seeding import SeedStreams
from app.models.schemas import EvalReport
from app.models.two_stream import TwoStreamReID
from app.services.dataset import JUNK_ID, load_dataset
from app.services.tensor_io import tensor_file_read
from app.simulation.synth import synth_generate


@pytest.fixture
def model(make_architecture, seeds) -> TwoStreamReID:
    return TwoStreamReID(make_architecture(), 2, seeds)


@pytest.fixture
def eval_cfg() -> EvalConfig:
    return EvalConfig(trials=2, ranks=[1, 2])


def _brute_force_rank(distances: np.ndarray, probe_id: int, gallery_ids: np.ndarray) -> int:
    """Position of the best-placed true match, counting strictly closer or earlier-tied entries"""
    best = None
    for j in np.flatnonzero(gallery_ids == probe_id):
        ahead = sum(
            1 for k in range(len(gallery_ids))
            if distances[k] < distances[j] or (distances[k] == distances[j] and k < j)
        )
        best = ahead + 1 if best is None else min(best, ahead + 1)
    return best


def _brute_force_ap(distances: np.ndarray, probe_id: int, gallery_ids: np.ndarray) -> float:
    """Precision at the position of every true match, averaged"""
    positions = []
    for j in np.flatnonzero(gallery_ids == probe_id):
        ahead = sum(
            1 for k in range(len(gallery_ids))
            if distances[k] < distances[j] or (distances[k] == distances[j] and k < j)
        )
        positions.append(ahead + 1)
    positions.sort()
    return sum((i + 1) / position for i, position in enumerate(positions)) / len(positions)


# =============================================================================
# CMC
# =============================================================================

class TestCMC:

    def test_worked_example(self):
        distances = np.array([[0.0, 1.0, 2.0]] * 3)
        np.testing.assert_allclose(cmc_curve(distances, [0, 1, 2], [0, 1, 2], [1, 2, 3]), [1 / 3, 2 / 3, 1.0])

    def test_ties_follow_gallery_order(self):
        distances = np.array([[1.0, 1.0]])
        assert first_match_ranks(distances, [5], [7, 5])[0] == 2
        assert first_match_ranks(distances, [5], [5, 7])[0] == 1

    def test_matches_brute_force(self, rng):
        for _ in range(100):
            p, g = rng.integers(1, 6), rng.integers(2, 9)
            gallery_ids = rng.integers(0, 4, size=g)
            probe_ids = rng.choice(gallery_ids, size=p)
            distances = rng.integers(0, 4, size=(p, g)).astype(np.float64)  # coarse values force ties
            expected = [_brute_force_rank(distances[i], probe_ids[i], gallery_ids) for i in range(p)]
            np.testing.assert_array_equal(first_match_ranks(distances, probe_ids, gallery_ids), expected)
            curve = cmc_curve(distances, probe_ids, gallery_ids, list(range(1, g + 1)))
            assert all(a <= b for a, b in zip(curve, curve[1:]))
            assert curve[-1] == 1.0

    def test_invariant_under_increasing_transform(self, rng):
        for _ in range(100):
            distances = rng.integers(0, 8, size=(10, 20)).astype(np.float64) / 2.0
            gallery_ids = rng.integers(0, 6, size=20)
            probe_ids = rng.choice(gallery_ids, size=10)
            ranks = list(range(1, 21))
            before = cmc_curve(distances, probe_ids, gallery_ids, ranks)
            after = cmc_curve(distances ** 3 + distances, probe_ids, gallery_ids, ranks)
            assert before == after

    def test_mask_removes_gallery_entries(self):
        distances = np.array([[0.0, 1.0, 2.0]])
        mask = np.array([[False, True, True]])
        assert first_match_ranks(distances, [4], [4, 9, 4])[0] == 1
        assert first_match_ranks(distances, [4], [4, 9, 4], mask)[0] == 2

    def test_junk_never_matches(self):
        distances = np.array([[0.0, 1.0]])
        assert first_match_ranks(distances, [3], [JUNK_ID, 3])[0] == 2

    def test_probe_without_match(self):
        with pytest.raises(ProtocolError):
            cmc_curve(np.zeros((1, 2)), [1], [2, 3], [1])

    def test_rank_must_be_positive(self):
        with pytest.raises(ContractError):
            cmc_curve(np.zeros((1, 1)), [1], [1], [0])

    def test_shape_and_finiteness(self):
        with pytest.raises(DimensionError):
            cmc_curve(np.zeros((2, 2)), [1], [1, 2], [1])
        with pytest.raises(NumericError):
            cmc_curve(np.array([[np.nan]]), [1], [1], [1])


# =============================================================================
# mAP
# =============================================================================

class TestMeanAveragePrecision:

    def test_average_precision_of_a_ranking(self):
        assert average_precision(np.array([True, False, True])) == pytest.approx(5 / 6)

    def test_single_match_at_rank_one(self):
        assert mean_average_precision(np.array([[0.0, 1.0]]), [1], [1, 2]) == 1.0

    def test_invariant_under_monotone_transform(self, rng):
        distances = rng.uniform(0.0, 3.0, size=(4, 6))
        probe_ids, gallery_ids = [0, 1, 2, 0], [0, 1, 2, 0, 1, 2]
        before = mean_average_precision(distances, probe_ids, gallery_ids)
        after = mean_average_precision(distances ** 3 + distances, probe_ids, gallery_ids)
        assert after == pytest.approx(before)
        assert 0.0 < before <= 1.0

    def test_matches_brute_force(self, rng):
        for _ in range(100):
            distances = rng.integers(0, 6, size=(10, 20)).astype(np.float64)  # coarse values force ties
            gallery_ids = rng.integers(0, 5, size=20)
            probe_ids = rng.choice(gallery_ids, size=10)
            expected = np.mean([_brute_force_ap(distances[i], probe_ids[i], gallery_ids) for i in range(10)])
            assert abs(mean_average_precision(distances, probe_ids, gallery_ids) - expected) <= 1e-12

    def test_removing_a_non_match_never_lowers_ap(self, rng):
        for _ in range(100):
            distances = rng.uniform(0.0, 1.0, size=(1, 10))
            gallery_ids = rng.integers(0, 3, size=10)
            probe_ids = [gallery_ids[0]]
            before = mean_average_precision(distances, probe_ids, gallery_ids)
            for j in np.flatnonzero(gallery_ids != probe_ids[0]):
                keep = np.arange(10) != j
                after = mean_average_precision(distances[:, keep], probe_ids, gallery_ids[keep])
                assert after >= before - 1e-12

    def test_probe_without_match(self):
        with pytest.raises(ProtocolError):
            mean_average_precision(np.zeros((1, 1)), [1], [2])

    def test_same_camera_mask(self):
        mask = same_camera_mask([1], [1], [1, 1, 2], [1, 2, 1])
        np.testing.assert_array_equal(mask, [[False, True, True]])

    def test_pairwise_distances(self, rng):
        a, b = rng.normal(size=(3, 5)), rng.normal(size=(4, 5))
        expected = np.linalg.norm(a[:, None, :] - b[None, :, :], axis=-1)
        np.testing.assert_allclose(pairwise_distances(a, b), expected, atol=1e-10)
        with pytest.raises(DimensionError):
            pairwise_distances(a, b[:, :4])


# =============================================================================
# Splits
# =============================================================================

class TestSplits:

    def test_half10_halves_are_disjoint_and_deterministic(self):
        ids = list(range(1, 21))
        train, test = split_identities(ids, "half10", SeedStreams(0), trial=3)
        assert len(train) == 10 and len(test) == 10
        assert not set(train) & set(test)
        assert sorted(train + test) == ids
        assert split_identities(ids, "half10", SeedStreams(0), trial=3) == (train, test)

    def test_half10_trials_differ(self):
        ids = list(range(1, 21))
        splits = {tuple(split_identities(ids, "half10", SeedStreams(0), trial=t)[0]) for t in range(10)}
        assert len(splits) > 1

    def test_fixed_split(self):
        assert split_identities([4, 1, 3, 2, 5, 6], "fixed", SeedStreams(0)) == ([1, 2, 3], [4, 5, 6])
        assert split_identities(range(1, 7), "fixed", SeedStreams(0), fixed_train=2) == ([1, 2], [3, 4, 5, 6])

    def test_too_few_identities(self):
        with pytest.raises(ProtocolError):
            split_identities([1, 2, 3], "half10", SeedStreams(0))

    def test_unknown_protocol(self):
        with pytest.raises(ProtocolError):
            split_identities([1, 2, 3, 4], "leave-one-out", SeedStreams(0))


# =============================================================================
# Protocol runs
# =============================================================================

class TestProtocols:

    def test_half10_on_tiny_dataset(self, dataset, model, eval_cfg):
        reports = run_protocol(dataset, model, "half10", 0, eval_cfg)
        assert len(reports) == 2 * len(eval_cfg.streams)
        for report in reports:
            assert report.cmc[1] == 1.0  # single-shot gallery of 2 identities
            assert 0.0 <= report.mean_ap <= 1.0
            assert report.distances.shape == (2, 2)
            assert sorted(report.probe_ids) == sorted(report.gallery_ids)

    def test_half10_is_single_shot(self, dataset, eval_cfg):
        split = build_probe_gallery(dataset, [1, 2], "half10", eval_cfg)
        assert [r.camera for r in split.probes] == [1, 1]
        assert [r.camera for r in split.gallery] == [2, 2]
        assert split.mask is None

    def test_fixed_protocol_with_distractors(self, tmp_path, make_architecture, seeds):
        root = tmp_path / "with_junk"
        synth_generate(SynthConfig(num_identities=4, cameras=2, sequences_per_camera=1, frames=3, image_size=8, distractor_sequences=1), root, seed=3)
        dataset = load_dataset(root)
        split = build_probe_gallery(dataset, [3, 4], "fixed", EvalConfig())
        assert [r.identity for r in split.probes] == [3, 4]
        assert sorted(r.identity for r in split.gallery) == [JUNK_ID, JUNK_ID, 3, 3, 4, 4]
        assert split.mask.shape == (2, 6)

        model = TwoStreamReID(make_architecture(), 2, seeds)
        reports = run_protocol(dataset, model, "fixed", 0, EvalConfig(ranks=[1, 6]))
        assert [r.stream for r in reports] == ["fused", "main", "aligned"]
        assert all(r.trial == 0 and r.cmc[-1] == 1.0 for r in reports)

    def test_fixed_uses_checkpoint_identities(self, dataset, model, eval_cfg):
        reports = run_protocol(dataset, model, "fixed", 0, eval_cfg, train_identities=[1, 4])
        assert set(reports[0].probe_ids) == {2, 3}

    def test_half10_leaves_out_checkpoint_identities(self, dataset, model):
        eval_cfg = EvalConfig(trials=6, ranks=[1, 2])
        trained = split_identities(dataset.identities(), "half10", SeedStreams(0), 0)[0]
        reports = run_protocol(dataset, model, "half10", 0, eval_cfg, train_identities=trained)
        trials = {r.trial for r in reports}
        assert 0 in trials
        for report in reports:
            assert set(report.probe_ids).isdisjoint(trained)
            assert set(report.gallery_ids).isdisjoint(trained)
        for trial in set(range(6)) - trials:
            test_ids = split_identities(dataset.identities(), "half10", SeedStreams(0), trial)[1]
            assert len(set(test_ids) - set(trained)) < 2

    def test_half10_with_every_identity_trained(self, dataset, model, eval_cfg):
        with pytest.raises(ProtocolError):
            run_protocol(dataset, model, "half10", 0, eval_cfg, train_identities=dataset.identities())

    def test_train_fn_ignores_checkpoint_identities(self, dataset, model, eval_cfg):
        reports = run_protocol(
            dataset, None, "half10", 0, eval_cfg, train_fn=lambda ids, trial: model, train_identities=dataset.identities(),
        )
        assert {r.trial for r in reports} == {0, 1}

    def test_train_fn_is_called_per_trial(self, dataset, model, eval_cfg):
        calls = []

        def train_fn(train_ids, trial):
            calls.append((trial, train_ids))
            return model

        run_protocol(dataset, None, "half10", 5, eval_cfg, train_fn=train_fn)
        assert [trial for trial, _ in calls] == [0, 1]
        for trial, train_ids in calls:
            assert train_ids == split_identities(dataset.identities(), "half10", SeedStreams(5), trial)[0]

    def test_needs_a_model(self, dataset, eval_cfg):
        with pytest.raises(ProtocolError):
            run_protocol(dataset, None, "half10", 0, eval_cfg)

    def test_missing_camera(self, dataset, model):
        with pytest.raises(ProtocolError):
            run_protocol(dataset, model, "half10", 0, EvalConfig(probe_camera=3))

    def test_cross_dataset_matches_plain_run(self, dataset, model, eval_cfg):
        plain = run_protocol(dataset, model, "half10", 0, eval_cfg)
        crossed = cross_dataset_eval(model, dataset, "half10", 0, eval_cfg, "tiny", "tiny-shifted")
        for a, b in zip(plain, crossed):
            assert a.cmc == b.cmc and a.mean_ap == b.mean_ap
            assert (b.train_domain, b.test_domain) == ("tiny", "tiny-shifted")
        assert summarize(crossed)[0].test_domain == "tiny-shifted"

    def test_cross_dataset_keeps_foreign_identities(self, dataset, model, eval_cfg, tmp_path):
        args = (model, dataset, "fixed", 0, eval_cfg, "a", "b")
        foreign = cross_dataset_eval(*args, train_identities=[1, 4], source_root=tmp_path / "elsewhere")
        own = cross_dataset_eval(*args, train_identities=[1, 4], source_root=dataset.root)
        assert set(foreign[0].probe_ids) == {3, 4}
        assert set(own[0].probe_ids) == {2, 3}

    def test_frame_size_mismatch(self, dataset, seeds):
        config = ArchitectureConfig(backbone=BackboneConfig(
            input_size=16, kernel_size=3, front_channels=[3], tail_channels=[4], front_pool=True, tail_pool=False,
        ))
        with pytest.raises(DimensionError):
            extract_descriptors(TwoStreamReID(config, 2, seeds), dataset, dataset.select())


# =============================================================================
# Reports
# =============================================================================

def _report(trial, cmc, mean_ap, stream="fused"):
    return EvalReport(
        protocol="half10", trial=trial, stream=stream, ranks=[1, 2], cmc=cmc, mean_ap=mean_ap,
        distances=np.ones((2, 2)), probe_ids=[1, 2], gallery_ids=[1, 2],
    )


class TestReports:

    def test_summarize_averages_trials(self):
        summaries = summarize([_report(0, [0.5, 1.0], 0.6), _report(1, [1.0, 1.0], 0.8), _report(0, [0.0, 1.0], 0.5, "main")])
        fused = next(s for s in summaries if s.stream == "fused")
        assert fused.trials == 2
        assert fused.cmc == pytest.approx([0.75, 1.0])
        assert fused.mean_ap == pytest.approx(0.7)
        assert fused.as_row() == {"Rank-1": 0.75, "Rank-2": 1.0, "mAP": pytest.approx(0.7)}

    def test_write_reports(self, tmp_path):
        reports = [_report(0, [0.5, 1.0], 0.6), _report(1, [1.0, 1.0], 0.8)]
        summary_path = write_reports(reports, summarize(reports), tmp_path, tag="run")
        summary = pd.read_csv(summary_path)
        assert list(summary["Rank-1"]) == [0.75]
        cmc = pd.read_csv(tmp_path / "run_cmc.csv")
        assert len(cmc) == 4
        distances = tensor_file_read(tmp_path / "run_distances_trial01_fused.tsr")
        np.testing.assert_array_equal(distances.data, np.ones((2, 2)))


# =============================================================================
# Alignment diagnostics
# =============================================================================

class TestAlignmentReport:

    def test_report_files(self, dataset, model, tmp_path):
        record = dataset.select()[0]
        key, frames = record.key, record.frame_count
        report = alignment_report(model, dataset, key, tmp_path)
        table = pd.read_csv(report.theta_csv)
        assert list(table.columns) == ["t", "s_x", "s_y", "tau_x", "tau_y"]
        assert len(table) == frames
        # untrained localization predicts the identity transform
        np.testing.assert_allclose(report.thetas, np.tile([1.0, 1.0, 0.0, 0.0], (frames, 1)), atol=1e-6)
        assert len(report.images) == 2 * frames
        assert all(path.read_bytes().startswith(b"P6") for path in report.images)
        assert set(report.correlations) == set(CORRELATED)
        assert report.lines()[0].startswith(key)

    def test_training_mode_is_restored(self, dataset, model, tmp_path):
        model.train()
        alignment_report(model, dataset, dataset.select()[0].key, tmp_path)
        assert model.training

    def test_unknown_sequence(self, dataset, model, tmp_path):
        with pytest.raises(DatasetError):
            alignment_report(model, dataset, "0099/cam1/seq00", tmp_path)

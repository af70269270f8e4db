"""
RTRL DESK - Evaluation protocols

fixed   one identity-level split (first N identities train, rest test);
        every probe-camera test sequence is a probe, the gallery holds all
        test sequences plus junk distractors, and same-identity
        same-camera entries are masked out per probe.
half10  repeated random identity halves drawn from the `splits` stream
        keyed by trial; single-shot probe/gallery (first sequence of each
        identity on the probe / gallery camera). Results are averaged over
        trials. A model trained outside the protocol is scored only on
        identities it was not trained on; trials left with fewer than two
        such identities are skipped.
"""

from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from loguru import logger

from app.analysis.metrics import cmc_curve, mean_average_precision, pairwise_distances, same_camera_mask
from app.autograd.tensor import Tensor
from app.core.config import EvalConfig
from app.core.errors import DimensionError, ProtocolError
from app.core.seeding import SeedStreams
from app.models.schemas import EvalReport, EvalSummary
from app.models.two_stream import TwoStreamReID
from app.services.dataset import DatasetIndex, SequenceRecord
from app.services.tensor_io import tensor_file_write

PROTOCOLS = ("fixed", "half10")

TrainFn = Callable[[List[int], int], TwoStreamReID]


@dataclass
class ProbeGallery:
    probes: List[SequenceRecord]
    gallery: List[SequenceRecord]
    mask: Optional[np.ndarray] = None

    @property
    def probe_ids(self) -> List[int]:
        return [r.identity for r in self.probes]

    @property
    def gallery_ids(self) -> List[int]:
        return [r.identity for r in self.gallery]


# ============================================================
# SPLITS
# ============================================================

def split_identities(
    identities: Sequence[int],
    protocol: str,
    seeds: SeedStreams,
    trial: int = 0,
    fixed_train: Optional[int] = None,
) -> Tuple[List[int], List[int]]:
    """(train, test) identity lists, disjoint and each sorted"""
    ids = sorted(identities)
    if protocol == "half10":
        order = seeds.generator("splits", trial).permutation(len(ids))
        half = len(ids) // 2
        train = sorted(ids[i] for i in order[:half])
        test = sorted(ids[i] for i in order[half:])
    elif protocol == "fixed":
        n = len(ids) // 2 if fixed_train is None else fixed_train
        train, test = ids[:n], ids[n:]
    else:
        raise ProtocolError(f"unknown protocol '{protocol}' (expected one of {PROTOCOLS})")
    if len(train) < 2 or len(test) < 2:
        raise ProtocolError(f"split leaves {len(train)} train / {len(test)} test identities, need at least 2 each")
    return train, test


def check_cameras(dataset: DatasetIndex, eval_cfg: EvalConfig) -> None:
    cameras = dataset.cameras()
    if len(cameras) < 2:
        raise ProtocolError(f"evaluation needs 2 cameras, dataset {dataset.root} has {len(cameras)}")
    for camera in (eval_cfg.probe_camera, eval_cfg.gallery_camera):
        if camera not in cameras:
            raise ProtocolError(f"camera {camera} not present in {dataset.root} (cameras {cameras})")


def build_probe_gallery(dataset: DatasetIndex, test_ids: Sequence[int], protocol: str, eval_cfg: EvalConfig) -> ProbeGallery:
    if protocol == "half10":
        probes, gallery = [], []
        for identity in test_ids:
            probe_side = dataset.select([identity], eval_cfg.probe_camera)
            gallery_side = dataset.select([identity], eval_cfg.gallery_camera)
            if gallery_side:
                gallery.append(gallery_side[0])
                if probe_side:
                    probes.append(probe_side[0])
        return ProbeGallery(probes=probes, gallery=gallery)

    probes = dataset.select(test_ids, eval_cfg.probe_camera)
    if eval_cfg.exclude_same_camera:
        gallery = dataset.select(test_ids)
    else:
        gallery = dataset.select(test_ids, eval_cfg.gallery_camera)
    if eval_cfg.junk_policy == "distractor":
        gallery = gallery + dataset.junk()
    mask = None
    if eval_cfg.exclude_same_camera:
        mask = same_camera_mask(
            [r.identity for r in probes], [r.camera for r in probes],
            [r.identity for r in gallery], [r.camera for r in gallery],
        )
        gallery_ids = np.array([r.identity for r in gallery])
        keep = [p for p, r in enumerate(probes) if np.any(mask[p] & (gallery_ids == r.identity))]
        if len(keep) < len(probes):
            logger.warning(f"⚠️ {len(probes) - len(keep)} probes have no cross-camera match and are skipped")
        probes = [probes[p] for p in keep]
        mask = mask[keep]
    return ProbeGallery(probes=probes, gallery=gallery, mask=mask)


# ============================================================
# DESCRIPTORS
# ============================================================

def extract_descriptors(
    model: TwoStreamReID,
    dataset: DatasetIndex,
    records: Sequence[SequenceRecord],
    max_frames: int = 0,
) -> Dict[str, Dict[str, np.ndarray]]:
    """Per sequence key, the eval-mode fused/main/aligned descriptors"""
    size = model.config.backbone.input_size
    frame_size = dataset.frame_size()
    if frame_size is not None and frame_size != size:
        raise DimensionError(f"dataset {dataset.root} has {frame_size}×{frame_size} frames, model expects {size}×{size}")
    out: Dict[str, Dict[str, np.ndarray]] = {}
    for record in records:
        if record.key in out:
            continue
        frames = dataset.load_frames(record, max_frames)
        out[record.key] = {name: row[0] for name, row in model.descriptors(Tensor(frames[None])).items()}
    return out


def _stack(descriptors: Dict[str, Dict[str, np.ndarray]], records: Sequence[SequenceRecord], stream: str) -> np.ndarray:
    return np.stack([descriptors[r.key][stream] for r in records])


# ============================================================
# PROTOCOL RUNS
# ============================================================

def evaluate_split(
    model: TwoStreamReID,
    dataset: DatasetIndex,
    split: ProbeGallery,
    protocol: str,
    trial: int,
    eval_cfg: EvalConfig,
) -> List[EvalReport]:
    if not split.probes:
        raise ProtocolError(f"trial {trial}: no probe sequences on camera {eval_cfg.probe_camera}")
    descriptors = extract_descriptors(model, dataset, split.probes + split.gallery, eval_cfg.max_frames)
    reports = []
    for stream in eval_cfg.streams:
        distances = pairwise_distances(_stack(descriptors, split.probes, stream), _stack(descriptors, split.gallery, stream))
        reports.append(EvalReport(
            protocol=protocol,
            trial=trial,
            stream=stream,
            ranks=list(eval_cfg.ranks),
            cmc=cmc_curve(distances, split.probe_ids, split.gallery_ids, eval_cfg.ranks, split.mask),
            mean_ap=mean_average_precision(distances, split.probe_ids, split.gallery_ids, split.mask),
            distances=distances,
            probe_ids=split.probe_ids,
            gallery_ids=split.gallery_ids,
        ))
    return reports


def _held_out(test_ids: List[int], train_identities: Sequence[int], protocol: str, trial: int) -> Optional[List[int]]:
    """Test ids outside the model's training set; None when too few remain"""
    trained = set(train_identities)
    kept = [i for i in test_ids if i not in trained]
    if len(kept) < len(test_ids):
        logger.warning(
            f"⚠️ {protocol} trial {trial + 1}: {len(test_ids) - len(kept)} test identities were used to train "
            f"the model and are left out"
        )
    if len(kept) < 2:
        logger.warning(f"⚠️ {protocol} trial {trial + 1} skipped: only {len(kept)} held-out identities")
        return None
    return kept


def run_protocol(
    dataset: DatasetIndex,
    model: Optional[TwoStreamReID],
    protocol: str,
    seed: int,
    eval_cfg: EvalConfig,
    train_fn: Optional[TrainFn] = None,
    train_identities: Optional[Sequence[int]] = None,
) -> List[EvalReport]:
    """
    Evaluate every trial of the protocol. With train_fn, a fresh model is
    trained on each trial's training identities; otherwise `model` is
    evaluated on each trial's test identities minus train_identities (the
    identities it was trained on). For the fixed protocol, train_identities
    replace the default split.
    """
    check_cameras(dataset, eval_cfg)
    if model is None and train_fn is None:
        raise ProtocolError("run_protocol needs a model or a train_fn")
    seeds = SeedStreams(seed)
    identities = dataset.identities()
    trials = eval_cfg.trials if protocol == "half10" else 1

    reports: List[EvalReport] = []
    for trial in range(trials):
        if protocol == "fixed" and train_identities:
            train_ids = sorted(set(train_identities) & set(identities))
            test_ids = [i for i in identities if i not in set(train_identities)]
            if len(test_ids) < 2:
                raise ProtocolError(f"only {len(test_ids)} identities remain outside the training set")
        else:
            train_ids, test_ids = split_identities(identities, protocol, seeds, trial, eval_cfg.fixed_train_identities)
            if train_fn is None and train_identities:
                test_ids = _held_out(test_ids, train_identities, protocol, trial)
                if test_ids is None:
                    continue
        trial_model = train_fn(train_ids, trial) if train_fn is not None else model
        split = build_probe_gallery(dataset, test_ids, protocol, eval_cfg)
        trial_reports = evaluate_split(trial_model, dataset, split, protocol, trial, eval_cfg)
        for report in trial_reports:
            logger.info(
                f"📊 {protocol} trial {trial + 1}/{trials} [{report.stream}] "
                f"Rank-1 {report.cmc[0] * 100:.2f}  mAP {report.mean_ap * 100:.2f} "
                f"({len(split.probes)} probes, {len(split.gallery)} gallery)"
            )
        reports.extend(trial_reports)
    if not reports:
        raise ProtocolError(f"no {protocol} trial keeps 2 identities outside the model's training set")
    return reports


def cross_dataset_eval(
    model: TwoStreamReID,
    dataset: DatasetIndex,
    protocol: str,
    seed: int,
    eval_cfg: EvalConfig,
    train_domain: str,
    test_domain: str,
    train_identities: Optional[Sequence[int]] = None,
    source_root: Optional[Union[str, Path]] = None,
) -> List[EvalReport]:
    """
    Evaluate a model trained elsewhere on `dataset` without any training on
    it. train_identities are excluded only when source_root is the evaluated
    dataset itself; ids of another dataset name other people.
    """
    logger.info(f"🔬 Cross-dataset evaluation: {train_domain} -> {test_domain}")
    same_source = source_root is not None and Path(source_root).resolve() == Path(dataset.root).resolve()
    if train_identities and not same_source:
        logger.info(f"🔬 {test_domain} is not the training dataset, every identity is eligible for testing")
        train_identities = None
    reports = run_protocol(dataset, model, protocol, seed, eval_cfg, train_identities=train_identities)
    return [r.model_copy(update={"train_domain": train_domain, "test_domain": test_domain}) for r in reports]


def summarize(reports: Sequence[EvalReport]) -> List[EvalSummary]:
    """Average CMC and mAP over trials, one summary per stream"""
    by_stream: Dict[str, List[EvalReport]] = {}
    for report in reports:
        by_stream.setdefault(report.stream, []).append(report)
    summaries = []
    for stream, group in by_stream.items():
        first = group[0]
        summaries.append(EvalSummary(
            protocol=first.protocol,
            stream=stream,
            trials=len(group),
            ranks=first.ranks,
            cmc=[float(v) for v in np.mean([r.cmc for r in group], axis=0)],
            mean_ap=float(np.mean([r.mean_ap for r in group])),
            train_domain=first.train_domain,
            test_domain=first.test_domain,
        ))
    return summaries


# ============================================================
# OUTPUT
# ============================================================

def write_reports(reports: Sequence[EvalReport], summaries: Sequence[EvalSummary], directory: Union[str, Path], tag: str = "eval") -> Path:
    """Per-trial CMC rows, the summary table, and distance matrices as tensor files"""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    rows = [
        {"protocol": r.protocol, "trial": r.trial, "stream": r.stream, "rank": k, "value": v,
         "train_domain": r.train_domain, "test_domain": r.test_domain}
        for r in reports for k, v in zip(r.ranks, r.cmc)
    ]
    pd.DataFrame(rows).to_csv(directory / f"{tag}_cmc.csv", index=False)

    summary_rows = [{"stream": s.stream, "protocol": s.protocol, "trials": s.trials, **s.as_row(),
                     "train_domain": s.train_domain, "test_domain": s.test_domain} for s in summaries]
    summary_path = directory / f"{tag}_summary.csv"
    pd.DataFrame(summary_rows).to_csv(summary_path, index=False)

    for r in reports:
        tensor_file_write(directory / f"{tag}_distances_trial{r.trial:02d}_{r.stream}.tsr", r.distances)
    logger.info(f"💾 Evaluation written to {directory} ({len(reports)} reports)")
    return summary_path

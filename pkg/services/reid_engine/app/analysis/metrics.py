"""
RTRL DESK - Retrieval metrics
CMC and mAP over a probes × gallery distance matrix.

Ranking is by ascending distance with ties broken by gallery order.
An optional boolean mask [P, G] removes gallery entries per probe
(same-camera exclusion); junk entries (id -1) never match any probe.
"""

from typing import List, Optional, Sequence

import numpy as np

from app.core.errors import ContractError, DimensionError, NumericError, ProtocolError


def pairwise_distances(probes: np.ndarray, gallery: np.ndarray) -> np.ndarray:
    """Euclidean distances between descriptor rows, [P, G]"""
    if probes.ndim != 2 or gallery.ndim != 2 or probes.shape[1] != gallery.shape[1]:
        raise DimensionError(f"descriptor dims disagree: probes {probes.shape}, gallery {gallery.shape}")
    p = probes.astype(np.float64)
    g = gallery.astype(np.float64)
    squared = (p * p).sum(axis=1)[:, None] + (g * g).sum(axis=1)[None, :] - 2.0 * p @ g.T
    return np.sqrt(np.maximum(squared, 0.0))


def _ranked_matches(
    distances: np.ndarray,
    probe_ids: Sequence[int],
    gallery_ids: Sequence[int],
    mask: Optional[np.ndarray],
) -> List[np.ndarray]:
    """Per probe, the boolean match vector of its ranked (unmasked) gallery"""
    distances = np.asarray(distances)
    probe_ids = np.asarray(probe_ids)
    gallery_ids = np.asarray(gallery_ids)
    if distances.shape != (len(probe_ids), len(gallery_ids)):
        raise DimensionError(f"distance matrix {distances.shape} does not match {len(probe_ids)} probes × {len(gallery_ids)} gallery")
    if mask is not None and mask.shape != distances.shape:
        raise DimensionError(f"mask {mask.shape} does not match distances {distances.shape}")
    if not np.all(np.isfinite(distances)):
        raise NumericError("distance matrix holds non-finite values")

    ranked = []
    for p, probe_id in enumerate(probe_ids):
        order = np.argsort(distances[p], kind="stable")
        if mask is not None:
            order = order[mask[p, order]]
        matches = gallery_ids[order] == probe_id
        if not matches.any():
            raise ProtocolError(f"probe {p} (id {probe_id}) has no matching gallery entry")
        ranked.append(matches)
    return ranked


def first_match_ranks(
    distances: np.ndarray,
    probe_ids: Sequence[int],
    gallery_ids: Sequence[int],
    mask: Optional[np.ndarray] = None,
) -> np.ndarray:
    """1-based rank of each probe's nearest true match"""
    return np.array([int(np.argmax(m)) + 1 for m in _ranked_matches(distances, probe_ids, gallery_ids, mask)])


def cmc_curve(
    distances: np.ndarray,
    probe_ids: Sequence[int],
    gallery_ids: Sequence[int],
    ranks: Sequence[int],
    mask: Optional[np.ndarray] = None,
) -> List[float]:
    """CMC(k) for each requested k: fraction of probes matched within the top k"""
    if any(k < 1 for k in ranks):
        raise ContractError(f"ranks must be >= 1, got {list(ranks)}")
    first = first_match_ranks(distances, probe_ids, gallery_ids, mask)
    return [float(np.mean(first <= k)) for k in ranks]


def average_precision(matches: np.ndarray) -> float:
    """AP of one ranked match vector"""
    positions = np.flatnonzero(matches) + 1
    return float(np.mean(np.arange(1, len(positions) + 1) / positions))


def mean_average_precision(
    distances: np.ndarray,
    probe_ids: Sequence[int],
    gallery_ids: Sequence[int],
    mask: Optional[np.ndarray] = None,
) -> float:
    ranked = _ranked_matches(distances, probe_ids, gallery_ids, mask)
    return float(np.mean([average_precision(m) for m in ranked]))


def same_camera_mask(
    probe_ids: Sequence[int],
    probe_cameras: Sequence[int],
    gallery_ids: Sequence[int],
    gallery_cameras: Sequence[int],
) -> np.ndarray:
    """False where a gallery entry shares both identity and camera with the probe"""
    same_id = np.asarray(probe_ids)[:, None] == np.asarray(gallery_ids)[None, :]
    same_cam = np.asarray(probe_cameras)[:, None] == np.asarray(gallery_cameras)[None, :]
    return ~(same_id & same_cam)

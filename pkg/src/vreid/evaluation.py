"""Retrieval metrics for re-identification: per-query average precision,
mean AP, and the cumulative matching characteristic (CMC) curve.

Queries are ranked against a gallery by cosine or squared Euclidean
distance; a gallery item is relevant when it shares the query's vehicle
id.  Protocols may drop gallery items that share both the query's vehicle
and camera (the usual guard against trivial same-view matches).  Queries
with no valid relevant item are skipped, not scored zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EmptyEvaluationError, ShapeMismatchError
from .fusion import l2_normalize
from .losses import squared_euclidean_matrix

DISTANCES = ("cosine", "squared_euclidean")


@dataclass(frozen=True)
class FeatureSet:
    """Feature matrix with aligned vehicle and camera labels."""

    features: np.ndarray
    vehicle_ids: np.ndarray
    camera_ids: np.ndarray

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=np.float64)
        vids = np.asarray(self.vehicle_ids)
        cams = np.asarray(self.camera_ids)
        if feats.ndim != 2:
            raise ShapeMismatchError(f"features must be (N, d), got {feats.shape}")
        if not (feats.shape[0] == vids.shape[0] == cams.shape[0]):
            raise ShapeMismatchError(
                f"row counts disagree: features {feats.shape[0]}, "
                f"vehicle_ids {vids.shape[0]}, camera_ids {cams.shape[0]}"
            )
        if not np.all(np.isfinite(feats)):
            raise ValueError("features must be finite")
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "vehicle_ids", vids)
        object.__setattr__(self, "camera_ids", cams)

    def __len__(self) -> int:
        return self.features.shape[0]


@dataclass(frozen=True)
class EvalProtocol:
    """Distance choice, match filtering, and the CMC ranks to report."""

    distance: str = "cosine"
    exclude_same_camera: bool = False
    cmc_ranks: tuple[int, ...] = (1, 5, 10)

    def __post_init__(self):
        if self.distance not in DISTANCES:
            raise ValueError(f"distance must be one of {DISTANCES}, got {self.distance!r}")
        ranks = tuple(int(r) for r in self.cmc_ranks)
        if not ranks or any(r < 1 for r in ranks) or list(ranks) != sorted(ranks):
            raise ValueError(f"cmc_ranks must be ascending and >= 1, got {ranks}")
        object.__setattr__(self, "cmc_ranks", ranks)

    def to_dict(self) -> dict:
        return {
            "distance": self.distance,
            "exclude_same_camera": self.exclude_same_camera,
            "cmc_ranks": list(self.cmc_ranks),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvalProtocol":
        return cls(
            distance=str(d.get("distance", "cosine")),
            exclude_same_camera=bool(d.get("exclude_same_camera", False)),
            cmc_ranks=tuple(d.get("cmc_ranks", (1, 5, 10))),
        )


@dataclass(frozen=True)
class EvalReport:
    """Aggregate retrieval quality over a query set."""

    mAP: float
    cmc: tuple[tuple[int, float], ...]
    per_query_ap: tuple[float, ...]
    skipped_queries: int

    def to_dict(self) -> dict:
        return {
            "mAP": self.mAP,
            "cmc": [[rank, acc] for rank, acc in self.cmc],
            "per_query_ap": list(self.per_query_ap),
            "skipped_queries": self.skipped_queries,
        }


def _distance_matrix(queries: np.ndarray, gallery: np.ndarray, distance: str) -> np.ndarray:
    if queries.shape[-1] != gallery.shape[-1]:
        raise ShapeMismatchError(
            f"feature dims disagree: query {queries.shape[-1]} vs "
            f"gallery {gallery.shape[-1]}"
        )
    if distance == "cosine":
        return 1.0 - l2_normalize(queries) @ l2_normalize(gallery).T
    both = np.vstack([queries, gallery])
    return squared_euclidean_matrix(both)[: queries.shape[0], queries.shape[0] :]


def rank_gallery(
    query: np.ndarray,
    gallery: FeatureSet,
    protocol: EvalProtocol,
    query_meta: tuple,
):
    """Order the gallery by distance to one query.

    ``query_meta`` is the query's (vehicle_id, camera_id).  Items sharing
    both with the query are masked out when the protocol excludes same-
    camera matches.  Ties break by gallery index (stable sort).

    Returns:
        (ranked_indices, valid_mask): ranked original indices of the valid
        gallery items, plus the validity mask over all items.
    """
    query = np.asarray(query, dtype=np.float64).reshape(1, -1)
    dist = _distance_matrix(query, gallery.features, protocol.distance)[0]
    vid, cam = query_meta
    valid = np.ones(len(gallery), dtype=bool)
    if protocol.exclude_same_camera:
        valid = ~((gallery.vehicle_ids == vid) & (gallery.camera_ids == cam))
    candidates = np.flatnonzero(valid)
    order = np.argsort(dist[candidates], kind="stable")
    return candidates[order], valid


def average_precision(ranked_relevance) -> float | None:
    """AP of one ranked boolean list: mean of precision at each hit.

    Returns None when there is nothing relevant (the query is skipped,
    not scored zero).
    """
    rel = np.asarray(list(ranked_relevance), dtype=bool)
    total = int(rel.sum())
    if total == 0:
        return None
    hits = np.flatnonzero(rel)
    precisions = np.arange(1, total + 1) / (hits + 1)
    return float(precisions.sum() / total)


def cmc_curve(relevance_lists, max_rank: int) -> np.ndarray:
    """Fraction of queries whose first hit lands within each rank.

    Queries with no relevant item are excluded from the denominator.
    Entry ``r-1`` of the result corresponds to rank ``r``.
    """
    if max_rank < 1:
        raise ValueError(f"max_rank must be >= 1, got {max_rank}")
    counts = np.zeros(max_rank)
    n_valid = 0
    for rel in relevance_lists:
        rel = np.asarray(list(rel), dtype=bool)
        hits = np.flatnonzero(rel)
        if hits.size == 0:
            continue
        n_valid += 1
        first = hits[0]
        if first < max_rank:
            counts[first:] += 1
    if n_valid == 0:
        return counts
    return counts / n_valid


def _per_query_results(queries: FeatureSet, gallery: FeatureSet, protocol: EvalProtocol):
    """AP (or None when skipped) and ranked relevance per query."""
    dist = _distance_matrix(queries.features, gallery.features, protocol.distance)
    ap_by_query, relevance_lists = [], []
    for qi in range(len(queries)):
        vid, cam = queries.vehicle_ids[qi], queries.camera_ids[qi]
        valid = np.ones(len(gallery), dtype=bool)
        if protocol.exclude_same_camera:
            valid = ~((gallery.vehicle_ids == vid) & (gallery.camera_ids == cam))
        candidates = np.flatnonzero(valid)
        order = candidates[np.argsort(dist[qi, candidates], kind="stable")]
        rel = gallery.vehicle_ids[order] == vid
        ap_by_query.append(average_precision(rel))
        relevance_lists.append(rel)
    return ap_by_query, relevance_lists


def evaluate(
    queries: FeatureSet, gallery: FeatureSet, protocol: EvalProtocol | None = None
) -> EvalReport:
    """Rank every query against the gallery and aggregate mAP and CMC.

    Raises:
        EmptyEvaluationError: every query was skipped (no valid match).
    """
    if protocol is None:
        protocol = EvalProtocol()
    ap_by_query, relevance_lists = _per_query_results(queries, gallery, protocol)
    aps = [ap for ap in ap_by_query if ap is not None]
    if not aps:
        raise EmptyEvaluationError("no query has a valid gallery match")
    kept = [rel for ap, rel in zip(ap_by_query, relevance_lists) if ap is not None]
    max_rank = max(protocol.cmc_ranks)
    curve = cmc_curve(kept, max_rank)
    cmc = tuple((r, float(curve[r - 1])) for r in protocol.cmc_ranks)
    return EvalReport(
        mAP=float(np.mean(aps)),
        cmc=cmc,
        per_query_ap=tuple(aps),
        skipped_queries=len(ap_by_query) - len(aps),
    )


def evaluate_single_shot(
    queries: FeatureSet,
    gallery: FeatureSet,
    protocol: EvalProtocol | None = None,
    trials: int = 10,
    seed: int = 0,
) -> EvalReport:
    """Repeated-trial protocol: each trial keeps one random gallery image
    per vehicle id and the metrics are averaged over trials.

    This mirrors the single-shot evaluation convention of identity-split
    benchmarks; the trial count is a free protocol choice.
    """
    if protocol is None:
        protocol = EvalProtocol()
    if trials < 1:
        raise ValueError(f"trials must be >= 1, got {trials}")
    rng = np.random.default_rng(seed)
    uniq = np.unique(gallery.vehicle_ids)
    max_rank = max(protocol.cmc_ranks)
    maps, curves = [], []
    ap_sums = np.zeros(len(queries))
    ap_counts = np.zeros(len(queries))
    for _ in range(trials):
        keep = np.sort(
            np.asarray(
                [
                    rng.choice(np.flatnonzero(gallery.vehicle_ids == vid))
                    for vid in uniq
                ]
            )
        )
        sub = FeatureSet(
            features=gallery.features[keep],
            vehicle_ids=gallery.vehicle_ids[keep],
            camera_ids=gallery.camera_ids[keep],
        )
        ap_by_query, relevance_lists = _per_query_results(queries, sub, protocol)
        trial_aps = [ap for ap in ap_by_query if ap is not None]
        if not trial_aps:
            raise EmptyEvaluationError("no query has a valid gallery match")
        kept = [r for ap, r in zip(ap_by_query, relevance_lists) if ap is not None]
        maps.append(float(np.mean(trial_aps)))
        curves.append(cmc_curve(kept, max_rank))
        for qi, ap in enumerate(ap_by_query):
            if ap is not None:
                ap_sums[qi] += ap
                ap_counts[qi] += 1
    mean_curve = np.mean(np.asarray(curves), axis=0)
    per_query = tuple(float(s / c) for s, c in zip(ap_sums, ap_counts) if c > 0)
    return EvalReport(
        mAP=float(np.mean(maps)),
        cmc=tuple((r, float(mean_curve[r - 1])) for r in protocol.cmc_ranks),
        per_query_ap=per_query,
        skipped_queries=int(np.sum(ap_counts == 0)),
    )

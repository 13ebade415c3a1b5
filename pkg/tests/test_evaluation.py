"""Retrieval metrics against an independently written naive implementation."""

import numpy as np
import pytest

from vreid.errors import EmptyEvaluationError, ShapeMismatchError
from vreid.evaluation import (
    EvalProtocol,
    FeatureSet,
    average_precision,
    cmc_curve,
    evaluate,
    evaluate_single_shot,
    rank_gallery,
)


# ---------------------------------------------------------------------------
# Naive reference implementation: plain python loops, sorted() with explicit
# tie-break on the gallery index, textbook AP and CMC definitions.
# ---------------------------------------------------------------------------


def naive_distance(q, g, metric):
    if metric == "cosine":
        qn = q / max(np.linalg.norm(q), 1e-12)
        gn = g / max(np.linalg.norm(g), 1e-12)
        return 1.0 - float(qn @ gn)
    return float(((q - g) ** 2).sum())


def naive_evaluate(queries, gallery, protocol):
    """Independent mAP/CMC: returns (mAP, cmc_at_ranks, skipped)."""
    aps, first_hits = [], []
    skipped = 0
    max_rank = max(protocol.cmc_ranks)
    for qi in range(len(queries.vehicle_ids)):
        qvid = queries.vehicle_ids[qi]
        qcam = queries.camera_ids[qi]
        items = []
        for gi in range(len(gallery.vehicle_ids)):
            if protocol.exclude_same_camera and (
                gallery.vehicle_ids[gi] == qvid and gallery.camera_ids[gi] == qcam
            ):
                continue
            items.append(
                (naive_distance(queries.features[qi], gallery.features[gi], protocol.distance), gi)
            )
        items.sort(key=lambda t: (t[0], t[1]))
        rel = [gallery.vehicle_ids[gi] == qvid for _, gi in items]
        n_rel = sum(rel)
        if n_rel == 0:
            skipped += 1
            continue
        hits = 0
        ap = 0.0
        first = None
        for rank0, is_rel in enumerate(rel):
            if is_rel:
                hits += 1
                ap += hits / (rank0 + 1)
                if first is None:
                    first = rank0 + 1
        aps.append(ap / n_rel)
        first_hits.append(first)
    m_ap = sum(aps) / len(aps)
    cmc = [
        sum(1 for f in first_hits if f <= r) / len(first_hits)
        for r in protocol.cmc_ranks
    ]
    return m_ap, cmc, skipped


def random_sets(rng, n_query, n_gallery, dim, n_ids, n_cams=3):
    def build(n):
        return FeatureSet(
            features=rng.normal(size=(n, dim)),
            vehicle_ids=rng.integers(0, n_ids, size=n),
            camera_ids=rng.integers(0, n_cams, size=n),
        )

    return build(n_query), build(n_gallery)


class TestRankGallery:
    def test_query_itself_ranks_first(self):
        rng = np.random.default_rng(0)
        gallery = FeatureSet(
            features=rng.normal(size=(5, 4)),
            vehicle_ids=np.arange(5),
            camera_ids=np.zeros(5, dtype=int),
        )
        q = gallery.features[3]
        ranked, valid = rank_gallery(q, gallery, EvalProtocol(), (3, 1))
        assert ranked[0] == 3
        assert valid.all()

    def test_orthogonal_vectors_tie_break_by_index(self):
        gallery = FeatureSet(
            features=np.eye(4),
            vehicle_ids=np.arange(4),
            camera_ids=np.zeros(4, dtype=int),
        )
        q = np.asarray([0.0, 0.0, 0.0, 1.0])
        ranked, _ = rank_gallery(q, gallery, EvalProtocol(), (9, 9))
        # item 3 matches exactly; the rest tie at distance 1 -> index order
        assert ranked.tolist() == [3, 0, 1, 2]

    def test_ordering_matches_brute_force(self):
        rng = np.random.default_rng(1)
        gallery = FeatureSet(
            features=rng.normal(size=(10, 6)),
            vehicle_ids=rng.integers(0, 4, size=10),
            camera_ids=rng.integers(0, 3, size=10),
        )
        q = rng.normal(size=6)
        for metric in ("cosine", "squared_euclidean"):
            protocol = EvalProtocol(distance=metric)
            ranked, _ = rank_gallery(q, gallery, protocol, (99, 99))
            expected = sorted(
                range(10),
                key=lambda gi: (naive_distance(q, gallery.features[gi], metric), gi),
            )
            assert ranked.tolist() == expected

    def test_same_camera_exclusion_mask(self):
        gallery = FeatureSet(
            features=np.ones((4, 3)),
            vehicle_ids=np.asarray([7, 7, 7, 8]),
            camera_ids=np.asarray([0, 1, 0, 0]),
        )
        protocol = EvalProtocol(exclude_same_camera=True)
        ranked, valid = rank_gallery(np.ones(3), gallery, protocol, (7, 0))
        assert valid.tolist() == [False, True, False, True]
        assert set(ranked.tolist()) == {1, 3}

    def test_dimension_mismatch(self):
        gallery = FeatureSet(
            features=np.ones((2, 3)),
            vehicle_ids=np.zeros(2, dtype=int),
            camera_ids=np.zeros(2, dtype=int),
        )
        with pytest.raises(ShapeMismatchError):
            rank_gallery(np.ones(5), gallery, EvalProtocol(), (0, 0))


class TestAveragePrecision:
    def test_single_hit(self):
        assert average_precision([True]) == 1.0

    def test_hit_miss_hit(self):
        got = average_precision([True, False, True])
        # hand derivation: (precision@1 + precision@3) / 2 relevant items
        assert got == (1.0 / 1.0 + 2.0 / 3.0) / 2.0
        assert got == pytest.approx(5.0 / 6.0, abs=1e-12)

    def test_miss_then_hit(self):
        assert average_precision([False, True]) == 0.5

    def test_all_false_signals_skip(self):
        assert average_precision([False, False]) is None
        assert average_precision([]) is None


class TestCmcCurve:
    def test_all_first_hits(self):
        curve = cmc_curve([[True], [True, False]], max_rank=1)
        assert curve.tolist() == [1.0]

    def test_two_query_example(self):
        curve = cmc_curve([[True, False, False], [False, False, True]], max_rank=3)
        assert curve.tolist() == [0.5, 0.5, 1.0]

    def test_non_decreasing_and_bounded(self):
        rng = np.random.default_rng(2)
        lists = [rng.random(8) < 0.3 for _ in range(20)]
        curve = cmc_curve(lists, max_rank=8)
        assert np.all(np.diff(curve) >= 0)
        assert curve[-1] <= 1.0


class TestEvaluate:
    def test_self_retrieval_is_perfect(self):
        rng = np.random.default_rng(3)
        fs = FeatureSet(
            features=rng.normal(size=(8, 5)),
            vehicle_ids=np.arange(8),
            camera_ids=np.zeros(8, dtype=int),
        )
        report = evaluate(fs, fs, EvalProtocol())
        assert report.mAP == 1.0
        assert report.cmc[0] == (1, 1.0)

    def test_hand_computed_three_identities(self):
        # Gallery laid out on a line; queries sit nearest their own id.
        gallery = FeatureSet(
            features=np.asarray([[0.0], [1.0], [10.0], [11.0], [20.0], [21.0]]),
            vehicle_ids=np.asarray([0, 0, 1, 1, 2, 2]),
            camera_ids=np.zeros(6, dtype=int),
        )
        queries = FeatureSet(
            features=np.asarray([[0.4], [10.4], [20.4]]),
            vehicle_ids=np.asarray([0, 1, 2]),
            camera_ids=np.ones(3, dtype=int),
        )
        protocol = EvalProtocol(distance="squared_euclidean", cmc_ranks=(1, 2))
        report = evaluate(queries, gallery, protocol)
        assert report.mAP == 1.0
        assert report.cmc == ((1, 1.0), (2, 1.0))

    def test_matches_naive_implementation_on_random_instances(self):
        rng = np.random.default_rng(4)
        for trial in range(20):
            n_q, n_g = int(rng.integers(3, 20)), int(rng.integers(10, 60))
            queries, gallery = random_sets(rng, n_q, n_g, dim=5, n_ids=6)
            protocol = EvalProtocol(
                distance="cosine" if trial % 2 == 0 else "squared_euclidean",
                exclude_same_camera=bool(trial % 3 == 0),
                cmc_ranks=(1, 5, 10),
            )
            try:
                report = evaluate(queries, gallery, protocol)
            except EmptyEvaluationError:
                m_ap, _, skipped = naive_evaluate(queries, gallery, protocol)
                assert skipped == n_q
                continue
            m_ap, cmc, skipped = naive_evaluate(queries, gallery, protocol)
            assert report.mAP == pytest.approx(m_ap, abs=1e-9)
            assert report.skipped_queries == skipped
            for (rank, acc), expected in zip(report.cmc, cmc):
                assert acc == pytest.approx(expected, abs=1e-9)

    def test_gallery_permutation_invariance(self):
        rng = np.random.default_rng(5)
        queries, gallery = random_sets(rng, 6, 30, dim=4, n_ids=5)
        perm = rng.permutation(30)
        permuted = FeatureSet(
            features=gallery.features[perm],
            vehicle_ids=gallery.vehicle_ids[perm],
            camera_ids=gallery.camera_ids[perm],
        )
        a = evaluate(queries, gallery, EvalProtocol())
        b = evaluate(queries, permuted, EvalProtocol())
        assert a.mAP == pytest.approx(b.mAP, abs=1e-12)
        assert a.cmc == b.cmc

    def test_scale_and_rotation_invariance(self):
        rng = np.random.default_rng(6)
        queries, gallery = random_sets(rng, 5, 25, dim=4, n_ids=4)
        protocol = EvalProtocol(distance="cosine")
        base = evaluate(queries, gallery, protocol)
        scaled = evaluate(
            FeatureSet(queries.features * 3.7, queries.vehicle_ids, queries.camera_ids),
            FeatureSet(gallery.features * 3.7, gallery.vehicle_ids, gallery.camera_ids),
            protocol,
        )
        assert base.per_query_ap == scaled.per_query_ap
        # random orthogonal transform, both distances
        q_mat, _ = np.linalg.qr(rng.normal(size=(4, 4)))
        for metric in ("cosine", "squared_euclidean"):
            proto = EvalProtocol(distance=metric)
            rotated = evaluate(
                FeatureSet(queries.features @ q_mat, queries.vehicle_ids, queries.camera_ids),
                FeatureSet(gallery.features @ q_mat, gallery.vehicle_ids, gallery.camera_ids),
                proto,
            )
            original = evaluate(queries, gallery, proto)
            assert rotated.mAP == pytest.approx(original.mAP, abs=1e-9)

    def test_rank_ordering_of_cmc(self):
        rng = np.random.default_rng(7)
        queries, gallery = random_sets(rng, 10, 40, dim=6, n_ids=5)
        report = evaluate(queries, gallery, EvalProtocol())
        accs = [acc for _, acc in report.cmc]
        assert accs == sorted(accs)  # R1 <= R5 <= R10

    def test_cmc_floor_from_perfect_queries(self):
        rng = np.random.default_rng(8)
        queries, gallery = random_sets(rng, 10, 40, dim=6, n_ids=5)
        report = evaluate(queries, gallery, EvalProtocol())
        perfect = sum(1 for ap in report.per_query_ap if ap == 1.0)
        floor = perfect / len(report.per_query_ap)
        assert all(acc >= floor - 1e-12 for _, acc in report.cmc)

    def test_empty_evaluation_rejected(self):
        queries = FeatureSet(
            features=np.ones((2, 3)),
            vehicle_ids=np.asarray([100, 101]),
            camera_ids=np.zeros(2, dtype=int),
        )
        gallery = FeatureSet(
            features=np.ones((2, 3)),
            vehicle_ids=np.asarray([7, 8]),
            camera_ids=np.zeros(2, dtype=int),
        )
        with pytest.raises(EmptyEvaluationError):
            evaluate(queries, gallery, EvalProtocol())

    def test_skipped_query_counted_not_zeroed(self):
        queries = FeatureSet(
            features=np.asarray([[1.0, 0.0], [0.0, 1.0]]),
            vehicle_ids=np.asarray([0, 99]),
            camera_ids=np.zeros(2, dtype=int),
        )
        gallery = FeatureSet(
            features=np.asarray([[1.0, 0.0], [0.5, 0.5]]),
            vehicle_ids=np.asarray([0, 1]),
            camera_ids=np.zeros(2, dtype=int),
        )
        report = evaluate(queries, gallery, EvalProtocol())
        assert report.skipped_queries == 1
        assert len(report.per_query_ap) == 1
        assert report.mAP == 1.0


class TestSingleShot:
    def test_perfect_features_stay_perfect(self):
        rng = np.random.default_rng(9)
        centers = rng.normal(size=(4, 6)) * 10
        gallery = FeatureSet(
            features=np.repeat(centers, 3, axis=0) + rng.normal(size=(12, 6)) * 0.01,
            vehicle_ids=np.repeat(np.arange(4), 3),
            camera_ids=np.tile(np.arange(3), 4),
        )
        queries = FeatureSet(
            features=centers + rng.normal(size=(4, 6)) * 0.01,
            vehicle_ids=np.arange(4),
            camera_ids=np.full(4, 9),
        )
        report = evaluate_single_shot(queries, gallery, EvalProtocol(), trials=5, seed=0)
        assert report.mAP == pytest.approx(1.0)
        assert report.cmc[0] == (1, 1.0)

    def test_deterministic_given_seed(self):
        rng = np.random.default_rng(10)
        queries, gallery = random_sets(rng, 5, 30, dim=4, n_ids=4)
        a = evaluate_single_shot(queries, gallery, EvalProtocol(), trials=3, seed=5)
        b = evaluate_single_shot(queries, gallery, EvalProtocol(), trials=3, seed=5)
        assert a == b

"""IoU, greedy matching, AP@k, aggregate reports, error decomposition."""

import numpy as np
import pytest

from ovis import metrics as M
from ovis.metrics import Detection, EvalConfig, GroundTruthSet


def det(image_id, x, y, w, h):
    return Detection(image_id, (x, y, w, h))


class TestIoU:
    def test_identical(self):
        assert M.iou((0, 0, 2, 2), (0, 0, 2, 2)) == pytest.approx(1.0)

    def test_disjoint(self):
        assert M.iou((0, 0, 1, 1), (5, 5, 1, 1)) == 0.0

    def test_hand_computed_overlap(self):
        # intersection 1x1, union 4 + 4 - 1 = 7
        assert M.iou((0, 0, 2, 2), (1, 1, 2, 2)) == pytest.approx(1 / 7)

    def test_rejects_non_positive_extent(self):
        with pytest.raises(M.BadBoxError):
            M.iou((0, 0, 0, 2), (0, 0, 2, 2))


class TestMatchDetections:
    def test_ground_truth_consumed_once(self):
        gt = [det("img", 0, 0, 10, 10)]
        hits = [det("img", 0, 0, 10, 10), det("img", 1, 1, 10, 10)]
        flags = M.match_detections(hits, gt, 0.5)
        assert flags[0].is_tp
        assert not flags[1].is_tp and flags[1].fp_kind == M.MatchFlag.IOU_FAILURE

    def test_distractor_hit_is_background(self):
        gt = [det("img", 0, 0, 10, 10)]
        flags = M.match_detections([det("other", 0, 0, 10, 10)], gt, 0.5)
        assert flags[0].fp_kind == M.MatchFlag.BACKGROUND

    def test_threshold_boundary(self):
        # IoU((0,0,10,10),(0,4,10,10)) = 60/140 ~ 0.4286
        gt = [det("img", 0, 0, 10, 10)]
        hit = [det("img", 0, 4, 10, 10)]
        at_05 = M.match_detections(hit, gt, 0.5)
        at_03 = M.match_detections(hit, gt, 0.3)
        assert not at_05[0].is_tp and at_05[0].fp_kind == M.MatchFlag.IOU_FAILURE
        assert at_03[0].is_tp

    def test_best_iou_gt_consumed(self):
        gt = [det("img", 0, 0, 10, 10), det("img", 2, 2, 10, 10)]
        hits = [det("img", 1, 1, 10, 10)]  # overlaps both; closer to second
        flags = M.match_detections(hits, gt, 0.3)
        assert flags[0].is_tp
        # the better-IoU box (second) must be the consumed one
        follow = M.match_detections(hits + [det("img", 2, 2, 10, 10)], gt, 0.3)
        assert follow[1].is_tp  # matches the leftover first box at IoU ~0.47


class TestAveragePrecision:
    def test_perfect(self):
        assert M.average_precision_at_k([True] * 3, gt_count=5, k=3) == pytest.approx(1.0)

    def test_hand_computed(self):
        # flags [TP, FP, TP], gt=2, k=3: (1/1 + 2/3) / 2
        value = M.average_precision_at_k([True, False, True], gt_count=2, k=3)
        assert value == pytest.approx((1 + 2 / 3) / 2, abs=1e-12)

    def test_no_tps(self):
        assert M.average_precision_at_k([False, False], gt_count=4, k=2) == 0.0

    def test_empty_gt_is_zero(self):
        assert M.average_precision_at_k([True], gt_count=0, k=1) == 0.0

    def test_denominator_min_k_gt(self):
        # gt=1, k=5, single TP at rank 1 -> 1/min(5,1) = 1
        assert M.average_precision_at_k([True, False], gt_count=1, k=5) == pytest.approx(1.0)


class TestPrecisionAtK:
    def test_counts_tps(self):
        assert M.precision_at_k([True, False, True], k=3) == pytest.approx(2 / 3)

    def test_rank_order_invariant_within_top_k(self):
        flags = [True, False, True, False]
        shuffled = [False, True, False, True]
        assert M.precision_at_k(flags, 4) == M.precision_at_k(shuffled, 4)

    def test_fewer_hits_than_k(self):
        assert M.precision_at_k([True], k=5) == pytest.approx(1.0)


class TestAggregateArithmetic:
    def test_published_map_all_values(self):
        # headline-table arithmetic: mean of the three per-threshold mAPs
        assert M.mean_over_thresholds([50.8, 35.0, 18.5]) == pytest.approx(34.8, abs=0.05)
        assert M.mean_over_thresholds([8.6, 5.1, 2.4]) == pytest.approx(5.4, abs=0.05)


def _random_fixture(rng, n_queries=3):
    """Random hits/GT over a small image pool, including distractors."""
    images = [f"img_{i}" for i in range(6)]
    gt = {}
    results = {}
    for q in range(n_queries):
        query = f"query_{q}"
        positives = []
        for _ in range(int(rng.integers(0, 5))):
            img = images[int(rng.integers(0, 4))]  # images 4,5 stay distractors
            x, y = rng.uniform(0, 50, 2)
            positives.append(det(img, x, y, rng.uniform(5, 30), rng.uniform(5, 30)))
        gt[query] = tuple(positives)
        hits = []
        for _ in range(int(rng.integers(1, 8))):
            img = images[int(rng.integers(0, 6))]
            x, y = rng.uniform(0, 50, 2)
            hits.append(det(img, x, y, rng.uniform(5, 30), rng.uniform(5, 30)))
        results[query] = hits
    return GroundTruthSet(by_query=gt), results


class TestMapAndPrecision:
    def test_single_query_perfect(self):
        gt = GroundTruthSet(by_query={"q": (det("img", 0, 0, 10, 10),)})
        results = {"q": [det("img", 0, 0, 10, 10)]}
        report = M.map_and_precision(results, gt, EvalConfig(k=1))
        assert report.map_all == pytest.approx(1.0)
        assert report.prec_all == pytest.approx(1.0)

    def test_map_all_is_mean_of_thresholds(self):
        rng = np.random.default_rng(0)
        gt, results = _random_fixture(rng)
        report = M.map_and_precision(results, gt, EvalConfig(k=5))
        assert report.map_all == pytest.approx(
            np.mean([report.map_at[t] for t in report.iou_thresholds])
        )

    def test_monotone_in_threshold(self):
        for seed in range(50):
            rng = np.random.default_rng(seed)
            gt, results = _random_fixture(rng)
            report = M.map_and_precision(results, gt, EvalConfig(k=5))
            assert report.map_at[0.3] >= report.map_at[0.5] >= report.map_at[0.7]

    def test_missing_query_raises(self):
        gt = GroundTruthSet(by_query={})
        with pytest.raises(M.MissingQueryError):
            M.map_and_precision({"q": []}, gt, EvalConfig(k=1))

    def test_json_and_csv_exports(self):
        gt = GroundTruthSet(by_query={"q": (det("img", 0, 0, 10, 10),)})
        report = M.map_and_precision({"q": [det("img", 0, 0, 10, 10)]}, gt, EvalConfig(k=1))
        assert '"map_all": 1.0' in report.to_json()
        assert report.to_csv().startswith("query,iou_threshold,ap,precision")


class TestErrorAnalysis:
    def test_perfect_ranking(self):
        gt = [det("img", 0, 0, 10, 10)]
        b = M.error_analysis([det("img", 0, 0, 10, 10)], gt, 0.5, k=1)
        assert (b.ap, b.e_ord, b.e_iou, b.e_bg) == (1.0, 0.0, 0.0, 0.0)

    def test_all_hits_on_distractors(self):
        gt = [det("img", 0, 0, 10, 10)]
        hits = [det("other1", 0, 0, 10, 10), det("other2", 0, 0, 10, 10)]
        b = M.error_analysis(hits, gt, 0.5, k=2)
        assert (b.ap, b.e_ord, b.e_iou, b.e_bg) == (0.0, 0.0, 0.0, 1.0)

    def test_iou_component(self):
        # hit overlaps GT below 0.5 but above 0.01: pure IoU error
        gt = [det("img", 0, 0, 10, 10)]
        b = M.error_analysis([det("img", 6, 6, 10, 10)], gt, 0.5, k=1)
        assert b.ap == 0.0 and b.e_ord == 0.0
        assert b.e_iou == pytest.approx(1.0)
        assert b.e_bg == pytest.approx(0.0)

    def test_ordering_component(self):
        gt = [det("img", 0, 0, 10, 10)]
        hits = [det("bg", 0, 0, 10, 10), det("img", 0, 0, 10, 10)]
        b = M.error_analysis(hits, gt, 0.5, k=2)
        # ap = (1/2)/1 = 0.5; reorder fixes it fully
        assert b.ap == pytest.approx(0.5)
        assert b.e_ord == pytest.approx(0.5)
        assert b.e_iou == 0.0 and b.e_bg == 0.0

    def test_telescoping_identity_randomized(self):
        for seed in range(1000):
            rng = np.random.default_rng(seed)
            gt, results = _random_fixture(rng, n_queries=1)
            query = next(iter(results))
            b = M.error_analysis(results[query], gt.by_query[query], 0.5, k=5)
            total = b.ap + b.e_ord + b.e_iou + b.e_bg
            assert abs(total - 1.0) <= 1e-9
            assert b.e_ord >= -1e-12 and b.e_iou >= -1e-12
            assert b.ap >= 0 and b.e_bg >= -1e-12


class TestGroundTruthFile:
    def test_roundtrip(self, tmp_path):
        gt = GroundTruthSet(
            by_query={
                "cactus": (det("img_1", 0, 0, 10, 10), det("img_2", 5, 5, 4, 4)),
                "empty": (),
            }
        )
        p = tmp_path / "gt.jsonl"
        M.save_ground_truth(gt, p)
        loaded = M.load_ground_truth(p)
        assert loaded.by_query["cactus"] == gt.by_query["cactus"]

    def test_duplicate_rejected(self, tmp_path):
        p = tmp_path / "gt.jsonl"
        line = '{"query": "q", "image_id": "img", "box": [0, 0, 1, 1]}\n'
        p.write_text(line + line)
        with pytest.raises(M.EvalError):
            M.load_ground_truth(p)

    def test_bad_box_rejected(self, tmp_path):
        p = tmp_path / "gt.jsonl"
        p.write_text('{"query": "q", "image_id": "img", "box": [0, 0, 0, 1]}\n')
        with pytest.raises(M.BadBoxError):
            M.load_ground_truth(p)

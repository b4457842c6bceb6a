import csv
import math

import numpy as np
import pytest

from cme import evaluation as E
from cme import network as N
from cme.evaluation import Detection
from cme.synthshapes import Box
from cme.tensor import ShapeError
from oracles import ap_brute, iou_brute, nms_brute


def as_tuple(b):
    return (b.x0, b.y0, b.x1, b.y1)


def random_box(rng, cls=0, extent=16.0):
    x0, y0 = rng.uniform(0, extent, size=2)
    w, h = rng.uniform(1, extent / 2, size=2)
    return Box(float(x0), float(y0), float(x0 + w), float(y0 + h), cls)


def random_grid_box(rng, cls=0):
    """Integer boxes on a small canvas so that overlaps and exact ties are common."""
    x0, y0 = rng.integers(0, 6, size=2)
    w, h = rng.integers(1, 5, size=2)
    return Box(int(x0), int(y0), int(x0 + w), int(y0 + h), cls)


def random_detections(rng, n, classes=(0, 1, 2)):
    out = []
    for _ in range(n):
        c = int(rng.choice(classes))
        score = float(rng.choice([0.3, 0.5, 0.9])) if rng.uniform() < 0.3 else float(rng.uniform())
        out.append(Detection(random_grid_box(rng, c), score, c))
    return out


def grid_with_box(box, branches, branch):
    pred = np.full((len(branches), 6, 8, 8), -20.0)
    row, col, vals = E.encode_box(box)
    pred[branch, :5, row, col] = vals
    pred[branch, 5, row, col] = 20.0
    return pred


class TestDecode:
    def test_saturated_background_is_empty(self):
        assert E.decode_detections(np.full((3, 6, 8, 8), -20.0), [0, 1, 2], 0.1) == []

    def test_hand_built_box_round_trip(self):
        branches = [0, 2, 5]
        dets = E.decode_detections(grid_with_box(Box(8, 8, 24, 24, 2), branches, 1), branches, 0.1)
        assert len(dets) == 1
        d = dets[0]
        assert d.class_id == 2 and d.score > 0.99
        for got, want in zip(as_tuple(d.box), (8, 8, 24, 24)):
            assert abs(got - want) <= 0.5

    def test_random_round_trip(self, rng):
        for _ in range(200):
            x0, y0 = rng.uniform(0, 48, size=2)
            w, h = rng.uniform(4, 64 - max(x0, y0), size=2)
            box = Box(float(x0), float(y0), float(x0 + w), float(y0 + h), 1)
            dets = E.decode_detections(grid_with_box(box, [1], 0), [1], 0.5)
            assert len(dets) == 1
            assert E.iou(dets[0].box, box) > 0.95

    def test_threshold_and_shape_checked(self):
        with pytest.raises(ValueError):
            E.decode_detections(np.zeros((1, 6, 8, 8)), [0], 1.5)
        with pytest.raises(ShapeError):
            E.decode_detections(np.zeros((2, 6, 8, 8)), [0], 0.1)

    def test_score_combines_objectness_and_branch_softmax(self):
        pred = np.full((2, 6, 8, 8), -20.0)
        pred[:, 0, 3, 3] = 0.0  # objectness 0.5 in both branches
        pred[:, 1:5, 3, 3] = 0.0
        pred[0, 5, 3, 3] = math.log(3.0)
        pred[1, 5, 3, 3] = 0.0
        dets = sorted(E.decode_detections(pred, [4, 7], 0.05), key=lambda d: d.class_id)
        assert [d.class_id for d in dets] == [4, 7]
        assert dets[0].score == pytest.approx(0.5 * 0.75, abs=1e-12)
        assert dets[1].score == pytest.approx(0.5 * 0.25, abs=1e-12)


class TestIoU:
    def test_examples(self):
        a = Box(0, 0, 2, 2, 0)
        assert E.iou(a, a) == 1.0
        assert E.iou(a, Box(5, 5, 6, 6, 0)) == 0.0
        assert E.iou(a, Box(1, 1, 3, 3, 0)) == pytest.approx(1 / 7, abs=1e-12)

    def test_touching_edges(self):
        assert E.iou(Box(0, 0, 2, 2, 0), Box(2, 0, 4, 2, 0)) == 0.0

    def test_brute_force_symmetry_bounds(self, rng):
        for _ in range(200):
            a, b = random_box(rng), random_box(rng)
            v = E.iou(a, b)
            assert abs(v - iou_brute(as_tuple(a), as_tuple(b))) <= 1e-12
            assert v == E.iou(b, a)
            assert 0.0 <= v <= 1.0


class TestNMS:
    def test_single(self):
        d = Detection(Box(0, 0, 4, 4, 0), 0.7, 0)
        assert E.nms([d]) == [d]

    def test_identical_boxes(self):
        a, b = Detection(Box(0, 0, 4, 4, 0), 0.9, 0), Detection(Box(0, 0, 4, 4, 0), 0.8, 0)
        assert E.nms([b, a]) == [a]

    def test_other_class_or_image_not_suppressed(self):
        a = Detection(Box(0, 0, 4, 4, 0), 0.9, 0)
        b = Detection(Box(0, 0, 4, 4, 1), 0.8, 1)
        c = Detection(Box(0, 0, 4, 4, 0), 0.7, 0, image_id=1)
        assert E.nms([a, b, c]) == [a, b, c]

    def test_tie_break_lower_class_then_origin(self):
        a = Detection(Box(2, 0, 6, 4, 1), 0.5, 1)
        b = Detection(Box(0, 0, 4, 4, 0), 0.5, 0)
        c = Detection(Box(0, 1, 4, 5, 1), 0.5, 1)
        assert E.nms([a, c, b], 0.9) == [b, a, c]
        # same class and score: the row-major earlier origin (y then x) wins
        d = Detection(Box(1, 0, 5, 4, 1), 0.5, 1)
        assert E.nms([c, d], 0.3) == [d]

    def test_threshold_range(self):
        for bad in (0.0, 1.0):
            with pytest.raises(ValueError):
                E.nms([], bad)

    def test_brute_force_oracle(self, rng):
        for _ in range(200):
            dets = random_detections(rng, 20)
            thr = float(rng.choice([0.3, 0.5, 0.7]))
            kept = E.nms(dets, thr)
            ref = nms_brute([(as_tuple(d.box), d.score, d.class_id) for d in dets], thr)
            ids = {id(d): i for i, d in enumerate(dets)}
            assert {ids[id(d)] for d in kept} == set(ref)
            scores = [d.score for d in kept]
            assert scores == sorted(scores, reverse=True)
            for i, a in enumerate(kept):
                for b in kept[i + 1:]:
                    assert a.class_id != b.class_id or E.iou(a.box, b.box) <= thr


class TestAveragePrecision:
    def test_single_match(self):
        g = Box(0, 0, 10, 10, 0)
        assert E.average_precision([Detection(g, 0.9, 0)], [g]) == 1.0

    def test_no_detections(self):
        assert E.average_precision([], [Box(0, 0, 10, 10, 0)]) == 0.0

    def test_no_ground_truth_is_undefined(self):
        assert math.isnan(E.average_precision([Detection(Box(0, 0, 2, 2, 0), 0.5, 0)], []))

    def test_tp_fp_tp(self):
        g1, g2 = Box(0, 0, 10, 10, 0), Box(20, 20, 30, 30, 0)
        dets = [Detection(g1, 0.9, 0), Detection(Box(40, 40, 50, 50, 0), 0.8, 0), Detection(g2, 0.7, 0)]
        assert abs(E.average_precision(dets, [g1, g2]) - 0.8333333333333333) <= 1e-9

    def test_duplicate_is_false_positive(self):
        g = Box(0, 0, 10, 10, 0)
        dets = [Detection(g, 0.9, 0), Detection(g, 0.8, 0)]
        assert E.average_precision(dets, [g]) == 1.0
        assert E.average_precision(dets[::-1], [g]) == 1.0

    def test_images_kept_apart(self):
        g = Box(0, 0, 10, 10, 0)
        assert E.average_precision([Detection(g, 0.9, 0, image_id=1)], [(0, g)]) == 0.0

    def test_brute_force_oracle(self, rng):
        for _ in range(200):
            gts = [random_grid_box(rng) for _ in range(int(rng.integers(1, 6)))]
            dets = [Detection(random_grid_box(rng), float(rng.uniform()), 0) for _ in range(int(rng.integers(0, 12)))]
            ref = ap_brute([(as_tuple(d.box), d.score) for d in dets], [as_tuple(g) for g in gts])
            assert abs(E.average_precision(dets, gts) - ref) <= 1e-9

    def test_monotonicity(self, rng):
        for _ in range(100):
            gts = [random_grid_box(rng) for _ in range(int(rng.integers(1, 5)))]
            dets = [Detection(random_grid_box(rng), float(rng.uniform(0.1, 0.9)), 0)
                    for _ in range(int(rng.integers(0, 10)))]
            ap = E.average_precision(dets, gts)
            new_gt = Box(100, 100, 110, 110, 0)
            top_tp = E.average_precision(dets + [Detection(new_gt, 1.0, 0)], gts + [new_gt])
            bottom_fp = E.average_precision(dets + [Detection(Box(200, 200, 210, 210, 0), 0.0, 0)], gts)
            assert top_tp >= ap - 1e-12
            assert bottom_fp <= ap + 1e-12


@pytest.fixture(scope="module")
def report(split, init_params):
    return E.evaluate_split(init_params, split, 2, seed=3)


class TestEvaluateSplit:
    def test_deterministic(self, report, split, init_params):
        again = E.evaluate_split(init_params, split, 2, seed=3)
        assert again.to_csv() == report.to_csv()

    def test_untrained_floor(self, report):
        assert report.map_novel < 0.1

    def test_report_invariants(self, report, split):
        assert set(report.ap) == set(split.all_ids)
        for v in report.ap.values():
            assert math.isnan(v) or 0.0 <= v <= 1.0
        assert report.margin["mean_lower"] <= report.margin["mean_upper"]

    def test_csv_layout(self, report):
        lines = report.to_csv().splitlines()
        assert lines[0] == "metric,class_id,value"
        assert sum(line.startswith("ap50,") for line in lines) == 8
        assert any(line.startswith("map_novel,,") for line in lines)
        assert "mAP novel" in report.table()

    def test_episode_count_checked(self, split, init_params):
        with pytest.raises(ValueError):
            E.evaluate_split(init_params, split, 0, seed=0)

    def test_eval_pool_disjoint_from_training_seeds(self, split):
        a = E.eval_support_pool(split, 1, 0)
        b = E.eval_support_pool(split, 1, 0)
        assert all(x.image.data.tobytes() == y.image.data.tobytes() for x, y in zip(a, b))
        assert len(a) == 8


class TestExport:
    def test_pool_zero_header_only(self, tmp_path, split, init_params):
        path = E.export_embeddings(init_params, split, 0, tmp_path / "e.csv")
        lines = path.read_text().splitlines()
        assert lines == ["class_id,is_novel," + ",".join(f"f{i}" for i in range(32))]

    def test_round_trip(self, tmp_path, split, init_params):
        path = E.export_embeddings(init_params, split, 2, tmp_path / "e.csv", seed=4)
        with path.open() as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 2 * 8
        protos = N.prototypes_from_items(E.eval_support_pool(split, 2, 4), init_params, filtered=True)
        for c in split.all_ids:
            mine = [r for r in rows if int(r["class_id"]) == c]
            assert all(r["is_novel"] == ("1" if c in split.novel_ids else "0") for r in mine)
            vecs = np.array([[float(r[f"f{i}"]) for i in range(32)] for r in mine])
            np.testing.assert_allclose(vecs.mean(axis=0), protos.filtered_means[c].data, atol=1e-9, rtol=0)

    def test_unwritable_path(self, tmp_path, split, init_params):
        with pytest.raises(OSError):
            E.export_embeddings(init_params, split, 1, tmp_path / "missing" / "e.csv")

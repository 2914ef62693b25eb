import json
import random

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from weakmil import evalkit as ev
from weakmil.errors import InvalidInputError, UndefinedClassError

from _oracles import ap_bruteforce, raster_iou


def det(box, cls, conf):
    return {"box": list(box), "class": cls, "confidence": conf}


def gt(box, cls):
    return ev.GroundTruthBox(tuple(box), cls)


@st.composite
def boxes(draw, lo=0.0, hi=10.0):
    x1 = draw(st.floats(lo, hi - 0.5))
    y1 = draw(st.floats(lo, hi - 0.5))
    w = draw(st.floats(0.1, hi - x1))
    h = draw(st.floats(0.1, hi - y1))
    return (x1, y1, x1 + w, y1 + h)


class TestIou:
    def test_identical(self):
        assert ev.iou([1, 2, 5, 7], [1, 2, 5, 7]) == 1.0

    def test_disjoint(self):
        assert ev.iou([0, 0, 1, 1], [2, 2, 3, 3]) == 0.0

    def test_touching_edges(self):
        assert ev.iou([0, 0, 1, 1], [1, 0, 2, 1]) == 0.0

    def test_offset_squares(self):
        assert ev.iou([0, 0, 2, 2], [1, 1, 3, 3]) == pytest.approx(1 / 7, rel=1e-15)
        assert raster_iou([0, 0, 2, 2], [1, 1, 3, 3]) == pytest.approx(1 / 7, abs=5e-3)

    @pytest.mark.parametrize("bad", [[0, 0, 0, 1], [2, 0, 1, 1], [0, 0, 1], [0, 0, np.nan, 1]])
    def test_degenerate(self, bad):
        with pytest.raises(InvalidInputError):
            ev.iou(bad, [0, 0, 1, 1])

    @given(boxes(), boxes())
    def test_symmetric_and_bounded(self, a, b):
        v = ev.iou(a, b)
        assert 0.0 <= v <= 1.0
        assert v == ev.iou(b, a)

    @given(st.lists(boxes(), min_size=1, max_size=5), st.lists(boxes(), min_size=1, max_size=5))
    def test_matrix_matches_scalar(self, a, b):
        m = ev.iou_matrix(a, b)
        for i, x in enumerate(a):
            for j, y in enumerate(b):
                assert m[i, j] == pytest.approx(ev.iou(x, y), rel=1e-12, abs=1e-15)

    def test_raster_oracle_random_pairs(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            a = np.sort(rng.uniform(0, 1, (2, 2)), axis=0).T.reshape(-1)[[0, 2, 1, 3]]
            b = np.sort(rng.uniform(0, 1, (2, 2)), axis=0).T.reshape(-1)[[0, 2, 1, 3]]
            if a[2] - a[0] < 0.01 or a[3] - a[1] < 0.01 or b[2] - b[0] < 0.01 or b[3] - b[1] < 0.01:
                continue
            assert ev.iou(a, b) == pytest.approx(raster_iou(a, b), abs=5e-3)


class TestAveragePrecision:
    def test_single_tp(self):
        assert ev.average_precision([(0.9, True)], 1) == 1.0

    def test_single_fp(self):
        assert ev.average_precision([(0.9, False)], 1) == 0.0

    def test_tp_fp_tp(self):
        # frozen from the exact-rational PR enumeration: (51 + 50 * 2/3) / 101
        expected = 253 / 303
        assert ev.average_precision([(0.9, True), (0.8, False), (0.7, True)], 2) == pytest.approx(expected, rel=1e-15)
        assert float(ap_bruteforce([True, False, True], 2)) == pytest.approx(expected, rel=1e-15)

    def test_no_detections(self):
        assert ev.average_precision([], 3) == 0.0

    def test_no_ground_truth(self):
        with pytest.raises(UndefinedClassError):
            ev.average_precision([(0.5, True)], 0)

    @given(st.lists(st.booleans(), max_size=30), st.integers(1, 10))
    def test_against_bruteforce(self, flags, extra):
        n_gt = max(1, sum(flags)) + extra - 1
        ranked = [(1.0 - i / 100, f) for i, f in enumerate(flags)]
        assert ev.average_precision(ranked, n_gt) == pytest.approx(float(ap_bruteforce(flags, n_gt)), rel=1e-12, abs=1e-15)


class TestEvaluate:
    def test_perfect(self):
        r = ev.evaluate({0: [det([0, 0, 4, 4], 1, 0.9)]}, {0: [gt([0, 0, 4, 4], 1)]})
        assert (r.map, r.ap50, r.mar) == (1.0, 1.0, 1.0)

    def test_iou_point_six(self):
        # [0,0,10,10] vs [0,0,10,6] has IoU 0.6: TP at 0.50, 0.55 and 0.60 only
        r = ev.evaluate({0: [det([0, 0, 10, 6], 0, 0.8)]}, {0: [gt([0, 0, 10, 10], 0)]})
        assert ev.iou([0, 0, 10, 6], [0, 0, 10, 10]) == pytest.approx(0.6)
        assert r.ap50 == 1.0
        assert r.map == pytest.approx(0.3, abs=1e-12)
        assert r.mar == pytest.approx(0.3, abs=1e-12)

    def test_empty_detections(self):
        r = ev.evaluate({}, {0: [gt([0, 0, 4, 4], 0)], 1: [gt([1, 1, 3, 3], 1)]})
        assert (r.map, r.ap50, r.mar) == (0.0, 0.0, 0.0)
        assert r.per_class_ap == {0: 0.0, 1: 0.0}

    def test_unknown_image(self):
        with pytest.raises(InvalidInputError, match="99"):
            ev.evaluate({99: [det([0, 0, 1, 1], 0, 0.5)]}, {0: [gt([0, 0, 1, 1], 0)]})

    def test_class_without_ground_truth_is_excluded(self):
        dets = {0: [det([0, 0, 4, 4], 0, 0.9), det([5, 5, 6, 6], 7, 0.95)]}
        r = ev.evaluate(dets, {0: [gt([0, 0, 4, 4], 0)]})
        assert r.per_class_ap == {0: 1.0}
        assert r.map == 1.0

    def test_duplicate_detection_is_fp(self):
        dets = {0: [det([0, 0, 4, 4], 0, 0.9), det([0, 0, 4, 4], 0, 0.8)]}
        r = ev.evaluate(dets, {0: [gt([0, 0, 4, 4], 0)]})
        assert r.ap50 == 1.0  # the FP ranks after full recall
        dets = {0: [det([0, 0, 4, 4], 0, 0.7), det([0, 0, 4, 4], 0, 0.8)]}
        assert ev.evaluate(dets, {0: [gt([0, 0, 4, 4], 0)]}).ap50 == 1.0

    def test_max_dets_truncates(self):
        dets = {0: [det([10, 10, 12, 12], 0, 0.9), det([0, 0, 4, 4], 0, 0.5)]}
        gts = {0: [gt([0, 0, 4, 4], 0)]}
        assert ev.evaluate(dets, gts, max_dets=1).mar == 0.0
        assert ev.evaluate(dets, gts, max_dets=2).mar == 1.0

    def test_greedy_matching_prefers_highest_iou(self):
        gts = {0: [gt([0, 0, 10, 10], 0), gt([0, 0, 10, 8], 0)]}
        dets = {0: [det([0, 0, 10, 8.5], 0, 0.9), det([0, 0, 10, 10], 0, 0.8)]}
        r = ev.evaluate(dets, gts)
        assert r.ap50 == 1.0

    def test_class_agnostic_equals_collapsed(self):
        rng = np.random.default_rng(4)
        dets, gts = {}, {}
        for img in range(6):
            g = [(rng.uniform(0, 5, 2), int(rng.integers(3))) for _ in range(2)]
            gts[img] = [gt([*xy, *(xy + 3)], k) for xy, k in g]
            dets[img] = [det([*xy, *(xy + 3)], int(rng.integers(3)), float(rng.random())) for xy in rng.uniform(0, 5, (4, 2))]
        agnostic = ev.evaluate(dets, gts, class_agnostic=True)
        collapsed = ev.evaluate(
            {i: [{**d, "class": 0} for d in ds] for i, ds in dets.items()},
            {i: [gt(g.box, 0) for g in gs] for i, gs in gts.items()},
        )
        assert agnostic.map == collapsed.map
        assert agnostic.ap50 == collapsed.ap50
        assert agnostic.mar == collapsed.mar
        assert agnostic.config["class_agnostic"] is True

    def test_report_json(self):
        r = ev.evaluate({0: [det([0, 0, 4, 4], 1, 0.9)]}, {0: [gt([0, 0, 4, 4], 1)]})
        doc = json.loads(r.to_json())
        assert set(doc) == {"map", "ap50", "mar", "per_class_ap", "config"}
        assert doc["config"]["iou_thresholds"] == [0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95]
        assert doc["config"]["max_dets"] == 100
        assert doc["per_class_ap"] == {"1": 1.0}

    def test_thread_count_does_not_change_result(self, monkeypatch):
        dets, gts = _random_problem(np.random.default_rng(12))
        monkeypatch.setenv("WEAKMIL_THREADS", "1")
        one = ev.evaluate(dets, gts).to_json()
        monkeypatch.setenv("WEAKMIL_THREADS", "4")
        assert ev.evaluate(dets, gts).to_json() == one


def _random_problem(rng, n_images=8, n_classes=3):
    dets, gts = {}, {}
    confs = rng.permutation(1000)[: n_images * 6] / 1000.0 + 1e-3
    c = iter(confs)
    for img in range(n_images):
        g = []
        for _ in range(int(rng.integers(1, 3))):
            xy = rng.uniform(0, 20, 2)
            g.append(gt([*xy, *(xy + rng.uniform(2, 8, 2))], int(rng.integers(n_classes))))
        gts[img] = g
        ds = []
        for _ in range(6):
            if rng.random() < 0.5:
                base = g[int(rng.integers(len(g)))]
                box = np.array(base.box) + rng.normal(0, 1.0, 4)
                box[2:] = np.maximum(box[2:], box[:2] + 0.5)
                k = base.class_index if rng.random() < 0.8 else int(rng.integers(n_classes))
            else:
                xy = rng.uniform(0, 20, 2)
                box = np.array([*xy, *(xy + rng.uniform(1, 6, 2))])
                k = int(rng.integers(n_classes))
            ds.append(det(box.tolist(), k, float(next(c))))
        dets[img] = ds
    return dets, gts


class TestInvariants:
    @given(st.integers(0, 2**32 - 1))
    def test_metrics_bounded(self, seed):
        r = ev.evaluate(*_random_problem(np.random.default_rng(seed)))
        for v in (r.map, r.ap50, r.mar, *r.per_class_ap.values()):
            assert 0.0 <= v <= 1.0

    @given(st.integers(0, 2**32 - 1))
    def test_permutation_invariance(self, seed):
        rng = np.random.default_rng(seed)
        dets, gts = _random_problem(rng)
        ref = ev.evaluate(dets, gts).to_json()
        order = list(dets)
        random.Random(seed).shuffle(order)
        shuffled_dets = {i: [dets[i][j] for j in rng.permutation(len(dets[i]))] for i in order}
        shuffled_gts = {i: gts[i] for i in reversed(order)}
        assert ev.evaluate(shuffled_dets, shuffled_gts).to_json() == ref

    @given(st.integers(0, 2**32 - 1))
    def test_monotone_confidence_transform(self, seed):
        dets, gts = _random_problem(np.random.default_rng(seed))
        ref = ev.evaluate(dets, gts)
        squashed = {i: [{**d, "confidence": d["confidence"] ** 3 * 0.5} for d in ds] for i, ds in dets.items()}
        out = ev.evaluate(squashed, gts)
        assert (out.map, out.ap50, out.mar, out.per_class_ap) == (ref.map, ref.ap50, ref.mar, ref.per_class_ap)

    @given(st.integers(0, 2**32 - 1))
    def test_ap_non_increasing_in_threshold(self, seed):
        dets, gts = _random_problem(np.random.default_rng(seed))
        aps = [ev.evaluate(dets, gts, thresholds=[t]).map for t in ev.IOU_THRESHOLDS]
        assert all(b <= a for a, b in zip(aps, aps[1:]))

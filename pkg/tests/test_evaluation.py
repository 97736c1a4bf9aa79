import json
from fractions import Fraction

import numpy as np
import pytest

from fcncascade.evaluation import (
    EvalRecord, adapt_box_for_ellipse_eval, evaluate, iou, iou_matrix, match_detections, pr_curve,
    read_annotations, read_detections, roc_curve, summary_json, write_curve_csv,
)


def records(conf, tp):
    return [EvalRecord(c, bool(t), "img", None, (i, 0, 1, 1)) for i, (c, t) in enumerate(zip(conf, tp))]


# Each fixture: (confidences, tp flags, total_gt, AP, AUC) with AP and AUC
# enumerated by hand from the cumulative counts.
FIXTURES = {
    # distinct scores; tp/fp after each: (1,0) (2,0) (2,1) (3,1) (3,2) (3,3) (4,3) (4,4) (4,5) (4,6)
    # AP = 1/5 + 1/5 + 1/5*3/4 + 1/5*4/7 = 93/140
    # ROC area over fp 0..6 = 2+3+3+4+4+4 = 20 -> 20 / (6*5)
    "distinct": ([.95, .85, .75, .65, .55, .45, .35, .25, .15, .05],
                 [1, 1, 0, 1, 0, 0, 1, 0, 0, 0], 5, Fraction(93, 140), Fraction(2, 3)),
    # tied groups 0.9:(1,1) 0.8:(3,2) 0.5:(3,4) 0.3:(4,4) 0.2:(5,5)
    # AP = 1/6*1/2 + 2/6*3/5 + 1/6*1/2 + 1/6*1/2 = 9/20
    # ROC area over fp 0..5 = 0+1+3+3+4 = 11 -> 11 / (5*6)
    "ties": ([.9, .9, .8, .8, .8, .5, .5, .3, .2, .2],
             [1, 0, 1, 1, 0, 0, 0, 1, 0, 1], 6, Fraction(9, 20), Fraction(11, 30)),
    # five hits first, then alternating; two faces never found
    # AP = 5/8 + 1/8*6/7 + 1/8*7/9 = 209/252
    # ROC area over fp 0..3 = 5+6+7 = 18 -> 18 / (3*8)
    "missed": ([.99, .98, .97, .96, .95, .9, .8, .7, .6, .5],
               [1, 1, 1, 1, 1, 0, 1, 0, 1, 0], 8, Fraction(209, 252), Fraction(3, 4)),
}


class TestIoU:
    def test_one_seventh(self):
        assert iou((0, 0, 2, 2), (1, 1, 2, 2)) == 1 / 7

    def test_identity_and_disjoint(self):
        assert iou((3, 4, 5, 6), (3, 4, 5, 6)) == 1.0
        assert iou((0, 0, 2, 2), (2, 0, 2, 2)) == 0.0

    def test_symmetric_matrix(self):
        rng = np.random.default_rng(0)
        a = rng.integers(0, 50, (20, 4)) + [0, 0, 1, 1]
        m = iou_matrix(a, a)
        np.testing.assert_allclose(m, m.T)
        np.testing.assert_allclose(np.diag(m), 1.0)
        for i in range(5):
            for j in range(5):
                assert m[i, j] == pytest.approx(iou(a[i], a[j]))


class TestEllipse:
    def test_worked(self):
        assert adapt_box_for_ellipse_eval((100, 100, 40, 40)) == (100, 91, 40, 50)

    def test_extended_height_flag(self):
        x, y, w, h = adapt_box_for_ellipse_eval((100, 100, 40, 40), use_extended_height=True)
        assert (x, w, h) == (100, 40, 50) and y == 90

    def test_clamped(self):
        assert adapt_box_for_ellipse_eval((0, 2, 10, 20), image_size=(100, 100)) == (0, 0, 10, 22.5)

    def test_degenerate(self):
        assert adapt_box_for_ellipse_eval((5, 5, 4, 0)) == (5, 5, 4, 0)


class TestCurves:
    @pytest.mark.parametrize("name", sorted(FIXTURES))
    def test_fixture(self, name):
        conf, tp, n_gt, ap, auc = FIXTURES[name]
        recs = records(conf, tp)
        assert pr_curve(recs, n_gt).summary == float(ap)
        assert roc_curve(recs, 1, n_gt).summary == float(auc)

    def test_perfect(self):
        recs = records([.9, .8, .7], [1, 1, 1])
        assert pr_curve(recs, 3).summary == 1.0
        roc = roc_curve(recs, 1, 3)
        assert roc.summary == 1.0 and roc.points[-1] == (0.0, 1.0)

    def test_empty(self):
        assert pr_curve([], 4).summary == 0.0
        roc = roc_curve([], 1, 4)
        assert roc.summary == 0.0 and all(y == 0 for _, y in roc.points)

    def test_rank_invariance(self):
        rng = np.random.default_rng(1)
        conf = rng.random(60)
        tp = rng.random(60) < 0.4
        a, b = records(conf, tp), records(np.exp(5 * conf) - 3, tp)
        assert pr_curve(a, 30).summary == pr_curve(b, 30).summary
        assert roc_curve(a, 3, 30).summary == roc_curve(b, 3, 30).summary

    def test_axes_monotone_and_bounded(self):
        rng = np.random.default_rng(2)
        recs = records(rng.random(100).round(1), rng.random(100) < 0.5)
        pr = pr_curve(recs, 70)
        roc = roc_curve(recs, 5, 70)
        assert all(a[0] <= b[0] for a, b in zip(pr.points, pr.points[1:]))
        assert all(a[0] <= b[0] and a[1] <= b[1] for a, b in zip(roc.points, roc.points[1:]))
        assert 0 <= pr.summary <= 1 and 0 <= roc.summary <= 1

    def test_roc_threshold_sweep_oracle(self):
        """Every ROC point equals the counts obtained by thresholding directly."""
        rng = np.random.default_rng(3)
        conf = rng.integers(0, 12, 80) / 12
        tp = rng.random(80) < 0.5
        recs = records(conf, tp)
        roc = roc_curve(recs, 4, 50)
        for thr, (x, y) in zip(roc.thresholds[1:], roc.points[1:]):
            keep = conf >= thr
            assert x == np.sum(keep & ~tp)
            assert y == np.sum(keep & tp) / 50

    def test_max_fp_window(self):
        conf, tp, n_gt, _, _ = FIXTURES["distinct"]
        # fp 0..2 carries tp 2 then 3
        assert roc_curve(records(conf, tp), 1, n_gt, max_fp=2).summary == float(Fraction(5, 10))


class TestMatching:
    def test_duplicate_is_false_positive(self):
        recs = match_detections([((0, 0, 10, 10), 0.9), ((1, 0, 10, 10), 0.8)], [(0, 0, 10, 10)])
        assert [r.tp for r in recs] == [True, False]

    def test_higher_confidence_claims_first(self):
        gts = [(0, 0, 10, 10)]
        recs = match_detections([((2, 0, 10, 10), 0.5), ((0, 0, 10, 10), 0.4)], gts)
        assert recs[0].confidence == 0.5 and recs[0].tp and not recs[1].tp

    def test_greedy_oracle(self):
        rng = np.random.default_rng(4)
        gts = [tuple(int(v) for v in rng.integers(0, 200, 2)) + (30, 30) for _ in range(25)]
        dets = []
        for _ in range(200):
            g = gts[int(rng.integers(len(gts)))]
            jitter = rng.integers(-12, 13, 2)
            dets.append(((g[0] + int(jitter[0]), g[1] + int(jitter[1]), 30, 30), float(rng.random())))
        recs = match_detections(dets, gts, 0.5)
        # brute force: scan in confidence order, take best unclaimed overlap
        claimed = set()
        expected = []
        for box, c in sorted(dets, key=lambda d: (-d[1], d[0])):
            best, best_iou = None, 0.5
            for g, gt in enumerate(gts):
                v = iou(box, gt)
                if g not in claimed and v >= best_iou and (best is None or v > iou(box, gts[best])):
                    best, best_iou = g, v
            if best is not None:
                claimed.add(best)
            expected.append((c, best))
        assert [(r.confidence, r.gt_index) for r in recs] == expected


class TestFiles:
    def test_end_to_end(self, tmp_path):
        (tmp_path / "d.txt").write_text("a 0 0 10 10 0.9\na 50 50 10 10 0.4\nb 5 5 5 5 0.7\n")
        (tmp_path / "a.jsonl").write_text(json.dumps({"image": "a", "boxes": [[0, 0, 10, 10]]}) + "\n" +
                                          json.dumps({"image": "b", "boxes": []}) + "\n")
        recs, n_gt = evaluate(read_detections(tmp_path / "d.txt"), read_annotations(tmp_path / "a.jsonl"))
        assert n_gt == 1 and sum(r.tp for r in recs) == 1 and len(recs) == 3
        pr, roc = pr_curve(recs, n_gt), roc_curve(recs, 2, n_gt)
        assert pr.summary == 1.0
        write_curve_csv(roc, tmp_path / "roc.csv")
        lines = (tmp_path / "roc.csv").read_text().splitlines()
        assert lines[0] == "threshold,x,y" and len(lines) == len(roc.points) + 1
        doc = json.loads(summary_json(pr, roc, 2, n_gt))
        assert set(doc) == {"ap", "auc", "n_images", "n_gt"}

    def test_malformed_line(self, tmp_path):
        (tmp_path / "d.txt").write_text("a 0 0 10\n")
        with pytest.raises(ValueError):
            read_detections(tmp_path / "d.txt")

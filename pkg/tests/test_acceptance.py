"""Acceptance gates, one test per criterion.

Each test records its verdict in ``conftest.ACCEPTANCE`` and the terminal
summary prints one PASS/FAIL line per criterion.  Criteria 6, 7 and 8 share
one trained cascade (module fixture), built from the seeded synthetic set.
"""

import time
from contextlib import contextmanager

import numpy as np
import pytest

from fcncascade import tensor_nn as tn
from fcncascade.cascade import detect, stage1_proposals
from fcncascade.cli import EXIT_OK, main
from fcncascade.config import AppConfig, config_from_dict, config_to_dict, save_config
from fcncascade.evaluation import (
    EvalRecord, adapt_box_for_ellipse_eval, iou, iou_matrix, match_detections, pr_curve, roc_curve,
)
from fcncascade.pipeline import PipelineConfig, train_cascade
from fcncascade.pyramid import build_pyramid, resize
from fcncascade.score_map import accumulate_fields, box_score, integral_image
from fcncascade.synth import quantize, synth_dataset
from fcncascade.tensor_nn import NetGeometry

from conftest import ACCEPTANCE
from oracles import finite_difference_grads, impulse_geometry, kink_margin, naive_conv
from test_evaluation import FIXTURES
from test_tensor_nn import random_conv, random_stack

TRAIN_SEED, TEST_SEED = 1, 2


@contextmanager
def criterion(num):
    """Record PASS with the detail dict's text, or FAIL with the error."""
    detail = {}
    try:
        yield detail
    except BaseException as exc:
        ACCEPTANCE[num] = (False, f"{detail.get('text', '')} {type(exc).__name__}: {exc}".strip())
        raise
    ACCEPTANCE[num] = (True, detail.get("text", ""))


def test_c01_conv_oracle():
    with criterion(1) as d:
        rng = np.random.default_rng(101)
        t0 = time.perf_counter()
        worst = 0.0
        for _ in range(100):
            c_in, c_out, k = (int(v) for v in rng.integers(1, 5, 3))
            stride, padding = int(rng.integers(1, 4)), int(rng.integers(0, 3))
            h, w = (int(v) for v in rng.integers(k + 1, 14, 2))
            layer = random_conv(rng, c_in, c_out, k, stride, padding)
            x = rng.normal(size=(h, w, c_in))
            got = tn.conv_forward(x, layer)
            ref = naive_conv(x, layer.weights, layer.biases, stride, padding)
            worst = max(worst, float(np.max(np.abs(got - ref) / np.maximum(np.abs(ref), 1e-12))))
        elapsed = time.perf_counter() - t0
        d["text"] = f"max rel err {worst:.2e}, {elapsed:.1f} s"
        assert worst <= 1e-6 and elapsed < 10


def test_c02_gradient_check():
    with criterion(2) as d:
        rng = np.random.default_rng(202)
        t0 = time.perf_counter()
        worst = 0.0
        checked = redrawn = 0
        while checked < 20:
            c_in, c_mid = int(rng.integers(1, 4)), int(rng.integers(1, 4))
            layers = [random_conv(rng, c_in, c_mid, int(rng.integers(2, 4)))]
            if rng.random() < 0.5:
                layers.append(tn.maxpool(2))
            layers.append(tn.relu())
            layers.append(random_conv(rng, c_mid, 1, int(rng.integers(1, 3)), kind=tn.HEAD))
            net = tn.NetworkSpec(layers, "check")
            size = int(rng.integers(7, 11))
            x = rng.normal(size=(2, size, size, c_in))
            # a step of 1e-3 moves a pre-activation by a few 1e-3; stay clear of kinks
            if kink_margin(net, x) < 0.02:
                redrawn += 1
                continue
            checked += 1
            labels = rng.integers(0, 2, size=(2,) + tn.heatmap_shape(net, size, size)).astype(float)
            _, grads = tn.net_backward(net, x, labels)
            fd = finite_difference_grads(net, x, labels, eps=1e-3)
            for g, f in zip(grads, fd):
                if g is None:
                    continue
                for a, b in zip(g, f):
                    # relative error of each parameter tensor as a whole
                    err = np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
                    worst = max(worst, float(err))
        elapsed = time.perf_counter() - t0
        d["text"] = f"max rel err {worst:.2e} on 20 nets ({redrawn} redrawn near a kink), {elapsed:.1f} s"
        assert worst <= 1e-4 and elapsed < 60


def test_c03_geometry():
    with criterion(3) as d:
        worked = tn.NetworkSpec([tn.conv(1, 1, 3), tn.maxpool(2), tn.conv(1, 1, 5), tn.maxpool(2), tn.head(1, 1)])
        g = tn.net_geometry(worked)
        assert (g.stride, g.window) == (4, 14)
        assert impulse_geometry(worked) == (g.stride, g.window, g.offset)
        rng = np.random.default_rng(303)
        for _ in range(49):
            net = random_stack(rng)
            g = tn.net_geometry(net)
            assert impulse_geometry(net) == (g.stride, g.window, g.offset)
        d["text"] = "50 stacks exact; worked stack stride 4 window 14"


def test_c04_box_score():
    with criterion(4) as d:
        assert box_score(integral_image(np.ones((2, 2))), (0, 0, 2, 2)) == 4
        assert box_score(integral_image(np.full((2, 2), 0.5)), (0, 0, 2, 2)) == 1
        rng = np.random.default_rng(404)
        worst = 0.0
        for _ in range(10):
            m = rng.random((64, 64))
            table = integral_image(m)
            for _ in range(100):
                x, y = (int(v) for v in rng.integers(0, 64, 2))
                w, h = int(rng.integers(1, 65 - x)), int(rng.integers(1, 65 - y))
                mass = sum(m[r, c] for r in range(y, y + h) for c in range(x, x + w))
                worst = max(worst, abs(box_score(table, (x, y, w, h)) - mass * mass / (w * h)))
        d["text"] = f"1000 boxes, max abs err {worst:.1e}; worked values 4 and 1 exact"
        assert worst <= 1e-9


def test_c05_mass_conservation():
    with criterion(5) as d:
        rng = np.random.default_rng(505)
        worst = 0.0
        for _ in range(100):
            geom = NetGeometry(int(rng.integers(1, 6)), int(rng.integers(3, 24)), -int(rng.integers(0, 4)))
            hm = rng.random((int(rng.integers(1, 8)), int(rng.integers(1, 8))))
            scale = float(rng.uniform(0.3, 2.0))
            w, h = int(rng.integers(10, 80)), int(rng.integers(10, 80))
            total, _ = accumulate_fields(hm, geom, scale, w, h)
            ref = 0.0
            for i in range(hm.shape[0]):
                for j in range(hm.shape[1]):
                    fx, fy, fw, fh = geom.field(i, j)
                    x0, x1 = np.clip(np.rint([fx / scale, (fx + fw) / scale]), 0, w)
                    y0, y1 = np.clip(np.rint([fy / scale, (fy + fh) / scale]), 0, h)
                    ref += hm[i, j] * max(x1 - x0, 0) * max(y1 - y0, 0)
            worst = max(worst, abs(total.sum() - ref) / max(ref, 1e-300))
        d["text"] = f"100 pairs, max rel err {worst:.1e}"
        assert worst <= 1e-9


@pytest.fixture(scope="module")
def trained():
    """The seeded end-to-end gate: synth 500/100, train all stages, detect the test set."""
    t0 = time.perf_counter()
    annotated, backgrounds = synth_dataset(TRAIN_SEED, 500)
    quantize(annotated)
    quantize(backgrounds)
    test, _ = synth_dataset(TEST_SEED, 100)
    quantize(test)
    t_synth = time.perf_counter() - t0
    model = train_cascade(annotated, backgrounds, PipelineConfig(seed=0))
    t_train = time.perf_counter() - t0 - t_synth
    results = [detect(a.image, model, return_info=True) for a in test]
    t_total = time.perf_counter() - t0
    return dict(model=model, test=test, results=results,
                times=(t_synth, t_train, t_total - t_synth - t_train, t_total))


def test_c06_shrinkage(trained):
    with criterion(6) as d:
        bad = [a.image_id for a, r in zip(trained["test"], trained["results"])
               if not r.counts[0] >= r.counts[1] >= r.counts[2]]
        d["text"] = f"{len(bad)} violations on {len(trained['results'])} test images"
        assert len(trained["results"]) == 100 and not bad


def test_c07_end_to_end(trained):
    with criterion(7) as d:
        records, n_gt, found, max_props = [], 0, 0, 0
        for a, r in zip(trained["test"], trained["results"]):
            n_gt += len(a.boxes)
            records += match_detections([(x.box, x.confidence) for x in r.detections], a.boxes, 0.5, a.image_id)
            props = r.proposals[0]
            max_props = max(max_props, len(props))
            if props:
                found += int((iou_matrix([p.box for p in props], a.boxes).max(axis=0) >= 0.5).sum())
        ap = pr_curve(records, n_gt).summary
        recall = found / n_gt
        t_synth, t_train, t_detect, t_total = trained["times"]
        d["text"] = (f"AP {ap:.4f}, stage-1 recall {recall:.3f} (max {max_props} proposals), "
                     f"wall {t_total:.0f} s (synth {t_synth:.0f}, train {t_train:.0f}, detect {t_detect:.0f})")
        assert ap >= 0.85
        assert recall >= 0.95 and max_props <= 50
        assert t_total <= 15 * 60


def _timed(fn, repeats=3):
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def test_c08_throughput(trained):
    with criterion(8) as d:
        model = trained["model"]
        base, _ = synth_dataset(808, 1)
        img = base[0].image
        h, w = img.shape[:2]
        s = 600 / max(h, w)
        big = resize(img, round(w * s), round(h * s))
        t_detect = _timed(lambda: detect(big, model), repeats=2)
        pixels, costs = [], []
        for edge in (150, 300, 600):
            s = edge / max(h, w)
            im = resize(img, round(w * s), round(h * s))
            pixels.append(sum(lv.tensor.shape[0] * lv.tensor.shape[1]
                              for lv in build_pyramid(im, model.pyramid_cfg)))
            costs.append(_timed(lambda: stage1_proposals(im, model)))
        pixels, costs = np.array(pixels, float), np.array(costs)
        # least-squares line through the origin; each edge must sit within 25% of it
        slope = float(pixels @ costs / (pixels @ pixels))
        dev = costs / (slope * pixels) - 1
        d["text"] = (f"600-px detect {t_detect:.2f} s; stage-1 s per Mpx "
                     + ", ".join(f"{c / p * 1e6:.2f}" for c, p in zip(costs, pixels))
                     + f" (max deviation {np.abs(dev).max():.0%})")
        assert t_detect <= 2.0
        assert np.all(np.abs(dev) <= 0.25)


def test_c09_metrics():
    with criterion(9) as d:
        for conf, tp, n_gt, ap, auc in FIXTURES.values():
            recs = [EvalRecord(c, bool(t), "img", None, (i, 0, 1, 1)) for i, (c, t) in enumerate(zip(conf, tp))]
            assert pr_curve(recs, n_gt).summary == float(ap)
            assert roc_curve(recs, 1, n_gt).summary == float(auc)
        assert iou((0, 0, 2, 2), (1, 1, 2, 2)) == 1 / 7
        assert adapt_box_for_ellipse_eval((100, 100, 40, 40)) == (100, 91, 40, 50)
        d["text"] = "3 fixtures exact; iou 1/7; ellipse (100,91,40,50)"


def _cli_run(root, cfg_path):
    """synth, train 1-3, detect: returns the model files and the detection text."""
    data, model = root / "data", root / "model" / "m.json"
    model.parent.mkdir(parents=True)
    common = ["--config", str(cfg_path)]
    assert main(["synth", *common, "--seed", "5", "--count", "40", "--out", str(data)]) == EXIT_OK
    for stage in (1, 2, 3):
        assert main(["train", *common, "--stage", str(stage), "--data", str(data),
                     "--out-model", str(model)]) == EXIT_OK
    dets = root / "dets.txt"
    # no --config here: it would replace the calibrated thresholds
    assert main(["detect", "--model", str(model), "--dir", str(data / "images"),
                 "--out", str(dets)]) == EXIT_OK
    files = {p.name: p.read_bytes() for p in sorted(model.parent.iterdir()) if p.suffix != ".csv"}
    return files, dets.read_text()


def test_c10_reproducible(tmp_path):
    with criterion(10) as d:
        # same pipeline as the gate, with fewer images and samples to keep two runs short
        doc = config_to_dict(AppConfig())
        for key, n_pos in (("stage1", 600), ("verify_plain", 300), ("verify_mined", 200)):
            doc["train"][key].update(epochs=2, positives=n_pos, negatives=2 * n_pos)
        doc["train"].update(mine_images=16, mine_backgrounds=6)
        save_config(config_from_dict(doc), tmp_path / "c.json")
        (tmp_path / "a").mkdir()
        (tmp_path / "b").mkdir()
        fa, da = _cli_run(tmp_path / "a", tmp_path / "c.json")
        fb, db = _cli_run(tmp_path / "b", tmp_path / "c.json")
        weights = [n for n in fa if n.endswith(".fcnw")]
        d["text"] = f"{len(weights)} weight files and {len(da.splitlines())} detection lines bit-identical"
        assert len(weights) == 3
        assert fa == fb and da == db

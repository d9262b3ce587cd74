import json

import numpy as np
import pytest

import oracles
from conftest import random_box
from rqdet.evaluation import (CountMismatch, Detections, EvalConfig, GroundTruth,
                              average_precision, evaluate_map, format_prediction_dump,
                              parse_prediction_dump, similar_query_ratio, write_results)


def _random_suite(seed):
    rng = np.random.default_rng(seed)
    n_img = int(rng.integers(1, 4))
    gts, dets = {}, {}
    for i in range(n_img):
        iid = f"im{i}"
        g = np.array([random_box(rng, 10, 90, 30) for _ in range(int(rng.integers(0, 5)))])
        g = g.reshape(-1, 5)
        diff = rng.random(len(g)) < 0.2
        gts[iid] = GroundTruth(g, np.zeros(len(g), int), diff)
        preds = []
        for b in g:
            if rng.random() < 0.8:
                preds.append(b + rng.normal(scale=[2, 2, 2, 1, 0.1]))
            if rng.random() < 0.3:
                preds.append(b + rng.normal(scale=[1, 1, 1, 0.5, 0.05]))  # duplicate
        for _ in range(int(rng.integers(0, 3))):
            preds.append(random_box(rng, 10, 90, 30))  # clutter
        preds = np.array(preds).reshape(-1, 5)[:20]
        preds[:, 2:4] = np.abs(preds[:, 2:4]) + 1
        dets[iid] = Detections(preds, rng.random(len(preds)), np.zeros(len(preds), int))
    return dets, gts


def _as_oracle(dets, gts):
    dl = [(iid, s, b) for iid, d in dets.items() for b, s in zip(d.boxes, d.scores)]
    gd = {iid: [(b, bool(f)) for b, f in zip(g.boxes, g.difficult)] for iid, g in gts.items()}
    return dl, gd


@pytest.mark.parametrize("seed", range(40))
def test_ap_matches_brute_force(seed):
    dets, gts = _random_suite(seed)
    if not any((~g.difficult).any() for g in gts.values()):
        assert evaluate_map(dets, gts)["ap"] == {}
        return
    ref = oracles.voc_ap_11(*_as_oracle(dets, gts))
    assert evaluate_map(dets, gts)["ap"][0] == pytest.approx(ref, abs=1e-12)


def test_exact_single_prediction():
    box = [50, 50, 30, 10, 0.4]
    gts = {"a": GroundTruth([box], [1])}
    r = evaluate_map({"a": Detections([box], [0.9], [1])}, gts)
    assert r["ap"] == {1: 1.0} and r["map"] == 1.0


def test_no_predictions_scores_zero():
    gts = {"a": GroundTruth([[50, 50, 30, 10, 0.4]], [0])}
    assert evaluate_map({}, gts)["map"] == 0.0
    assert evaluate_map({"a": Detections.empty()}, gts)["map"] == 0.0


def test_difficult_ignored():
    g = GroundTruth([[20, 20, 10, 5, 0], [70, 70, 10, 5, 0]], [0, 0], [False, True])
    det = Detections([[20, 20, 10, 5, 0], [70, 70, 10, 5, 0]], [0.9, 0.8], [0, 0])
    # hitting the difficult box is neither tp nor fp
    assert evaluate_map({"a": det}, {"a": g})["map"] == 1.0
    only_diff = GroundTruth([[20, 20, 10, 5, 0]], [0], [True])
    assert evaluate_map({"a": det}, {"a": only_diff})["ap"] == {}


def test_duplicate_is_false_positive():
    g = GroundTruth([[20, 20, 10, 5, 0]], [0])
    det = Detections([[20, 20, 10, 5, 0]] * 2, [0.9, 0.95], [0, 0])
    assert evaluate_map({"a": det}, {"a": g})["map"] == 1.0
    det = Detections([[60, 60, 10, 5, 0], [20, 20, 10, 5, 0]], [0.9, 0.5], [0, 0])
    # fp ranked first: precision 0.5 at full recall
    assert evaluate_map({"a": det}, {"a": g})["map"] == pytest.approx(0.5)


def test_average_precision_modes():
    rec, prec = np.array([0.5, 1.0]), np.array([1.0, 0.5])
    assert average_precision(rec, prec) == pytest.approx((6 * 1.0 + 5 * 0.5) / 11)
    assert average_precision(rec, prec, "all") == pytest.approx(0.75)
    with pytest.raises(ValueError):
        EvalConfig(interpolation="x")
    with pytest.raises(ValueError):
        EvalConfig(iou_threshold=1.0)


def test_similar_query_ratio_examples():
    p = np.array([[10, 10, 8, 4, 0.0], [50, 50, 8, 4, 0.0]])
    far = np.array([[90, 90, 8, 4, 0.0]])
    assert similar_query_ratio(p, far, p, 0.5) == 0.0
    assert similar_query_ratio(p, p.copy(), p, 0.9) == 1.0
    assert similar_query_ratio(p, p[:1], 2, 0.9) == 0.5
    assert similar_query_ratio(p, np.zeros((0, 5)), 2, 0.5) == 0.0
    with pytest.raises(CountMismatch):
        similar_query_ratio(p, far, 3, 0.5)


def test_similar_query_ratio_monotone_in_t():
    rng = np.random.default_rng(0)
    pos = np.array([random_box(rng, 10, 90, 30) for _ in range(8)])
    neg = np.concatenate([pos + rng.normal(scale=[1, 1, 1, 0.5, 0.05], size=pos.shape)] * 3)
    neg[:, 2:4] = np.abs(neg[:, 2:4]) + 1
    vals = [similar_query_ratio(pos, neg, pos, t) for t in np.linspace(0.1, 0.99, 12)]
    assert all(a >= b for a, b in zip(vals, vals[1:]))


def test_dump_roundtrip():
    dets = {"b": Detections([[1, 2, 3, 4, 0.5], [5, 6, 7, 8, -0.25]], [0.9, 0.1], [2, 0]),
            "a": Detections([[9, 9, 9, 9, 0.0]], [0.5], [1])}
    text = format_prediction_dump(dets)
    assert text.splitlines()[0].startswith("a ")
    back = parse_prediction_dump(text)
    for k in dets:
        np.testing.assert_allclose(back[k].boxes, dets[k].boxes)
        np.testing.assert_array_equal(back[k].labels, dets[k].labels)
    assert format_prediction_dump({}) == ""
    with pytest.raises(ValueError):
        parse_prediction_dump("a 0.5 1 2 3\n")


def test_write_results(tmp_path):
    path = tmp_path / "r.json"
    write_results(str(path), {"ap": {0: 0.5, 1: 0.25}, "map": 0.375}, ["plane", "ship"],
                  extra={"n_images": 3})
    doc = json.loads(path.read_text())
    assert doc == {"version": 1, "map": 0.375, "ap": {"plane": 0.5, "ship": 0.25},
                   "n_images": 3}
    assert not (tmp_path / "r.json.tmp").exists()

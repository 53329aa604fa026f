import csv
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mddnet import metrics as M

import oracles

# Float results are compared with exact rational oracles at this tolerance.
EXACT = 1e-12


def test_auroc_examples():
    assert M.auroc([0.9, 0.1], [1, 0]) == 1.0
    assert M.auroc([0.3] * 6, [0, 1] * 3) == 0.5
    assert M.auroc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == pytest.approx(0.75, abs=EXACT)
    with pytest.raises(ValueError):
        M.auroc([0.1, 0.2], [1, 1])


def test_ap_examples():
    assert M.average_precision([0.9, 0.8, 0.1, 0.0], [1, 1, 0, 0]) == 1.0
    assert M.average_precision([0.9, 0.8, 0.7, 0.1], [0, 0, 0, 1]) == pytest.approx(1 / 4)
    assert M.average_precision([0.9, 0.8, 0.7], [1, 0, 1]) == pytest.approx(5 / 6, abs=EXACT)
    with pytest.raises(ValueError):
        M.average_precision([0.1, 0.2], [0, 0])


def test_f1_examples():
    assert M.f1_max([0.9, 0.2], [1, 0]) == 1.0
    assert M.f1_max([0.3, 0.5, 0.1], [1, 1, 1]) == 1.0
    assert M.f1_max([0.9, 0.6, 0.3], [1, 0, 1]) == pytest.approx(0.8, abs=EXACT)


def test_iou_examples():
    assert M.iou_max([0.9, 0.8, 0.1], [1, 1, 0]) == 1.0
    # Every threshold above the lowest predicts only negatives.
    assert M.iou_max([0.9, 0.8, 0.1, 0.1], [0, 0, 1, 1]) == pytest.approx(2 / 4)
    # At t=0.2 the prediction {0.9, 0.8, 0.2} overlaps gt {0.9, 0.2}: IoU 2/3.
    assert M.iou_max([0.9, 0.8, 0.2, 0.1], [1, 0, 1, 0]) == pytest.approx(2 / 3, abs=EXACT)
    with pytest.raises(ValueError):
        M.iou_max([0.1, 0.2], [0, 0])


def test_iou_per_image_mode():
    maps = np.array([[[0.9, 0.1]], [[0.2, 0.8]], [[0.5, 0.5]]])
    masks = np.array([[[1, 0]], [[0, 1]], [[0, 0]]])
    assert M.iou_max_per_image(maps, masks) == 1.0
    assert M.pixel_metrics(maps, masks, iou_mode="per_image")["iou_max"] == 1.0
    with pytest.raises(ValueError):
        M.pixel_metrics(maps, masks, iou_mode="bogus")


def test_connected_components_examples():
    assert M.connected_components(np.zeros((4, 4)))[1] == 0
    assert M.connected_components(np.eye(2))[1] == 1
    assert M.connected_components(np.ones((3, 5)))[1] == 1
    lab, n = M.connected_components(np.array([[1, 0, 1], [0, 0, 0], [1, 0, 0]]))
    assert n == 3 and lab[0, 0] == 1 and lab[0, 2] == 2 and lab[2, 0] == 3


def test_aupro_examples():
    gt = np.zeros((1, 8, 8)); gt[0, 2:5, 3:6] = 1
    assert M.aupro(gt * 0.9 + 0.05, gt) == pytest.approx(1.0)
    const = np.full_like(gt, 0.4)
    # A constant map jumps from (0, 0) straight to (1, 1), so the curve is
    # the diagonal: area 0.5 over the full range, 0.3**2 / 2 / 0.3 at the cap.
    assert M.aupro(const, gt, fpr_limit=1.0) == pytest.approx(0.5, abs=EXACT)
    assert M.aupro(const, gt) == pytest.approx(0.15, abs=EXACT)
    with pytest.raises(ValueError):
        M.aupro(const, np.zeros_like(gt))


def test_aupro_random_8x8_against_oracle():
    rng = np.random.default_rng(0)
    maps = rng.random((2, 8, 8)).round(2)
    masks = (rng.random((2, 8, 8)) > 0.75).astype(int)
    expected = oracles.aupro(maps.tolist(), masks.tolist())
    assert M.aupro(maps, masks) == pytest.approx(float(expected), abs=1e-9)


def _instance(rng, n):
    levels = rng.integers(2, 9)
    scores = rng.integers(0, levels, size=n) / levels
    labels = rng.integers(0, 2, size=n)
    labels[rng.integers(0, n)] = 1
    labels[rng.integers(0, n)] = 0
    if labels.all() or not labels.any():
        labels[0] = 1 - labels[1]
    return scores, labels


def test_scalar_metrics_match_oracles_1000_trials():
    rng = np.random.default_rng(2024)
    for _ in range(1000):
        n = int(rng.integers(2, 17))
        s, y = _instance(rng, n)
        sl, yl = s.tolist(), y.tolist()
        assert abs(M.auroc(s, y) - float(oracles.auroc(sl, yl))) <= EXACT
        assert abs(M.average_precision(s, y) - float(oracles.average_precision(sl, yl))) <= EXACT
        assert abs(M.f1_max(s, y) - float(oracles.f1_max(sl, yl))) <= EXACT
        assert abs(M.iou_max(s, y) - float(oracles.iou_max(sl, yl))) <= EXACT


def test_aupro_matches_oracle_1000_trials():
    rng = np.random.default_rng(77)
    done = 0
    while done < 1000:
        k = int(rng.integers(1, 3))
        h = int(rng.integers(2, 5))
        w = int(rng.integers(2, 16 // (k * h) + 1))
        masks = (rng.random((k, h, w)) > rng.uniform(0.3, 0.8)).astype(int)
        if not masks.any() or masks.all():
            continue
        maps = rng.integers(0, 6, size=masks.shape) / 5
        limit = [0.3, 1.0][done % 2]
        got = M.aupro(maps, masks, fpr_limit=limit)
        exp = oracles.aupro(maps.tolist(), masks.tolist(), Fraction(limit).limit_denominator(10))
        assert abs(got - float(exp)) <= EXACT, (maps, masks)
        done += 1


def test_components_match_bfs_oracle():
    rng = np.random.default_rng(5)
    for _ in range(300):
        m = rng.random((int(rng.integers(1, 7)), int(rng.integers(1, 7)))) > 0.5
        lab, n = M.connected_components(m)
        regions = oracles.components(m.tolist())
        assert n == len(regions)
        for idx, r in enumerate(regions, start=1):
            assert {lab[p] for p in r} == {idx}


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(0, 1000), min_size=4, max_size=16, unique=True), st.integers(0, 1000))
def test_monotone_invariance_and_complement(scores, seed):
    y = np.random.default_rng(seed).integers(0, 2, size=len(scores))
    y[0], y[1] = 0, 1
    s = np.array(scores) / 1000
    warped = np.exp(3 * s) + 7
    for fn in (M.auroc, M.average_precision, M.f1_max, M.iou_max):
        assert fn(s, y) == pytest.approx(fn(warped, y), abs=EXACT)
    assert M.auroc(s, y) + M.auroc(-s, y) == pytest.approx(1.0, abs=EXACT)


def test_report_rows_and_csv(tmp_path):
    rng = np.random.default_rng(0)
    per_cat = {}
    for cat in ("a", "b", "c"):
        masks = (rng.random((4, 8, 8)) > 0.8).astype(int)
        per_cat[cat] = {"scores": rng.random(4), "labels": np.array([0, 1, 0, 1]),
                        "maps": rng.random((4, 8, 8)), "masks": masks}
    report = M.evaluate(per_cat)
    rows = report.rows()
    assert len(rows) == 4 and rows[-1][0] == "Avg"
    avg = report.average()
    assert avg["image"]["auroc"] == pytest.approx(np.mean([report.image[c]["auroc"] for c in "abc"]))
    for row in rows:
        assert all(0 <= v <= 1 for v in row[1:])
    report.write_csv(tmp_path / "m.csv")
    read = M.read_report_csv(tmp_path / "m.csv")
    assert list(read[0]) == list(M.CSV_COLUMNS) and len(read) == 4


def test_eval_oracle_and_constant_maps():
    rng = np.random.default_rng(1)
    masks = (rng.random((3, 8, 8)) > 0.7).astype(int)
    perfect = M.pixel_metrics(masks.astype(float), masks)
    assert perfect["auroc"] == 1.0 and perfect["iou_max"] == 1.0
    assert M.pixel_metrics(np.zeros((3, 8, 8)), masks)["auroc"] == 0.5


def test_missing_masks_skip_pixel_metrics():
    report = M.evaluate({"a": {"scores": [0.1, 0.9], "labels": [0, 1], "maps": None, "masks": None}})
    assert report.pixel == {}
    assert report.rows()[0][4:] == [None] * 5

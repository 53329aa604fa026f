import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from PIL import Image

from mddnet.config import profile
from mddnet.scoring import (DATASET_ALPHA, accumulate, fuse, read_raw_map, stage_maps, write_heatmap,
                            write_raw_map)

from test_functional import _bilinear_oracle


def pyr(seed, shapes=((1, 4, 8, 8), (1, 4, 4, 4), (1, 4, 2, 2))):
    rng = np.random.default_rng(seed)
    return [rng.normal(size=s) for s in shapes]


def test_stage_maps_fixed_points():
    t, r = pyr(0), pyr(1)
    rid, trd = stage_maps(t, r, r)
    assert all(np.allclose(m, 0, atol=1e-7) for m in rid)
    rid, trd = stage_maps(r, r, t)
    assert all(np.allclose(m, 0, atol=1e-7) for m in trd)
    rid, trd = stage_maps(t, r, pyr(2))
    for m in rid + trd:
        assert m.min() >= 0 and m.max() <= 2
    assert [m.shape for m in rid] == [(1, 8, 8), (1, 4, 4), (1, 2, 2)]


def test_stage_maps_shape_errors():
    with pytest.raises(ValueError):
        stage_maps(pyr(0), pyr(1), pyr(2)[:2])
    bad = pyr(2)
    bad[1] = bad[1][..., :3]
    with pytest.raises(ValueError):
        stage_maps(pyr(0), pyr(1), bad)


def test_accumulate_constants():
    np.testing.assert_array_equal(accumulate([np.zeros((1, 8, 8))] * 3, 32), 0)
    np.testing.assert_allclose(accumulate([np.ones((1, 8, 8)), np.ones((1, 4, 4)), np.ones((1, 2, 2))], 32), 3)


def test_accumulate_matches_per_map_oracle():
    rng = np.random.default_rng(3)
    maps = [rng.random((8, 8)) for _ in range(3)]
    got = accumulate([m[None] for m in maps], 32)[0]
    expected = sum(_bilinear_oracle(m, 32, 32) for m in maps)
    for (i, j) in [(0, 0), (5, 17), (31, 31), (16, 3)]:
        assert got[i, j] == pytest.approx(expected[i, j], abs=1e-12)


def test_fuse_examples():
    a, b = np.ones((4, 4)), np.full((4, 4), 2.0)
    np.testing.assert_array_equal(fuse(a, b, 1.0).S, a)
    np.testing.assert_array_equal(fuse(a, b, 0.0).S, b)
    m = fuse(a, b, 0.4)
    np.testing.assert_allclose(m.S, 1.6)
    assert m.s == pytest.approx(1.6)
    for bad in (-0.1, 1.1):
        with pytest.raises(ValueError):
            fuse(a, b, bad)


def test_fuse_batch_scores_and_smoothing():
    rng = np.random.default_rng(0)
    a, b = rng.random((3, 8, 8)), rng.random((3, 8, 8))
    m = fuse(a, b, 0.5)
    np.testing.assert_allclose(m.s, m.S.reshape(3, -1).max(1))
    sm = fuse(a, b, 0.5, smoothing_sigma=1.0)
    assert sm.S.shape == (3, 8, 8) and not np.allclose(sm.S, m.S)
    np.testing.assert_allclose(sm.s, sm.S.reshape(3, -1).max(1))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.01, 1.0), st.floats(0.01, 5.0), st.floats(-3, 3))
def test_fuse_properties(seed, alpha, scale, shift):
    rng = np.random.default_rng(seed)
    a, b = rng.random((6, 6)), rng.random((6, 6))
    base = fuse(a, b, alpha)
    bumped = a.copy()
    bumped[rng.integers(6), rng.integers(6)] += 0.5
    assert fuse(bumped, b, alpha).s >= base.s
    a2, b2 = rng.random((6, 6)), rng.random((6, 6))
    np.testing.assert_allclose(fuse(a + 2 * a2, b + 2 * b2, alpha).S,
                               base.S + 2 * fuse(a2, b2, alpha).S, atol=1e-12)
    moved = fuse(scale * a + shift, scale * b + shift, alpha)
    assert np.argmax(moved.S) == np.argmax(base.S)


def test_dataset_alpha_defaults():
    assert DATASET_ALPHA == {"mvtec": 0.4, "visa": 0.4, "real_iad": 0.1, "uni_medical": 0.5}
    assert profile("mvtec").score.alpha == 0.4


def test_heatmap_export(tmp_path):
    S = np.linspace(0.2, 1.4, 64).reshape(8, 8)
    m = fuse(S, S, 0.4)
    meta = write_heatmap(m, tmp_path / "h.png", raw=True)
    img = np.asarray(Image.open(tmp_path / "h.png"))
    assert img.dtype == np.uint16 and img.min() == 0 and img.max() == 65535
    side = json.loads((tmp_path / "h.json").read_text())
    assert side == meta and side["alpha"] == 0.4
    assert side["min"] == pytest.approx(0.2) and side["max"] == pytest.approx(1.4) and side["s"] == pytest.approx(1.4)
    np.testing.assert_array_equal(read_raw_map(tmp_path / "h.f32"), S.astype(np.float32))


def test_raw_map_header(tmp_path):
    arr = np.arange(6, dtype=np.float32).reshape(2, 3)
    write_raw_map(arr, tmp_path / "a.f32")
    buf = (tmp_path / "a.f32").read_bytes()
    assert np.frombuffer(buf[:12], "<u4").tolist() == [2, 2, 3]
    assert len(buf) == 12 + 24

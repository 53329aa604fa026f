import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mddnet.losses import downsample_mask
from mddnet.synth import (EmptyMaskError, SynthConfig, TexturePool, augment, blend, fit_texture, make_mask,
                          perlin_noise, sample_mask)


@pytest.mark.parametrize("sy,sx", [(1, 1), (2, 4), (8, 8), (32, 16)])
def test_perlin_zero_on_lattice(sy, sx):
    H, W = 64, 64
    n = perlin_noise(H, W, sy, sx, seed=3)
    nodes = n[::H // sy, ::W // sx]
    np.testing.assert_allclose(nodes, 0, atol=1e-12)


def test_perlin_deterministic_and_bounded():
    a = perlin_noise(32, 32, 4, 4, seed=1)
    np.testing.assert_array_equal(a, perlin_noise(32, 32, 4, 4, seed=1))
    rng = np.random.default_rng(0)
    vals = np.concatenate([perlin_noise(32, 32, 4, 8, rng).ravel() for _ in range(10)])
    assert vals.size >= 10_000
    assert vals.min() >= -1 and vals.max() <= 1


@pytest.mark.parametrize("scale", [3, 0, 128])
def test_perlin_bad_scale(scale):
    with pytest.raises(ValueError):
        perlin_noise(64, 64, scale, 4, seed=0)


def test_make_mask_threshold_zero_is_full():
    assert make_mask(np.random.default_rng(0).normal(size=(8, 8)), threshold=0.0).all()


def test_make_mask_retry_path():
    calls = []

    def regen(attempt):
        calls.append(attempt)
        return np.random.default_rng(attempt).normal(size=(8, 8)) if attempt == 3 else np.zeros((8, 8))

    mask = make_mask(np.zeros((8, 8)), regenerate=regen)
    assert calls == [1, 2, 3] and mask.any()
    with pytest.raises(EmptyMaskError):
        make_mask(np.zeros((8, 8)), regenerate=lambda a: np.zeros((8, 8)))
    with pytest.raises(EmptyMaskError):
        make_mask(np.full((8, 8), 0.3))


def test_mask_area_fraction_default():
    rng = np.random.default_rng(42)
    fractions = np.array([sample_mask(64, 64, rng).mean() for _ in range(1000)])
    assert fractions.min() > 0 and fractions.max() < 0.5


def test_blend_examples():
    rng = np.random.default_rng(0)
    x = rng.random((3, 8, 8)).astype(np.float32)
    tex = rng.random((3, 8, 8)).astype(np.float32)
    m = (rng.random((8, 8)) > 0.5).astype(np.float32)
    out = blend(x, tex, m, 1.0)
    np.testing.assert_allclose(out[:, m > 0], tex[:, m > 0], atol=1e-7)
    np.testing.assert_array_equal(blend(x, tex, np.zeros((8, 8)), 0.6), x)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.15, 1.0))
def test_blend_convexity(seed, beta):
    rng = np.random.default_rng(seed)
    x = rng.random((3, 6, 6))
    tex = rng.random((3, 6, 6))
    m = (rng.random((6, 6)) > 0.4).astype(float)
    out = blend(x, tex, m, beta)
    inside = m > 0
    lo, hi = np.minimum(x, tex), np.maximum(x, tex)
    assert np.all(out[:, inside] >= lo[:, inside] - 1e-12)
    assert np.all(out[:, inside] <= hi[:, inside] + 1e-12)


def test_fit_texture_tiles_small_texture():
    tex = np.arange(3 * 2 * 3, dtype=float).reshape(3, 2, 3)
    out = fit_texture(tex, 5, 7)
    assert out.shape == (3, 5, 7)
    np.testing.assert_array_equal(out[:, 2:4, 3:6], tex)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 100_000))
def test_augment_invariants(seed):
    x = np.random.default_rng(seed).random((3, 32, 32)).astype(np.float32)
    s = augment(x, None, seed)
    outside = s.mask == 0
    assert s.mask.any()
    assert np.abs((s.x_a - s.x_n) * outside[None]).max() == 0
    assert s.x_a.min() >= 0 and s.x_a.max() <= 1
    pooled = downsample_mask(s.mask, (4, 4))
    assert pooled.min() >= 0 and pooled.max() <= 1


def test_augment_deterministic():
    x = np.random.default_rng(0).random((3, 32, 32)).astype(np.float32)
    a, b = augment(x, None, [1, 2]), augment(x, None, [1, 2])
    np.testing.assert_array_equal(a.x_a, b.x_a)
    np.testing.assert_array_equal(a.mask, b.mask)


def test_beta_range_respected():
    x = np.zeros((3, 16, 16), np.float32)
    pool = TexturePool()
    cfg = SynthConfig(beta_min=0.5, beta_max=0.5)
    s = augment(x, pool, 0, cfg=cfg)
    assert s.x_a[:, s.mask > 0].max() <= 0.5 + 1e-6


def test_texture_pool_directory(tmp_path, caplog):
    from PIL import Image
    Image.fromarray(np.full((4, 4, 3), 200, np.uint8)).save(tmp_path / "t.png")
    (tmp_path / "broken.png").write_bytes(b"not an image")
    pool = TexturePool(tmp_path)
    assert len(pool.textures) == 1 and "broken.png" in caplog.text
    tex = pool.sample(8, 8, np.random.default_rng(0))
    assert tex.shape == (3, 8, 8)
    np.testing.assert_allclose(tex, 200 / 255, atol=1e-6)


def test_texture_pool_procedural_fallback():
    pool = TexturePool()
    assert pool.procedural
    tex = pool.sample(16, 16, np.random.default_rng(0))
    assert tex.shape == (3, 16, 16) and tex.min() >= 0 and tex.max() <= 1

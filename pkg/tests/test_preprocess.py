import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tvreg.preprocess import (
    AffineFormatError, IntensityMap, apply_affine, nonzero_mask, normalize_robust, parse_affine,
)
from tvreg.volume import sample_trilinear


def test_standard_volume_nearly_fixed(rng):
    vol = rng.uniform(-1.7, 1.7, size=(20, 20, 20))
    vol = (vol - vol.mean()) / vol.std()
    out = normalize_robust(vol)
    assert abs(out.mean()) <= 1e-6
    assert abs(out.std() - 1.0) <= 1e-6


def test_outlier_clipped(rng):
    vol = rng.normal(size=(16, 16, 16))
    vol[3, 4, 5] = 1e9
    out = normalize_robust(vol)
    assert abs(out.std() - 1.0) <= 1e-6
    assert out.max() < 4.0


def test_constant_volume_rejected():
    with pytest.raises(ValueError, match="constant"):
        normalize_robust(np.full((4, 4, 4), 2.0))
    with pytest.raises(ValueError):
        normalize_robust(np.arange(8.0).reshape(2, 2, 2))  # fewer than 16 voxels


def test_mask_and_floor(rng):
    vol = np.zeros((10, 10, 10))
    vol[2:8, 2:8, 2:8] = rng.uniform(1, 5, size=(6, 6, 6))
    mask = nonzero_mask(vol)
    out = normalize_robust(vol, mask)
    assert abs(out[mask].mean()) <= 1e-12 and abs(out[mask].std() - 1) <= 1e-12
    assert np.all(out[~mask] == out[mask].min())
    with pytest.raises(ValueError):
        normalize_robust(vol, mask[:5])


def test_nonzero_mask_fallbacks():
    assert nonzero_mask(np.ones((4, 4, 4))) is None
    sparse = np.zeros((4, 4, 4))
    sparse[0, 0, :3] = 1
    assert nonzero_mask(sparse) is None


def test_intensity_map_applies_to_other_images(rng):
    a = rng.normal(size=(8, 8, 8))
    m = IntensityMap.estimate(a)
    assert np.array_equal(m(a), normalize_robust(a))
    inside = (a + 0.5 > m.lo) & (a + 0.5 < m.hi) & (a > m.lo) & (a < m.hi)
    assert np.allclose((m(a + 0.5) - m(a))[inside], 0.5 / m.std, rtol=0, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.floats(1e-3, 1e3), st.floats(-1e3, 1e3))
def test_affine_intensity_invariance(seed, scale, shift):
    vol = np.random.default_rng(seed).gamma(2.0, size=(10, 10, 10))
    assert np.max(np.abs(normalize_robust(scale * vol + shift) - normalize_robust(vol))) <= 1e-9


def test_parse_affine():
    m = parse_affine("1 0 0 2\n0 1 0 0\n0 0 1 0\n0 0 0 1\n")
    assert m[0, 3] == 2.0
    with pytest.raises(AffineFormatError):
        parse_affine("1 0 0")
    with pytest.raises(AffineFormatError):
        parse_affine("1 0 0 0 0 1 0 0 0 0 1 0 0 0 0 x")
    with pytest.raises(AffineFormatError):
        parse_affine("1 0 0 0 0 1 0 0 0 0 1 0 0 0 1 1")


def test_singular_rejected(rng):
    with pytest.raises(AffineFormatError, match="invertible"):
        apply_affine(rng.normal(size=(4, 4, 4)), "1 0 0 0 0 0 0 0 0 0 1 0 0 0 0 1")


def test_identity_exact(rng):
    vol = rng.normal(size=(6, 7, 5))
    assert np.array_equal(apply_affine(vol, np.eye(4)), vol)


def test_integer_translation(rng):
    vol = rng.normal(size=(8, 6, 5))
    # maps source x to target x + 2, so target voxel x samples source x - 2
    out = apply_affine(vol, "1 0 0 2  0 1 0 0  0 0 1 0  0 0 0 1")
    assert np.array_equal(out[2:], vol[:-2])
    assert np.all(out[:2] == vol[:1])  # clamped


def test_random_affine_oracle(rng):
    vol = rng.normal(size=(7, 6, 5))
    m = np.eye(4)
    m[:3, :3] += 0.2 * rng.normal(size=(3, 3))
    m[:3, 3] = rng.normal(size=3)
    spacing_src, spacing_tgt = (1.0, 1.2, 0.9), (1.1, 1.0, 1.3)
    out = apply_affine(vol, m, target_shape=(5, 6, 4), source_spacing=spacing_src,
                       target_spacing=spacing_tgt)
    inv = np.linalg.inv(m)
    for idx in np.ndindex(5, 6, 4):
        mm = np.array([idx[a] * spacing_tgt[a] for a in range(3)] + [1.0])
        src_mm = inv @ mm
        src = [src_mm[a] / spacing_src[a] for a in range(3)]
        assert abs(out[idx] - sample_trilinear(vol, src)) <= 1e-12

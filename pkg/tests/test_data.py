import json

import numpy as np
import pytest

from ecpenet.data import (
    PAPER_PATCH,
    BlurPair,
    augment,
    build_pyramid,
    crop_patches,
    cubic_weight,
    delta_kernel,
    dihedral,
    load_dataset,
    make_blur_pair,
    read_image,
    synth_kernel,
    synth_pair,
    to_uint8,
    trajectory_kernel,
    write_dataset,
    write_image,
)
from ecpenet.tensor import ShapeError


def test_zero_length_trajectory_is_delta():
    assert np.array_equal(trajectory_kernel([(2.3, 1.7), (2.3, 1.7)]), np.ones((1, 1)))


def test_horizontal_segment():
    k = trajectory_kernel([(0, 0), (0, 5)])
    assert k.shape == (1, 5)
    np.testing.assert_allclose(k, 0.2, atol=1e-12)


def test_random_kernels_normalized():
    rng = np.random.default_rng(0)
    for _ in range(200):
        k = synth_kernel(rng, 15)
        assert abs(k.sum() - 1) < 1e-12
        assert k.shape[0] <= 15 and k.shape[1] <= 15
        assert np.all(k >= 0)


def test_delta_kernel_pair():
    sharp = np.random.default_rng(1).random((3, 10, 12))
    pair = make_blur_pair(sharp, delta_kernel(), 0.0)
    assert np.array_equal(pair.blurred, sharp)
    assert np.array_equal(pair.sharp, sharp)


def test_impulse_line():
    sharp = np.zeros((3, 9, 13))
    sharp[:, 4, 6] = 1.0
    pair = make_blur_pair(sharp, np.full((1, 5), 0.2), 0.0)
    assert pair.blurred.shape == (3, 9, 9)
    row = pair.blurred[0, 4]
    assert np.count_nonzero(row) == 5
    np.testing.assert_allclose(row[row > 0], 0.2, atol=1e-15)
    assert np.count_nonzero(pair.blurred[0]) == 5


def test_constant_image_stays_constant():
    sharp = np.full((3, 20, 20), 0.42)
    k = synth_kernel(np.random.default_rng(3), 9)
    np.testing.assert_allclose(make_blur_pair(sharp, k, 0.0).blurred, 0.42, atol=1e-12)


def test_noise_needs_rng_and_clips():
    sharp = np.random.default_rng(4).random((3, 8, 8))
    with pytest.raises(ValueError):
        make_blur_pair(sharp, delta_kernel(), 0.1)
    pair = make_blur_pair(sharp, delta_kernel(), 0.5, np.random.default_rng(0))
    assert pair.blurred.min() >= 0 and pair.blurred.max() <= 1


def test_synth_pair_shape_and_determinism():
    a = synth_pair(np.random.default_rng(5), 32)
    b = synth_pair(np.random.default_rng(5), 32)
    assert a.sharp.shape == a.blurred.shape == (3, 32, 32)
    assert np.array_equal(a.blurred, b.blurred) and np.array_equal(a.sharp, b.sharp)


def direct_bicubic_half(img):
    """Evaluate the 4x4-tap cubic interpolant at each half-resolution sample centre."""
    h, w = img.shape
    out = np.zeros((h // 2, w // 2))
    for i in range(h // 2):
        for j in range(w // 2):
            y, x = 2 * i + 0.5, 2 * j + 0.5
            acc = 0.0
            for p in range(int(np.floor(y)) - 1, int(np.floor(y)) + 3):
                for q in range(int(np.floor(x)) - 1, int(np.floor(x)) + 3):
                    v = img[min(max(p, 0), h - 1), min(max(q, 0), w - 1)]
                    acc += float(cubic_weight(y - p)) * float(cubic_weight(x - q)) * v
            out[i, j] = acc
    return out


def test_pyramid_ramp_against_direct_oracle():
    r, c = np.mgrid[0:8, 0:8].astype(float)
    ramp = (r + 2 * c) / 24.0
    levels = build_pyramid(np.stack([ramp] * 3), 3)
    want = direct_bicubic_half(ramp)
    np.testing.assert_allclose(levels[1][0], want, atol=1e-10)
    np.testing.assert_allclose(levels[2][1], direct_bicubic_half(want), atol=1e-10)
    # away from the clamped border the cubic reproduces the linear ramp exactly
    for i in (1, 2):
        for j in (1, 2):
            assert levels[1][0, i, j] == pytest.approx((2 * i + 0.5 + 2 * (2 * j + 0.5)) / 24.0, abs=1e-12)


def test_cubic_weights():
    assert cubic_weight(0.0) == 1.0 and cubic_weight(1.0) == 0.0 and cubic_weight(2.0) == 0.0
    taps = cubic_weight(np.array([1.5, 0.5, -0.5, -1.5]))
    np.testing.assert_allclose(taps, [-0.0625, 0.5625, 0.5625, -0.0625], atol=1e-15)


def test_pyramid_constant_and_shapes():
    levels = build_pyramid(np.full((3, 64, 64), 0.3), 3)
    assert [l.shape for l in levels] == [(3, 64, 64), (3, 32, 32), (3, 16, 16)]
    for l in levels:
        np.testing.assert_allclose(l, 0.3, atol=1e-14)


def test_pyramid_crops_odd_sizes():
    levels = build_pyramid(np.zeros((2, 3, 67, 70)), 3)
    assert levels[0].shape == (2, 3, 64, 68)
    with pytest.raises(ShapeError):
        build_pyramid(np.zeros((3, 3, 3)), 3)


def _pair(seed=0, size=16):
    rng = np.random.default_rng(seed)
    sharp = rng.random((3, size, size))
    return BlurPair(sharp, np.clip(sharp * 0.9 + 0.05, 0, 1), sigma=0.0)


def test_augment_identity_and_determinism():
    pair = _pair()
    same = augment(pair, np.random.default_rng(0), sigma=0.0, transform=0)
    assert np.array_equal(same.sharp, pair.sharp) and np.array_equal(same.blurred, pair.blurred)
    a = augment(pair, np.random.default_rng(9), sigma=0.01)
    b = augment(pair, np.random.default_rng(9), sigma=0.01)
    assert np.array_equal(a.sharp, b.sharp) and np.array_equal(a.blurred, b.blurred)


def test_dihedral_group():
    img = np.random.default_rng(1).random((3, 5, 5))
    flip = 4  # horizontal flip, no rotation
    assert np.array_equal(dihedral(dihedral(img, flip), flip), img)
    seen = {dihedral(img, k).tobytes() for k in range(8)}
    assert len(seen) == 8
    pair = _pair()
    twice = augment(augment(pair, np.random.default_rng(0), 0.0, flip), np.random.default_rng(0), 0.0, flip)
    assert np.array_equal(twice.sharp, pair.sharp) and np.array_equal(twice.blurred, pair.blurred)


def test_augment_redraws_noise_on_clean():
    sharp = np.random.default_rng(2).random((3, 12, 12))
    pair = make_blur_pair(sharp, delta_kernel(), 0.05, np.random.default_rng(0))
    out = augment(pair, np.random.default_rng(1), sigma=0.0, transform=0)
    assert np.array_equal(out.blurred, pair.clean)


def test_crops_in_bounds():
    pair = _pair(size=20)
    rng = np.random.default_rng(3)
    for crop in crop_patches(pair, 7, 1000, rng):
        assert crop.sharp.shape == (3, 7, 7)
    full = crop_patches(pair, 20, 1, rng)[0]
    assert np.array_equal(full.sharp, pair.sharp)
    with pytest.raises(ShapeError):
        crop_patches(pair, 21, 1, rng)
    assert PAPER_PATCH == 256


def test_crop_alignment():
    pair = _pair(size=20)
    pair.blurred = pair.sharp + 1.0
    for crop in crop_patches(pair, 5, 50, np.random.default_rng(4)):
        assert np.array_equal(crop.blurred, crop.sharp + 1.0)


def test_image_roundtrip(tmp_path):
    img = to_uint8(np.random.default_rng(5).random((3, 9, 7))) / 255.0
    for name in ("a.png", "a.ppm"):
        write_image(tmp_path / name, img)
        np.testing.assert_array_equal(read_image(tmp_path / name), img)
    assert to_uint8(np.array([0.5 / 255, 1.5 / 255, -1.0, 2.0])).tolist() == [1, 2, 0, 255]


def test_dataset_roundtrip(tmp_path):
    pairs = [synth_pair(np.random.default_rng(s), 16, 5) for s in range(3)]
    write_dataset(tmp_path, pairs, {"count": 3})
    loaded = load_dataset(tmp_path)
    assert len(loaded) == 3
    assert json.loads((tmp_path / "manifest.json").read_text())["count"] == 3
    for a, b in zip(pairs, loaded):
        assert np.abs(a.sharp - b.sharp).max() <= 0.5 / 255 + 1e-12
    with pytest.raises(FileNotFoundError):
        load_dataset(tmp_path / "missing")

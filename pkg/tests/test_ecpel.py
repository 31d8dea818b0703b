import numpy as np
import pytest

from ecpenet import ecpel
from ecpenet.ecpel import (
    bright_extract,
    dark_extract,
    ecpel_forward,
    extract_backward,
    init_ecpel,
)
from ecpenet.gradcheck import gradcheck_suite
from ecpenet.tensor import ShapeError, Tensor


def brute_extreme(x, window, pick_max=False):
    """Nested-loop min/max over channels and a clamped window; first flat index wins ties."""
    n, c, h, w = x.shape
    r = window // 2
    vals = np.zeros((n, 1, h, w))
    idx = np.zeros((n, 1, h, w), dtype=np.int64)
    for b in range(n):
        for i in range(h):
            for j in range(w):
                best, best_flat = None, None
                for ch in range(c):
                    for p in range(max(0, i - r), min(h, i + r + 1)):
                        for q in range(max(0, j - r), min(w, j + r + 1)):
                            v = x[b, ch, p, q]
                            flat = ch * h * w + p * w + q
                            if best is None:
                                better = True
                            elif pick_max:
                                better = v > best or (v == best and flat < best_flat)
                            else:
                                better = v < best or (v == best and flat < best_flat)
                            if better:
                                best, best_flat = v, flat
                vals[b, 0, i, j] = best
                idx[b, 0, i, j] = best_flat
    return vals, idx


def random_tensor(rng):
    n = int(rng.integers(1, 3))
    c = int(rng.integers(1, 4))
    h, w = (int(v) for v in rng.integers(1, 17, size=2))
    x = rng.random((n, c, h, w))
    if rng.random() < 0.3:
        x = np.round(x * 4) / 4  # plenty of ties
    return x


def test_dark_matches_oracle_example():
    x = np.random.default_rng(0).random((1, 3, 8, 8))
    vals, mask = dark_extract(x, 3)
    ov, oi = brute_extreme(x, 3)
    assert np.array_equal(vals, ov)
    assert np.array_equal(mask.index, oi)


def test_extractors_match_oracle_random():
    rng = np.random.default_rng(1)
    for _ in range(30):
        x = random_tensor(rng)
        window = int(rng.choice([3, 5, 7]))
        for fn, pick_max in ((dark_extract, False), (bright_extract, True)):
            vals, mask = fn(x, window)
            ov, oi = brute_extreme(x, window, pick_max)
            assert np.array_equal(vals, ov)
            assert np.array_equal(mask.index, oi)


def test_center_minimum():
    x = np.ones((1, 1, 3, 3))
    x[0, 0, 1, 1] = 0.0
    vals, mask = dark_extract(x, 3)
    assert np.all(vals == 0)
    assert np.all(mask.index == 4)
    grad = extract_backward(np.ones((1, 1, 3, 3)), mask)
    expected = np.zeros_like(x)
    expected[0, 0, 1, 1] = 9.0
    assert np.array_equal(grad, expected)


def test_center_maximum():
    x = np.zeros((1, 1, 3, 3))
    x[0, 0, 1, 1] = 1.0
    vals, _ = bright_extract(x, 3)
    assert np.all(vals == 1)


@pytest.mark.parametrize("fn", [dark_extract, bright_extract])
def test_constant_input(fn):
    x = np.full((2, 3, 5, 6), 0.37)
    vals, _ = fn(x, 5)
    assert np.all(vals == 0.37)


def test_duality():
    rng = np.random.default_rng(2)
    for _ in range(20):
        x = rng.standard_normal((2, 3, 9, 7))
        b, _ = bright_extract(x, 5)
        d, _ = dark_extract(-x, 5)
        assert np.array_equal(b, -d)


def test_dark_bounds_window_elements():
    rng = np.random.default_rng(3)
    x = rng.random((1, 3, 10, 10))
    d, _ = dark_extract(x, 5)
    b, _ = bright_extract(x, 5)
    for i in range(10):
        for j in range(10):
            patch = x[0, :, max(0, i - 2):i + 3, max(0, j - 2):j + 3]
            assert d[0, 0, i, j] <= patch.min() and b[0, 0, i, j] >= patch.max()


def test_gradient_mass_conservation():
    rng = np.random.default_rng(4)
    for _ in range(50):
        x = random_tensor(rng)
        _, mask = dark_extract(x, int(rng.choice([3, 5, 7])))
        up = rng.standard_normal((x.shape[0], 1) + x.shape[2:])
        g = extract_backward(up, mask)
        assert abs(g.sum() - up.sum()) <= 1e-12 * max(1.0, np.abs(up).sum())


def test_constant_input_counts_oracle():
    x = np.zeros((1, 2, 6, 5))
    window = 3
    _, mask = dark_extract(x, window)
    grad = extract_backward(np.ones((1, 1, 6, 5)), mask)
    _, oi = brute_extreme(x, window)
    counts = np.bincount(oi.ravel(), minlength=x.size).reshape(x.shape)
    assert np.array_equal(grad, counts.astype(float))
    # first-index rule: every window picks its top-left corner in channel 0
    assert grad[0, 1].sum() == 0


def test_backward_checks():
    x = np.random.default_rng(5).random((1, 2, 4, 4))
    _, mask = dark_extract(x, 3)
    with pytest.raises(ShapeError):
        extract_backward(np.ones((1, 1, 4, 5)), mask)
    bad = ecpel.ExtremeChannelMask(mask.index + 100, mask.input_shape, 3)
    with pytest.raises(RuntimeError):
        extract_backward(np.ones((1, 1, 4, 4)), bad)


def test_window_validation():
    with pytest.raises(ShapeError):
        dark_extract(np.zeros((1, 1, 4, 4)), 4)
    with pytest.raises(ShapeError):
        bright_extract(np.zeros((1, 4, 4)), 3)


def test_layer_channel_arithmetic():
    rng = np.random.default_rng(6)
    params = init_ecpel(rng, 64, 64, dtype=np.float64)
    out = ecpel_forward(Tensor(rng.standard_normal((1, 64, 8, 8))), params, 3)
    assert out.features.shape == (1, 70, 8, 8)
    assert out.dark.shape == out.bright.shape == (1, 1, 8, 8)
    for branch in (out.lam, out.omega):
        assert np.all((branch.data > 0) & (branch.data < 1))


def test_layer_channel_mismatch():
    params = init_ecpel(np.random.default_rng(0), 4, 4)
    with pytest.raises(ShapeError):
        ecpel_forward(Tensor(np.zeros((1, 5, 4, 4))), params, 3)


def test_layer_gradients():
    report = gradcheck_suite(0, ["ecpel", "extractor"])
    assert [c.name for c in report.cases] == ["extractor.dark", "extractor.bright", "ecpel"]
    assert report.passed, report.lines()

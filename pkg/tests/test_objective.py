import numpy as np
import pytest

from ecpenet import tensor as T
from ecpenet.objective import (
    ALTERNATIVE_WEIGHT,
    DEFAULT_WEIGHT,
    LossConfig,
    multiscale_loss,
    reconstruction_loss,
)
from ecpenet.tensor import ShapeError, Tensor


def maps(rng, scales=2, size=4):
    preds = [Tensor(rng.random((1, 3, size >> j, size >> j)), requires_grad=True) for j in range(scales)]
    targets = [rng.random(p.shape) for p in preds]
    dark = [Tensor(rng.uniform(0.05, 1, (1, 1) + p.shape[2:]), requires_grad=True) for p in preds]
    bright = [Tensor(rng.uniform(0, 0.95, (1, 1) + p.shape[2:]), requires_grad=True) for p in preds]
    return preds, targets, dark, bright


def test_defaults():
    assert DEFAULT_WEIGHT == 0.1 and ALTERNATIVE_WEIGHT == 0.2
    cfg = LossConfig()
    assert (cfg.lam, cfg.omega) == (0.1, 0.1)


def test_perfect_reconstruction_zero():
    rng = np.random.default_rng(0)
    preds, _, dark, bright = maps(rng)
    out = multiscale_loss(preds, [p.data for p in preds], dark, bright, LossConfig(0.0, 0.0, 2))
    assert out.total_value == 0.0


def test_hand_computed_dark_term():
    pred = Tensor(np.zeros((1, 3, 4, 4)))
    dark = Tensor(np.full((1, 1, 4, 4), 0.5))
    bright = Tensor(np.ones((1, 1, 4, 4)))
    out = multiscale_loss([pred], [np.zeros((1, 3, 4, 4))], [dark], [bright], LossConfig(0.1, 0.1, 1))
    assert out.total_value == pytest.approx(0.05, abs=1e-12)
    assert out.dark == [0.5] and out.bright == [0.0]


def test_monotone_in_weights():
    rng = np.random.default_rng(1)
    preds, targets, dark, bright = maps(rng)
    totals_l = [multiscale_loss(preds, targets, dark, bright, LossConfig(l, 0.1, 2)).total_value for l in (0, 0.1, 0.2, 1)]
    totals_o = [multiscale_loss(preds, targets, dark, bright, LossConfig(0.1, o, 2)).total_value for o in (0, 0.1, 0.2, 1)]
    assert all(a < b for a, b in zip(totals_l, totals_l[1:]))
    assert all(a < b for a, b in zip(totals_o, totals_o[1:]))


def test_ecp_off_bit_equal_to_reconstruction():
    rng = np.random.default_rng(2)
    preds, targets, dark, bright = maps(rng, 3, 8)
    off = multiscale_loss(preds, targets, dark, bright, LossConfig(0.3, 0.3, 3, ecp_enabled=False))
    plain = reconstruction_loss(preds, targets)
    assert off.total_value == float(plain.data)
    assert off.dark == [] and off.bright == []


def test_gradients_reach_maps_and_predictions():
    rng = np.random.default_rng(3)
    preds, targets, dark, bright = maps(rng)
    out = multiscale_loss(preds, targets, dark, bright, LossConfig(0.1, 0.2, 2))
    T.backward(out.total)
    for d in dark:
        np.testing.assert_allclose(d.grad, 0.1 / d.data.size)
    for b in bright:
        np.testing.assert_allclose(b.grad, -0.2 / b.data.size)
    for p, t in zip(preds, targets):
        np.testing.assert_allclose(p.grad, np.sign(p.data - t) / p.data.size)


def test_validation():
    with pytest.raises(ValueError):
        LossConfig(-0.1, 0.1)
    rng = np.random.default_rng(4)
    preds, targets, dark, bright = maps(rng)
    with pytest.raises(ShapeError):
        multiscale_loss(preds, targets[:1], dark, bright, LossConfig(scales=2))
    with pytest.raises(ShapeError):
        multiscale_loss(preds, [targets[1], targets[0]], dark, bright, LossConfig(scales=2))

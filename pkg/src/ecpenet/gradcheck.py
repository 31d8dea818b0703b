"""Central finite-difference checks of every analytic backward rule."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from . import tensor as T
from .ecpel import bright_channel, dark_channel, ecpel_forward, init_ecpel
from .network import NetworkConfig, build_network, forward
from .objective import LossConfig, multiscale_loss

PRIMITIVE_TOL = 1e-4
NETWORK_TOL = 1e-3
STEP = 1e-5


def finite_diff_grad(fn: Callable[[np.ndarray], float], x: np.ndarray, h: float = STEP, indices=None) -> np.ndarray:
    """Central differences ``(f(x + h e_i) - f(x - h e_i)) / 2h``.

    ``indices`` restricts the estimate to some flat positions; the rest stay 0.
    ``x`` is perturbed in place and restored.
    """
    flat = x.reshape(-1)
    grad = np.zeros(flat.size, dtype=np.float64)
    todo = range(flat.size) if indices is None else indices
    for i in todo:
        orig = flat[i]
        flat[i] = orig + h
        up = fn(x)
        flat[i] = orig - h
        down = fn(x)
        flat[i] = orig
        grad[i] = (up - down) / (2 * h)
    return grad.reshape(x.shape)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max-norm discrepancy scaled by the larger gradient magnitude."""
    scale = max(np.max(np.abs(analytic)), np.max(np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric)) / scale)


@dataclass
class CaseResult:
    name: str
    error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.error) and self.error < self.tolerance)


@dataclass
class GradcheckReport:
    seed: int
    cases: List[CaseResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.cases)

    def lines(self) -> List[str]:
        out = [
            f"{'PASS' if c.passed else 'FAIL'}  {c.name:<24} max rel err {c.error:.3e}  (tol {c.tolerance:.0e})"
            for c in self.cases
        ]
        out.append(f"overall: {'PASS' if self.passed else 'FAIL'} ({len(self.cases)} cases, seed {self.seed})")
        return out


def _check_leaves(build: Callable[[Sequence[T.Tensor]], T.Tensor], arrays: Sequence[np.ndarray], indices=None) -> float:
    """Compare backward() with finite differences for every array fed to ``build``."""
    leaves = [T.Tensor(a, requires_grad=True) for a in arrays]
    loss = build(leaves)
    T.backward(loss)
    worst = 0.0
    for k, leaf in enumerate(leaves):
        def f(_, k=k):
            vals = [T.Tensor(l.data) for l in leaves]
            return float(build(vals).data)

        idx = None if indices is None else indices[k]
        numeric = finite_diff_grad(f, leaf.data, STEP, idx)
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        if idx is not None:
            mask = np.zeros(leaf.data.size, dtype=bool)
            mask[list(idx)] = True
            analytic = analytic.reshape(-1)[mask]
            numeric = numeric.reshape(-1)[mask]
        worst = max(worst, relative_error(analytic, numeric))
    return worst


def _dot(out: T.Tensor, weights: np.ndarray) -> T.Tensor:
    """sum(out * weights): a random linear read-out so every output entry matters."""

    def bw(g):
        return (g * weights,)

    return T._make(np.asarray((out.data * weights).sum()), (out,), bw, "dot")


def _away_from_zero(rng, shape, low=0.1):
    return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(low, 1.0, size=shape)


def _case_conv(rng):
    x = rng.standard_normal((2, 3, 5, 5))
    w = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    proj = rng.standard_normal((2, 4, 5, 5))
    return _check_leaves(lambda t: _dot(T.conv2d(t[0], t[1], t[2]), proj), [x, w, b])


def _case_prelu(rng):
    x = _away_from_zero(rng, (2, 3, 4, 4))
    a = rng.uniform(0.05, 0.5, size=3)
    proj = rng.standard_normal(x.shape)
    return _check_leaves(lambda t: _dot(T.prelu(t[0], t[1]), proj), [x, a])


def _case_sigmoid(rng):
    x = rng.standard_normal((1, 3, 4, 4)) * 3
    proj = rng.standard_normal(x.shape)
    return _check_leaves(lambda t: _dot(T.sigmoid(t[0]), proj), [x])


def _case_unshuffle(rng):
    x = rng.standard_normal((2, 3, 4, 6))
    proj = rng.standard_normal((2, 12, 2, 3))
    return _check_leaves(lambda t: _dot(T.pixel_unshuffle(t[0], 2), proj), [x])


def _case_shuffle(rng):
    x = rng.standard_normal((2, 8, 3, 2))
    proj = rng.standard_normal((2, 2, 6, 4))
    return _check_leaves(lambda t: _dot(T.pixel_shuffle(t[0], 2), proj), [x])


def _case_concat(rng):
    xs = [rng.standard_normal((2, c, 3, 3)) for c in (3, 5, 3)]
    proj = rng.standard_normal((2, 11, 3, 3))
    return _check_leaves(lambda t: _dot(T.concat_channels(t), proj), xs)


def _case_l1(rng):
    a = rng.standard_normal((2, 3, 4, 4))
    b = a + _away_from_zero(rng, a.shape)
    return _check_leaves(lambda t: T.l1_distance(t[0], t[1]), [a, b])


def _case_l1_prior_terms(rng):
    d = rng.uniform(0.05, 0.95, size=(2, 1, 4, 4))
    b = rng.uniform(0.05, 0.95, size=(2, 1, 4, 4))
    return _check_leaves(lambda t: T.l1_distance(t[0], 0.0) * 0.3 + T.l1_distance(t[1], 1.0) * 0.7, [d, b])


def _case_dark(rng):
    x = rng.random((2, 3, 6, 6))
    proj = rng.standard_normal((2, 1, 6, 6))
    return _check_leaves(lambda t: _dot(dark_channel(t[0], 3)[0], proj), [x])


def _case_bright(rng):
    x = rng.random((2, 3, 6, 6))
    proj = rng.standard_normal((2, 1, 6, 6))
    return _check_leaves(lambda t: _dot(bright_channel(t[0], 5)[0], proj), [x])


def _case_ecpel(rng):
    c_in, c = 4, 4
    params = init_ecpel(rng, c_in, c, dtype=np.float64)
    for branch in (params.theta, params.alpha, params.beta):
        branch.bias.data = rng.standard_normal(branch.bias.shape) * 0.1
    x = rng.standard_normal((1, c_in, 6, 6))
    proj = rng.standard_normal((1, 3 + c + 3, 6, 6))
    pd = rng.standard_normal((1, 1, 6, 6))
    pb = rng.standard_normal((1, 1, 6, 6))
    tensors = [params.theta.weight, params.theta.bias, params.theta.slope,
               params.alpha.weight, params.alpha.bias, params.beta.weight, params.beta.bias]

    def build(t):
        (params.theta.weight, params.theta.bias, params.theta.slope,
         params.alpha.weight, params.alpha.bias, params.beta.weight, params.beta.bias, feats) = t
        out = ecpel_forward(feats, params, 3)
        return _dot(out.features, proj) + _dot(out.dark, pd) + _dot(out.bright, pb)

    arrays = [t.data.copy() for t in tensors] + [x]
    return _check_leaves(build, arrays)


def tiny_network_config() -> NetworkConfig:
    return NetworkConfig(scales=2, channels=8, rir_blocks=1, res_blocks_per_rir=1, windows=(5, 3), dtype="float64")


def _case_network(rng, per_tensor: int = 2):
    cfg = tiny_network_config()
    params = build_network(cfg, int(rng.integers(2**31)))
    for _, p in params.named_parameters():
        if p.data.ndim == 1:
            p.data = p.data + rng.standard_normal(p.shape) * 0.05
    x = rng.random((1, 3, 16, 16))
    y = rng.random((1, 3, 16, 16))
    xs = [x, x.reshape(1, 3, 8, 2, 8, 2).mean(axis=(3, 5))]
    ys = [y, y.reshape(1, 3, 8, 2, 8, 2).mean(axis=(3, 5))]
    loss_cfg = LossConfig(0.1, 0.1, cfg.scales, True)

    def loss_value():
        r = forward(params, xs)
        return multiscale_loss(r.outputs, ys, r.dark, r.bright, loss_cfg).total

    params.zero_grad()
    T.backward(loss_value())
    worst = 0.0
    for name, p in params.named_parameters():
        idx = rng.choice(p.data.size, size=min(per_tensor, p.data.size), replace=False)
        numeric = finite_diff_grad(lambda _: float(loss_value().data), p.data, STEP, idx).reshape(-1)[idx]
        analytic = p.grad.reshape(-1)[idx]
        worst = max(worst, relative_error(analytic, numeric))
    return worst


CASES: Dict[str, tuple] = {
    "conv2d": (_case_conv, PRIMITIVE_TOL),
    "prelu": (_case_prelu, PRIMITIVE_TOL),
    "sigmoid": (_case_sigmoid, PRIMITIVE_TOL),
    "pixel_unshuffle": (_case_unshuffle, PRIMITIVE_TOL),
    "pixel_shuffle": (_case_shuffle, PRIMITIVE_TOL),
    "concat": (_case_concat, PRIMITIVE_TOL),
    "l1_distance": (_case_l1, PRIMITIVE_TOL),
    "l1_prior_terms": (_case_l1_prior_terms, PRIMITIVE_TOL),
    "extractor.dark": (_case_dark, PRIMITIVE_TOL),
    "extractor.bright": (_case_bright, PRIMITIVE_TOL),
    "ecpel": (_case_ecpel, PRIMITIVE_TOL),
    "network": (_case_network, NETWORK_TOL),
}


def gradcheck_suite(seed: int = 0, cases: Optional[Sequence[str]] = None) -> GradcheckReport:
    """Run the selected cases (prefix match; all by default) in 64-bit arithmetic."""
    report = GradcheckReport(seed)
    for k, (name, (fn, tol)) in enumerate(CASES.items()):
        if cases and not any(name.startswith(c) for c in cases):
            continue
        rng = np.random.default_rng([seed, k])
        try:
            err = fn(rng)
        except Exception as exc:  # a crashing case is a failed case
            err = float("nan")
            name = f"{name} ({type(exc).__name__}: {exc})"
        report.cases.append(CaseResult(name, err, tol))
    return report

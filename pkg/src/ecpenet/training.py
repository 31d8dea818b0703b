"""Adam optimization loop with deterministic checkpoint/resume."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .checkpoint import Checkpoint, CheckpointError, save_checkpoint
from .data import BlurPair, augment, build_pyramid, crop_patches
from .metrics import psnr
from .network import ForwardResult, NetworkConfig, NetworkParams, build_network, forward
from .objective import LossBreakdown, LossConfig, multiscale_loss
from .tensor import Tensor, backward, first_nonfinite

logger = logging.getLogger(__name__)


class NumericalError(RuntimeError):
    """Training produced a NaN or Inf."""


@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 10
    iterations: int = 600_000
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    ecp_enabled: bool = True
    ife_enabled: bool = True
    lam: float = 0.1
    omega: float = 0.1
    patch_size: Optional[int] = 256  # None trains on whole images
    augment: bool = True
    noise_sigma: float = 0.01
    checkpoint_interval: int = 0  # 0 disables periodic checkpoints
    checkpoint_dir: Optional[str] = None
    log_path: Optional[str] = None
    eval_interval: int = 0
    target_psnr: Optional[float] = None  # stop early once the held-out PSNR reaches this

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        base = dict(batch_size=2, iterations=2000, patch_size=64)
        base.update(overrides)
        return cls(**base)


@dataclass
class AdamState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(
    params: Iterable[Tuple[str, Tensor]],
    grads: Dict[str, Optional[np.ndarray]],
    state: AdamState,
    lr: float = 1e-4,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> AdamState:
    """One bias-corrected Adam update; parameters get fresh arrays, ``state`` is updated in place."""
    params = list(params)
    for name, p in params:
        g = grads.get(name)
        if g is not None and g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter has {p.shape}")
    state.t += 1
    t = state.t
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for name, p in params:
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        p.data = (p.data - lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.dtype, copy=False)
        state.m[name] = m
        state.v[name] = v
    return state


def _stack(arrs: Sequence[np.ndarray]) -> np.ndarray:
    return np.stack(arrs, axis=0)


class Trainer:
    """Owns parameters, optimizer state and the data generator for one run."""

    def __init__(
        self,
        config: TrainConfig,
        dataset: Sequence[BlurPair],
        net_config: NetworkConfig,
        params: Optional[NetworkParams] = None,
        extra_config: Optional[dict] = None,
    ):
        if not dataset:
            raise ValueError("dataset is empty")
        self.config = config
        self.dataset = list(dataset)
        self.net_config = replace(net_config, ecp=config.ecp_enabled, ife=config.ife_enabled).validate()
        self.loss_config = LossConfig(config.lam, config.omega, self.net_config.scales, config.ecp_enabled)
        self.params = params if params is not None else build_network(self.net_config, config.seed)
        self.state = AdamState()
        self.rng = np.random.default_rng(config.seed)
        self.iteration = 0
        self.log: List[dict] = []
        self.extra_config = extra_config or {}

    # -- data ------------------------------------------------------------

    def sample_batch(self) -> Tuple[List[np.ndarray], List[np.ndarray]]:
        cfg = self.config
        xs, ys = [], []
        for idx in self.rng.integers(len(self.dataset), size=cfg.batch_size):
            pair = self.dataset[int(idx)]
            if cfg.patch_size is not None and cfg.patch_size < max(pair.sharp.shape[-2:]):
                pair = crop_patches(pair, cfg.patch_size, 1, self.rng)[0]
            if cfg.augment:
                pair = augment(pair, self.rng, sigma=cfg.noise_sigma)
            xs.append(pair.blurred)
            ys.append(pair.sharp)
        scales = self.net_config.scales
        return build_pyramid(_stack(xs), scales), build_pyramid(_stack(ys), scales)

    # -- one iteration ---------------------------------------------------

    def compute_loss(self, result: ForwardResult, targets: Sequence[np.ndarray]) -> LossBreakdown:
        return multiscale_loss(result.outputs, targets, result.dark, result.bright, self.loss_config)

    def step(self) -> LossBreakdown:
        start = time.perf_counter()
        inputs, targets = self.sample_batch()
        result = forward(self.params, inputs)
        breakdown = self.compute_loss(result, targets)
        if not math.isfinite(breakdown.total_value):
            bad = first_nonfinite(breakdown.total)
            label = (bad.name or bad.op) if bad is not None else "loss"
            raise NumericalError(f"non-finite loss at iteration {self.iteration + 1}; first non-finite tensor: {label}")
        self.params.zero_grad()
        backward(breakdown.total)
        named = list(self.params.named_parameters())
        grads = {}
        for name, p in named:
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise NumericalError(f"non-finite gradient for {name} at iteration {self.iteration + 1}")
            grads[name] = p.grad
        cfg = self.config
        adam_step(named, grads, self.state, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
        self.iteration += 1
        record = {"iter": self.iteration, **breakdown.to_record(), "seconds": round(time.perf_counter() - start, 6)}
        self.log.append(record)
        return breakdown

    def evaluate(self, pair: Optional[BlurPair] = None) -> float:
        """Finest-scale PSNR (output clipped to [0, 1]) on a pair, by default the last one."""
        return evaluate_psnr(self.params, pair if pair is not None else self.dataset[-1])

    # -- persistence -----------------------------------------------------

    def resolved_config(self) -> dict:
        return {"train": asdict(self.config), "network": self.net_config.to_dict(), **self.extra_config}

    def checkpoint(self) -> Checkpoint:
        return Checkpoint(
            config=self.resolved_config(),
            iteration=self.iteration,
            params=self.params.state_dict(),
            adam_m={k: v.copy() for k, v in self.state.m.items()},
            adam_v={k: v.copy() for k, v in self.state.v.items()},
            adam_t=self.state.t,
            rng_state=self.rng.bit_generator.state,
        )

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint, dataset: Sequence[BlurPair], **overrides) -> "Trainer":
        train_cfg = TrainConfig(**{**ckpt.config["train"], **overrides})
        net_cfg = NetworkConfig.from_dict(ckpt.config["network"])
        extra = {k: v for k, v in ckpt.config.items() if k not in ("train", "network")}
        trainer = cls(train_cfg, dataset, net_cfg, extra_config=extra)
        restore_params(trainer.params, ckpt)
        trainer.state = AdamState(
            {k: v.copy() for k, v in ckpt.adam_m.items()},
            {k: v.copy() for k, v in ckpt.adam_v.items()},
            ckpt.adam_t,
        )
        trainer.rng.bit_generator.state = ckpt.rng_state
        trainer.iteration = ckpt.iteration
        return trainer

    def run(self, until: Optional[int] = None, on_interval: Optional[Callable[["Trainer", LossBreakdown], None]] = None) -> List[dict]:
        cfg = self.config
        until = cfg.iterations if until is None else until
        log_file = open(cfg.log_path, "a", encoding="utf-8") if cfg.log_path else None
        try:
            while self.iteration < until:
                breakdown = self.step()
                score = None
                if cfg.eval_interval and self.iteration % cfg.eval_interval == 0:
                    score = self.evaluate()
                    self.log[-1]["psnr"] = score
                if log_file is not None:
                    log_file.write(json.dumps(self.log[-1], sort_keys=True) + "\n")
                if cfg.checkpoint_interval and cfg.checkpoint_dir and self.iteration % cfg.checkpoint_interval == 0:
                    save_checkpoint(self.checkpoint(), Path(cfg.checkpoint_dir) / f"ckpt_{self.iteration:07d}.ecpn")
                if score is not None:
                    if on_interval is not None:
                        on_interval(self, breakdown)
                    if cfg.target_psnr is not None and score >= cfg.target_psnr:
                        break
        finally:
            if log_file is not None:
                log_file.close()
        return self.log


def restore_params(params: NetworkParams, ckpt: Checkpoint) -> None:
    try:
        params.load_state_dict(ckpt.params)
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"checkpoint does not match network: {exc}") from exc


def network_from_checkpoint(ckpt: Checkpoint) -> NetworkParams:
    net_cfg = NetworkConfig.from_dict(ckpt.config["network"])
    params = build_network(net_cfg, 0)
    restore_params(params, ckpt)
    return params


def predict(params: NetworkParams, blurred: np.ndarray) -> np.ndarray:
    """Finest-scale estimate for one (3, H, W) image."""
    levels = build_pyramid(np.asarray(blurred)[None], params.config.scales)
    out = forward(params, levels).outputs[0].data[0]
    return out.astype(np.float64)


def evaluate_psnr(params: NetworkParams, pair: BlurPair) -> float:
    est = np.clip(predict(params, pair.blurred), 0.0, 1.0)
    factor = 2 ** (params.config.scales - 1)
    h, w = est.shape[-2:]
    return psnr(est, pair.sharp[:, :h, :w][:, : h - h % factor, : w - w % factor])


def train(
    config: TrainConfig,
    dataset: Sequence[BlurPair],
    net_config: NetworkConfig,
    on_interval=None,
) -> Tuple[Checkpoint, List[dict]]:
    """Train from scratch and return the final checkpoint and the per-iteration log."""
    trainer = Trainer(config, dataset, net_config)
    trainer.run(on_interval=on_interval)
    return trainer.checkpoint(), trainer.log

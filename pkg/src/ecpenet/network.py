"""Multi-scale deblurring network with prior-embedded encoders.

Per scale the encoder is ``conv1 -> ECPeL -> conv2 -> conv3 -> [fuse] -> conv4``
where ``fuse`` concatenates the pixel-unshuffled encoder output of the next
finer scale and reduces the result back to the base width.  A feature mapper
whose parameters exist once and serve every scale refines each encoder output.
Decoders mirror the encoders (``conv1 -> [fuse] -> conv2 -> conv3 -> out``),
running from the coarsest scale up and receiving the pixel-shuffled features of
the next coarser decoder.  Each scale predicts a residual added to its input.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .ecpel import ECPeLOutput, ECPeLParams, ExtremeChannelMask, PRIOR_CHANNELS, ecpel_forward, init_ecpel
from .layers import ConvParams, xavier_conv
from .tensor import ShapeError, Tensor, add, concat_channels, pixel_shuffle, pixel_unshuffle

IMAGE_CHANNELS = 3
# encoders see zero-centred intensities; the global residual is added to the raw input
INPUT_SHIFT = 0.5


@dataclass
class NetworkConfig:
    scales: int = 3
    channels: int = 64
    rir_blocks: int = 16
    res_blocks_per_rir: int = 4
    windows: Tuple[int, ...] = (31, 19, 11)
    ecp: bool = True
    ife: bool = True
    dtype: str = "float32"

    def __post_init__(self):
        self.windows = tuple(int(w) for w in self.windows)

    def validate(self) -> "NetworkConfig":
        bad = []
        if not isinstance(self.scales, int) or self.scales < 2:
            bad.append(f"scales={self.scales!r} (need >= 2)")
        if not isinstance(self.channels, int) or self.channels < 4 or self.channels % 4:
            bad.append(f"channels={self.channels!r} (need a positive multiple of 4)")
        if not isinstance(self.rir_blocks, int) or self.rir_blocks < 1:
            bad.append(f"rir_blocks={self.rir_blocks!r}")
        if not isinstance(self.res_blocks_per_rir, int) or self.res_blocks_per_rir < 1:
            bad.append(f"res_blocks_per_rir={self.res_blocks_per_rir!r}")
        if len(self.windows) != self.scales or any(w < 1 or w % 2 == 0 for w in self.windows):
            bad.append(f"windows={self.windows!r} (need {self.scales} positive odd sizes)")
        if self.dtype not in ("float32", "float64"):
            bad.append(f"dtype={self.dtype!r}")
        if bad:
            raise ValueError("invalid network config: " + ", ".join(bad))
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["windows"] = list(self.windows)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        return cls(**d)


@dataclass
class EncoderParams:
    conv1: ConvParams
    ecpel: Optional[ECPeLParams]
    plain: Optional[ConvParams]  # stands in for the ECPeL when the prior is ablated
    conv2: ConvParams
    conv3: ConvParams
    fuse: Optional[ConvParams]
    conv4: ConvParams

    def named(self, prefix: str):
        yield from self.conv1.named(f"{prefix}.conv1")
        if self.ecpel is not None:
            yield from self.ecpel.named(f"{prefix}.ecpel")
        if self.plain is not None:
            yield from self.plain.named(f"{prefix}.plain")
        yield from self.conv2.named(f"{prefix}.conv2")
        yield from self.conv3.named(f"{prefix}.conv3")
        if self.fuse is not None:
            yield from self.fuse.named(f"{prefix}.fuse")
        yield from self.conv4.named(f"{prefix}.conv4")


@dataclass
class DecoderParams:
    conv1: ConvParams
    fuse: Optional[ConvParams]
    conv2: ConvParams
    conv3: ConvParams
    out: ConvParams

    def named(self, prefix: str):
        yield from self.conv1.named(f"{prefix}.conv1")
        if self.fuse is not None:
            yield from self.fuse.named(f"{prefix}.fuse")
        yield from self.conv2.named(f"{prefix}.conv2")
        yield from self.conv3.named(f"{prefix}.conv3")
        yield from self.out.named(f"{prefix}.out")


@dataclass
class ResBlockParams:
    conv1: ConvParams  # followed by PReLU
    conv2: ConvParams


@dataclass
class RIRBlockParams:
    blocks: List[ResBlockParams]
    tail: ConvParams


@dataclass
class MapperParams:
    rirs: List[RIRBlockParams]
    tail: ConvParams


@dataclass
class NetworkParams:
    config: NetworkConfig
    encoders: List[EncoderParams]
    mapper: MapperParams  # one storage, used by every scale
    decoders: List[DecoderParams]

    def named_parameters(self) -> Iterator[Tuple[str, Tensor]]:
        for j, enc in enumerate(self.encoders):
            yield from enc.named(f"enc{j}")
        for b, rir in enumerate(self.mapper.rirs):
            for r, res in enumerate(rir.blocks):
                yield from res.conv1.named(f"mapper.rir{b}.res{r}.conv1")
                yield from res.conv2.named(f"mapper.rir{b}.res{r}.conv2")
            yield from rir.tail.named(f"mapper.rir{b}.tail")
        yield from self.mapper.tail.named("mapper.tail")
        for j, dec in enumerate(self.decoders):
            yield from dec.named(f"dec{j}")

    def parameters(self) -> List[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        if set(own) != set(state):
            missing = sorted(set(own) - set(state))
            extra = sorted(set(state) - set(own))
            raise KeyError(f"parameter name mismatch; missing={missing[:5]} unexpected={extra[:5]}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ShapeError(f"parameter {name}: stored shape {arr.shape} != {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def count(self) -> int:
        return sum(p.data.size for p in self.parameters())


def build_network(config: NetworkConfig, seed: int = 0) -> NetworkParams:
    """Xavier-initialized parameters, deterministic in ``seed``."""
    config.validate()
    rng = np.random.default_rng(seed)
    dt = np.dtype(config.dtype)
    c = config.channels

    def conv(cin, cout, act=True):
        return xavier_conv(rng, cin, cout, activation=act, dtype=dt)

    encoders = []
    for j in range(config.scales):
        conv1 = conv(IMAGE_CHANNELS, c)
        if config.ecp:
            ecpel, plain = init_ecpel(rng, c, c, dtype=dt), None
        else:
            ecpel, plain = None, conv(c, c + 2 * PRIOR_CHANNELS)
        conv2 = conv(c + 2 * PRIOR_CHANNELS, c)
        conv3 = conv(c, c)
        fuse = conv(5 * c, c) if (j > 0 and config.ife) else None
        encoders.append(EncoderParams(conv1, ecpel, plain, conv2, conv3, fuse, conv(c, c)))

    rirs = []
    for _ in range(config.rir_blocks):
        blocks = [ResBlockParams(conv(c, c), conv(c, c, act=False)) for _ in range(config.res_blocks_per_rir)]
        rirs.append(RIRBlockParams(blocks, conv(c, c, act=False)))
    mapper = MapperParams(rirs, conv(c, c, act=False))

    decoders = []
    for j in range(config.scales):
        conv1 = conv(c, c)
        fuse = conv(c + c // 4, c) if j < config.scales - 1 else None
        decoders.append(DecoderParams(conv1, fuse, conv(c, c), conv(c, c), conv(c, IMAGE_CHANNELS, act=False)))
    return NetworkParams(config, encoders, mapper, decoders)


def feature_mapper(x: Tensor, mapper: MapperParams, channels: Optional[int] = None) -> Tensor:
    """Residual-in-residual stack with a long skip around the whole body.

    ResBlock: ``h + conv2(prelu(conv1(h)))``.  RIRBlock: ``h + tail(ResBlocks(h))``.
    Mapper: ``x + tail(RIRBlocks(x))``.  With every weight and bias zero the
    mapper is the identity.
    """
    if channels is not None and x.shape[1] != channels:
        raise ShapeError(f"feature mapper expects {channels} channels, got shape {x.shape}")
    h = x
    for rir in mapper.rirs:
        inner = h
        for res in rir.blocks:
            inner = add(inner, res.conv2(res.conv1(inner)))
        h = add(h, rir.tail(inner))
    return add(x, mapper.tail(h))


@dataclass
class ForwardResult:
    outputs: List[Tensor]
    dark: List[Tensor] = field(default_factory=list)
    bright: List[Tensor] = field(default_factory=list)
    dark_masks: List[ExtremeChannelMask] = field(default_factory=list)
    bright_masks: List[ExtremeChannelMask] = field(default_factory=list)
    prior: List[ECPeLOutput] = field(default_factory=list)


def check_pyramid(levels: Sequence[np.ndarray], scales: int) -> None:
    if len(levels) != scales:
        raise ShapeError(f"pyramid has {len(levels)} levels, network expects {scales}")
    for j, lvl in enumerate(levels):
        if lvl.ndim != 4 or lvl.shape[1] != IMAGE_CHANNELS:
            raise ShapeError(f"pyramid level {j} must be (N, 3, H, W), got {lvl.shape}")
        if j:
            prev = levels[j - 1].shape
            want = (prev[0], prev[1], prev[2] // 2, prev[3] // 2)
            if prev[2] % 2 or prev[3] % 2 or lvl.shape != want:
                raise ShapeError(f"pyramid level {j} has shape {lvl.shape}, expected exactly half of {prev}")


def forward(params: NetworkParams, pyramid: Sequence[np.ndarray]) -> ForwardResult:
    """Run all scales; ``pyramid`` is finest first, each level (N, 3, H, W)."""
    cfg = params.config
    levels = [np.asarray(p) for p in pyramid]
    check_pyramid(levels, cfg.scales)
    xs = [Tensor(lvl.astype(cfg.dtype, copy=False)) for lvl in levels]
    result = ForwardResult(outputs=[None] * cfg.scales)

    encoded = []
    prev = None
    for j, (x, enc) in enumerate(zip(xs, params.encoders)):
        h = enc.conv1(Tensor(x.data - x.data.dtype.type(INPUT_SHIFT)))
        if enc.ecpel is not None:
            ecp = ecpel_forward(h, enc.ecpel, cfg.windows[j])
            result.prior.append(ecp)
            result.dark.append(ecp.dark)
            result.bright.append(ecp.bright)
            result.dark_masks.append(ecp.dark_mask)
            result.bright_masks.append(ecp.bright_mask)
            h = ecp.features
        else:
            h = enc.plain(h)
        h = enc.conv3(enc.conv2(h))
        if enc.fuse is not None:
            h = enc.fuse(concat_channels([h, pixel_unshuffle(prev, 2)]))
        h = enc.conv4(h)
        encoded.append(h)
        prev = h

    mapped = [feature_mapper(e, params.mapper, cfg.channels) for e in encoded]

    prev = None
    for j in reversed(range(cfg.scales)):
        dec = params.decoders[j]
        h = dec.conv1(mapped[j])
        if dec.fuse is not None:
            h = dec.fuse(concat_channels([h, pixel_shuffle(prev, 2)]))
        h = dec.conv3(dec.conv2(h))
        prev = h
        result.outputs[j] = add(xs[j], dec.out(h))
    return result

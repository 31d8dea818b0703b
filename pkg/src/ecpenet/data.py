"""Blur/sharp pair synthesis, scale pyramids, augmentation and image I/O.

Images are float arrays shaped (C, H, W) with values in [0, 1].
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
from PIL import Image, ImageDraw
from scipy.signal import convolve2d

from .tensor import ShapeError

logger = logging.getLogger(__name__)

DEFAULT_NOISE = 0.01
PAPER_PATCH = 256
DESK_PATCH = 64


@dataclass
class BlurPair:
    sharp: np.ndarray
    blurred: np.ndarray
    kernel: Optional[np.ndarray] = None
    sigma: float = 0.0
    clean: Optional[np.ndarray] = None  # blurred before noise, if known

    @property
    def shape(self):
        return self.sharp.shape


# ---------------------------------------------------------------------------
# kernels
# ---------------------------------------------------------------------------


def trajectory_kernel(vertices: Sequence[Sequence[float]]) -> np.ndarray:
    """Rasterize a piecewise-linear camera path into a normalized kernel.

    The path (row, col) vertices are sampled at roughly unit arc-length steps,
    each sample standing for one short exposure; samples are splatted
    bilinearly and averaged.  The result is cropped to its support.
    """
    pts = np.asarray(vertices, dtype=np.float64).reshape(-1, 2)
    seg = np.diff(pts, axis=0)
    seg_len = np.hypot(seg[:, 0], seg[:, 1]) if len(seg) else np.zeros(0)
    total = float(seg_len.sum())
    n = max(1, int(round(total)))
    if total == 0.0:
        frames = pts[:1]
    else:
        s = (np.arange(n) + 0.5) * total / n
        cum = np.concatenate([[0.0], np.cumsum(seg_len)])
        k = np.clip(np.searchsorted(cum, s, side="right") - 1, 0, len(seg) - 1)
        t = (s - cum[k]) / np.where(seg_len[k] > 0, seg_len[k], 1.0)
        frames = pts[k] + t[:, None] * seg[k]
    frames = frames - (frames[0] - np.floor(frames[0]))
    frames = np.round(frames, 9)  # absorb arc-length rounding so grid-aligned paths stay exact
    base = np.floor(frames.min(axis=0)).astype(int)
    frames = frames - base
    size = np.floor(frames.max(axis=0)).astype(int) + 2
    grid = np.zeros(size)
    for r, c in frames:
        r0, c0 = int(np.floor(r)), int(np.floor(c))
        fr, fc = r - r0, c - c0
        grid[r0, c0] += (1 - fr) * (1 - fc)
        grid[r0 + 1, c0] += fr * (1 - fc)
        grid[r0, c0 + 1] += (1 - fr) * fc
        grid[r0 + 1, c0 + 1] += fr * fc
    rows = np.nonzero(grid.sum(axis=1) > 0)[0]
    cols = np.nonzero(grid.sum(axis=0) > 0)[0]
    grid = grid[rows[0]:rows[-1] + 1, cols[0]:cols[-1] + 1]
    return grid / grid.sum()


def synth_kernel(rng: np.random.Generator, max_support: int = 15, max_curvature: float = np.pi / 3) -> np.ndarray:
    """Random motion-blur kernel whose support fits in ``max_support`` squared."""
    if max_support < 3 or max_support % 2 == 0:
        raise ShapeError(f"max_support must be odd and >= 3, got {max_support}")
    n_seg = int(rng.integers(1, 4))
    length = rng.uniform(0.0, max_support - 2)
    parts = rng.dirichlet(np.ones(n_seg)) * length
    angle = rng.uniform(0.0, 2 * np.pi)
    curvature = rng.uniform(0.0, max_curvature)
    verts = [np.zeros(2)]
    for p in parts:
        verts.append(verts[-1] + p * np.array([np.sin(angle), np.cos(angle)]))
        angle += rng.normal(0.0, curvature)
    k = trajectory_kernel(verts)
    # a curved path never exceeds the straight-line budget; guard anyway
    return k[:max_support, :max_support] / k[:max_support, :max_support].sum()


def delta_kernel() -> np.ndarray:
    return np.ones((1, 1))


# ---------------------------------------------------------------------------
# pairs
# ---------------------------------------------------------------------------


def make_blur_pair(
    sharp: np.ndarray,
    kernel: np.ndarray,
    sigma: float = DEFAULT_NOISE,
    rng: Optional[np.random.Generator] = None,
) -> BlurPair:
    """Blur by true convolution, keep the valid interior of both images, add noise."""
    sharp = np.asarray(sharp, dtype=np.float64)
    kernel = np.asarray(kernel, dtype=np.float64)
    _, h, w = sharp.shape
    kh, kw = kernel.shape
    if kh > h or kw > w:
        raise ShapeError(f"kernel {kernel.shape} larger than image {sharp.shape}")
    clean = np.stack([convolve2d(ch, kernel, mode="valid") for ch in sharp])
    oh, ow = clean.shape[1:]
    cropped = sharp[:, kh // 2:kh // 2 + oh, kw // 2:kw // 2 + ow].copy()
    blurred = add_noise(clean, sigma, rng)
    return BlurPair(cropped, blurred, kernel, sigma, clean)


def add_noise(img: np.ndarray, sigma: float, rng: Optional[np.random.Generator]) -> np.ndarray:
    if sigma <= 0:
        return np.clip(img, 0.0, 1.0)
    if rng is None:
        raise ValueError("a generator is required when sigma > 0")
    return np.clip(img + rng.normal(0.0, sigma, size=img.shape), 0.0, 1.0)


def procedural_image(rng: np.random.Generator, height: int, width: int) -> np.ndarray:
    """Sharp test image: smooth colour gradient, filled polygons and glyph-like strokes."""
    yy, xx = np.mgrid[0:height, 0:width] / max(height, width)
    theta = rng.uniform(0, 2 * np.pi)
    ramp = np.cos(theta) * xx + np.sin(theta) * yy
    ramp = (ramp - ramp.min()) / max(np.ptp(ramp), 1e-9)
    lo, hi = rng.uniform(0.1, 0.9, size=(2, 3))
    bg = lo[:, None, None] + (hi - lo)[:, None, None] * ramp[None]
    img = Image.fromarray(np.round(bg.transpose(1, 2, 0) * 255).astype(np.uint8), "RGB")
    draw = ImageDraw.Draw(img)

    def colour():
        pick = rng.random()
        if pick < 0.2:
            return (0, 0, 0)
        if pick < 0.4:
            return (255, 255, 255)
        return tuple(int(v) for v in rng.integers(0, 256, size=3))

    for _ in range(int(rng.integers(3, 7))):
        cx, cy = rng.uniform(0, width), rng.uniform(0, height)
        r = rng.uniform(0.08, 0.3) * min(height, width)
        nv = int(rng.integers(3, 7))
        ang = np.sort(rng.uniform(0, 2 * np.pi, size=nv))
        poly = [(float(cx + r * np.cos(a)), float(cy + r * np.sin(a))) for a in ang]
        draw.polygon(poly, fill=colour())
    for _ in range(int(rng.integers(1, 3))):
        cx, cy = rng.uniform(0, width), rng.uniform(0, height)
        rx, ry = rng.uniform(0.05, 0.2, size=2) * min(height, width)
        draw.ellipse([cx - rx, cy - ry, cx + rx, cy + ry], fill=colour())
    for _ in range(int(rng.integers(4, 10))):
        x0, y0 = rng.uniform(0, width), rng.uniform(0, height)
        pts = [(float(x0), float(y0))]
        for _ in range(int(rng.integers(1, 4))):
            x0 += rng.uniform(-6, 6)
            y0 += rng.uniform(-6, 6)
            pts.append((float(x0), float(y0)))
        ink = (0, 0, 0) if rng.random() < 0.5 else (255, 255, 255)
        draw.line(pts, fill=ink, width=int(rng.integers(1, 3)))
    return np.asarray(img, dtype=np.float64).transpose(2, 0, 1) / 255.0


def synth_pair(
    rng: np.random.Generator,
    size: int = DESK_PATCH,
    max_support: int = 15,
    sigma: float = DEFAULT_NOISE,
    kernel: Optional[np.ndarray] = None,
) -> BlurPair:
    """A procedural sharp image blurred by a random (or given) kernel, ``size`` square."""
    k = synth_kernel(rng, max_support) if kernel is None else np.asarray(kernel, dtype=np.float64)
    kh, kw = k.shape
    sharp = procedural_image(rng, size + kh - 1, size + kw - 1)
    return make_blur_pair(sharp, k, sigma, rng)


# ---------------------------------------------------------------------------
# pyramids
# ---------------------------------------------------------------------------


def cubic_weight(x, a: float = -0.5):
    x = np.abs(np.asarray(x, dtype=np.float64))
    near = ((a + 2) * x - (a + 3)) * x * x + 1
    far = ((a * x - 5 * a) * x + 8 * a) * x - 4 * a
    return np.where(x <= 1, near, np.where(x < 2, far, 0.0))


def _half_matrix(n: int) -> np.ndarray:
    """Linear map taking a length-n signal to its bicubic half-resolution version."""
    m = np.zeros((n // 2, n))
    for i in range(n // 2):
        centre = 2 * i + 0.5
        base = int(np.floor(centre))
        for tap in range(base - 1, base + 3):
            m[i, min(max(tap, 0), n - 1)] += cubic_weight(centre - tap)
    return m


def downsample_half(img: np.ndarray) -> np.ndarray:
    """Factor-1/2 Catmull-Rom resampling with edge-replicated borders; (..., H, W)."""
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape[-2:]
    if h % 2 or w % 2:
        raise ShapeError(f"downsample_half needs even dimensions, got {img.shape}")
    mh, mw = _half_matrix(h), _half_matrix(w)
    return np.einsum("ih,...hw,jw->...ij", mh, img, mw)


def crop_to_multiple(img: np.ndarray, multiple: int) -> np.ndarray:
    h, w = img.shape[-2:]
    return img[..., : h - h % multiple, : w - w % multiple]


def build_pyramid(image: np.ndarray, scales: int = 3) -> List[np.ndarray]:
    """Finest-first list of ``scales`` levels, each exactly half the previous."""
    factor = 2 ** (scales - 1)
    img = crop_to_multiple(np.asarray(image, dtype=np.float64), factor)
    if img.shape[-1] == 0 or img.shape[-2] == 0:
        raise ShapeError(f"image {np.shape(image)} too small for {scales} scales")
    levels = [img]
    for _ in range(scales - 1):
        levels.append(downsample_half(levels[-1]))
    return levels


# ---------------------------------------------------------------------------
# augmentation and cropping
# ---------------------------------------------------------------------------


def dihedral(img: np.ndarray, k: int) -> np.ndarray:
    """One of the 8 square symmetries: ``k % 4`` quarter turns, then a flip if ``k >= 4``."""
    out = np.rot90(img, k % 4, axes=(-2, -1))
    if k >= 4:
        out = out[..., ::-1]
    return np.ascontiguousarray(out)


def augment(
    pair: BlurPair,
    rng: np.random.Generator,
    sigma: Optional[float] = None,
    transform: Optional[int] = None,
) -> BlurPair:
    """Random dihedral transform of both images, then fresh noise on the blurred one.

    Noise is re-drawn on the noise-free blurred image when the pair carries it;
    otherwise it is added on top of the stored blurred image.
    """
    k = int(rng.integers(8)) if transform is None else int(transform)
    h, w = pair.sharp.shape[-2:]
    if k % 2 and h != w:
        raise ShapeError(f"quarter-turn of a non-square patch {pair.sharp.shape}")
    sigma = pair.sigma if sigma is None else sigma
    source = pair.clean if pair.clean is not None else pair.blurred
    clean = dihedral(source, k)
    blurred = add_noise(clean, sigma, rng)
    return BlurPair(
        dihedral(pair.sharp, k),
        blurred,
        pair.kernel,
        sigma,
        clean if pair.clean is not None else None,
    )


def crop_patches(pair: BlurPair, size: int, count: int, rng: np.random.Generator) -> List[BlurPair]:
    """``count`` aligned random square crops of side ``size``."""
    h, w = pair.sharp.shape[-2:]
    if size > h or size > w:
        raise ShapeError(f"patch size {size} exceeds image {pair.sharp.shape}")
    out = []
    for _ in range(count):
        top = int(rng.integers(0, h - size + 1))
        left = int(rng.integers(0, w - size + 1))
        win = (slice(None), slice(top, top + size), slice(left, left + size))
        out.append(
            replace(
                pair,
                sharp=pair.sharp[win].copy(),
                blurred=pair.blurred[win].copy(),
                clean=None if pair.clean is None else pair.clean[win].copy(),
            )
        )
    return out


# ---------------------------------------------------------------------------
# image files
# ---------------------------------------------------------------------------


def to_uint8(img: np.ndarray) -> np.ndarray:
    """[0, 1] floats to 8-bit, rounding half up."""
    return np.floor(np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def read_image(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr.transpose(2, 0, 1) / 255.0


def write_image(path, img: np.ndarray) -> None:
    path = Path(path)
    arr = to_uint8(np.asarray(img)).transpose(1, 2, 0)
    fmt = "PPM" if path.suffix.lower() in (".ppm", ".pnm") else "PNG"
    Image.fromarray(arr, "RGB").save(path, format=fmt)


def write_dataset(root, pairs: Sequence[BlurPair], manifest: Optional[dict] = None) -> None:
    root = Path(root)
    (root / "sharp").mkdir(parents=True, exist_ok=True)
    (root / "blur").mkdir(parents=True, exist_ok=True)
    for i, p in enumerate(pairs):
        write_image(root / "sharp" / f"{i:04d}.png", p.sharp)
        write_image(root / "blur" / f"{i:04d}.png", p.blurred)
    if manifest is not None:
        (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_dataset(root) -> List[BlurPair]:
    """Pairs from ``sharp/NNNN.png`` and ``blur/NNNN.png`` matched by index."""
    root = Path(root)
    sharp_dir, blur_dir = root / "sharp", root / "blur"
    if not sharp_dir.is_dir() or not blur_dir.is_dir():
        raise FileNotFoundError(f"{root} must contain sharp/ and blur/ directories")
    pairs = []
    for sp in sorted(sharp_dir.glob("*.png")):
        bp = blur_dir / sp.name
        if not bp.exists():
            raise FileNotFoundError(f"no blurred counterpart for {sp}")
        s, b = read_image(sp), read_image(bp)
        if s.shape != b.shape:
            raise ShapeError(f"{sp.name}: sharp {s.shape} vs blurred {b.shape}")
        pairs.append(BlurPair(s, b))
    if not pairs:
        raise FileNotFoundError(f"no image pairs found under {root}")
    return pairs

"""Dense NCHW tensors with a small reverse-mode differentiation tape.

Every primitive below records a closure that maps the upstream gradient of
its output to gradients of its inputs.  ``backward`` walks the recorded graph
once in reverse topological order and accumulates contributions additively,
so a tensor consumed by several nodes (e.g. weights shared across scales)
receives the sum of all of them.
"""

from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np

ArrayLike = Union[np.ndarray, float, int, Sequence]


class ShapeError(ValueError):
    """Raised when an operation's shape contract is violated."""


class Tensor:
    """A value array plus an optional gradient buffer and its graph record."""

    __slots__ = ("data", "grad", "requires_grad", "op", "name", "_parents", "_backward")

    def __init__(
        self,
        data: ArrayLike,
        requires_grad: bool = False,
        dtype=None,
        name: Optional[str] = None,
        op: str = "leaf",
        parents: tuple = (),
        backward_fn: Optional[Callable] = None,
    ):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.op = op
        self.name = name
        self._parents = parents
        self._backward = backward_fn

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        label = self.name or self.op
        return f"Tensor({label}, shape={self.shape}, dtype={self.dtype})"

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, name=self.name)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return NotImplemented

    __rmul__ = __mul__

    def sum(self) -> "Tensor":
        return tensor_sum(self)

    def backward(self) -> None:
        backward(self)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _make(data, parents, backward_fn, op) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    return Tensor(
        data,
        requires_grad=needs,
        op=op,
        parents=tuple(parents) if needs else (),
        backward_fn=backward_fn if needs else None,
    )


def _check_4d(x: Tensor, what: str) -> None:
    if x.data.ndim != 4:
        raise ShapeError(f"{what} expects a 4-axis (N, C, H, W) tensor, got shape {x.shape}")


# ---------------------------------------------------------------------------
# graph traversal
# ---------------------------------------------------------------------------


def topological_order(root: Tensor) -> list:
    """Nodes reachable from ``root`` with every node after all of its parents."""
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf that requires it."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = topological_order(loss)
    pending = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            # leaf: finalize into the persistent accumulator
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in pending:
                pending[key] = pending[key] + pg
            else:
                pending[key] = pg


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"add: shape mismatch {a.shape} vs {b.shape}")

    def bw(g):
        return g, g

    return _make(a.data + b.data, (a, b), bw, "add")


def scale(a: Tensor, c: float) -> Tensor:
    def bw(g):
        return (g * c,)

    return _make(a.data * a.data.dtype.type(c), (a,), bw, "scale")


def tensor_sum(a: Tensor) -> Tensor:
    def bw(g):
        return (np.full_like(a.data, g),)

    return _make(np.asarray(a.data.sum()), (a,), bw, "sum")


def _pad_edge(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)), mode="edge")


def _unpad_edge(g: np.ndarray, p: int) -> np.ndarray:
    """Adjoint of edge-replicate padding: fold border gradients onto the edges."""
    if p == 0:
        return g
    g = g.copy()
    g[:, :, p, :] += g[:, :, :p, :].sum(axis=2)
    g[:, :, -p - 1, :] += g[:, :, -p:, :].sum(axis=2)
    g = g[:, :, p:-p, :]
    g[:, :, :, p] += g[:, :, :, :p].sum(axis=3)
    g[:, :, :, -p - 1] += g[:, :, :, -p:].sum(axis=3)
    return np.ascontiguousarray(g[:, :, :, p:-p])


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Stride-1, same-size convolution with edge-replicate padding.

    This is cross-correlation, as in every deep learning framework:
    ``out[n, o, h, w] = b[o] + sum_{c,i,j} W[o, c, i, j] * xpad[n, c, h + i, w + j]``.
    """
    _check_4d(x, "conv2d")
    cout, cin, kh, kw = weight.shape
    n, c, h, w = x.shape
    if c != cin:
        raise ShapeError(f"conv2d: input shape {x.shape} has {c} channels, kernel shape {weight.shape} expects {cin}")
    if kh != kw or kh % 2 == 0:
        raise ShapeError(f"conv2d: kernel must be square and odd, got {weight.shape}")
    p = kh // 2
    xp = _pad_edge(x.data, p)
    col = np.empty((c, kh, kw, n, h, w), dtype=x.data.dtype)
    for i in range(kh):
        for j in range(kw):
            col[:, i, j] = xp[:, :, i:i + h, j:j + w].transpose(1, 0, 2, 3)
    col = col.reshape(c * kh * kw, n * h * w)
    wmat = weight.data.reshape(cout, -1)
    out = wmat @ col
    if bias is not None:
        out += bias.data[:, None]
    out = np.ascontiguousarray(out.reshape(cout, n, h, w).transpose(1, 0, 2, 3))

    def bw(g):
        gm = g.transpose(1, 0, 2, 3).reshape(cout, n * h * w)
        gw = (gm @ col.T).reshape(weight.shape) if weight.requires_grad else None
        gb = gm.sum(axis=1) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gcol = (wmat.T @ gm).reshape(c, kh, kw, n, h, w)
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + h, j:j + w] += gcol[:, i, j].transpose(1, 0, 2, 3)
            gx = _unpad_edge(gxp, p)
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, bw, "conv2d")


def prelu(x: Tensor, slopes: Tensor) -> Tensor:
    """Per-channel parametric ReLU; the derivative at 0 takes the positive branch."""
    _check_4d(x, "prelu")
    if slopes.shape != (x.shape[1],):
        raise ShapeError(f"prelu: slopes shape {slopes.shape} does not match {x.shape[1]} channels")
    a = slopes.data[None, :, None, None]
    pos = x.data >= 0
    out = np.where(pos, x.data, a * x.data)

    def bw(g):
        gx = np.where(pos, g, a * g)
        ga = (g * np.where(pos, 0, x.data)).sum(axis=(0, 2, 3))
        return gx, ga

    return _make(out, (x, slopes), bw, "prelu")


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(d.dtype)

    def bw(g):
        return (g * out * (1 - out),)

    return _make(out, (x,), bw, "sigmoid")


def pixel_unshuffle(x: Tensor, factor: int = 2) -> Tensor:
    """(N, C, H, W) -> (N, r*r*C, H/r, W/r).

    Output channel ``(i*r + j)*C + c`` holds phase ``(i, j)`` of input channel
    ``c`` (row phase major, column phase minor).
    """
    _check_4d(x, "pixel_unshuffle")
    n, c, h, w = x.shape
    r = factor
    if h % r or w % r:
        raise ShapeError(f"pixel_unshuffle: spatial size of {x.shape} not divisible by {r}")
    out = x.data.reshape(n, c, h // r, r, w // r, r).transpose(0, 3, 5, 1, 2, 4)
    out = np.ascontiguousarray(out).reshape(n, r * r * c, h // r, w // r)

    def bw(g):
        gx = g.reshape(n, r, r, c, h // r, w // r).transpose(0, 3, 4, 1, 5, 2)
        return (np.ascontiguousarray(gx).reshape(n, c, h, w),)

    return _make(out, (x,), bw, "pixel_unshuffle")


def pixel_shuffle(x: Tensor, factor: int = 2) -> Tensor:
    """Exact inverse of :func:`pixel_unshuffle`."""
    _check_4d(x, "pixel_shuffle")
    n, cc, h, w = x.shape
    r = factor
    if cc % (r * r):
        raise ShapeError(f"pixel_shuffle: channel count of {x.shape} not divisible by {r * r}")
    c = cc // (r * r)
    out = x.data.reshape(n, r, r, c, h, w).transpose(0, 3, 4, 1, 5, 2)
    out = np.ascontiguousarray(out).reshape(n, c, h * r, w * r)

    def bw(g):
        gx = g.reshape(n, c, h, r, w, r).transpose(0, 3, 5, 1, 2, 4)
        return (np.ascontiguousarray(gx).reshape(n, cc, h, w),)

    return _make(out, (x,), bw, "pixel_shuffle")


def concat_channels(inputs: Iterable[Tensor]) -> Tensor:
    inputs = list(inputs)
    if not inputs:
        raise ShapeError("concat_channels: empty input list")
    for t in inputs:
        _check_4d(t, "concat_channels")
    n, _, h, w = inputs[0].shape
    for t in inputs[1:]:
        if (t.shape[0], t.shape[2], t.shape[3]) != (n, h, w):
            raise ShapeError(f"concat_channels: {t.shape} incompatible with {inputs[0].shape}")
    if len(inputs) == 1:
        return inputs[0]
    out = np.concatenate([t.data for t in inputs], axis=1)
    bounds = np.cumsum([0] + [t.shape[1] for t in inputs])

    def bw(g):
        return tuple(g[:, bounds[k]:bounds[k + 1]] for k in range(len(inputs)))

    return _make(out, tuple(inputs), bw, "concat")


def l1_distance(a: Tensor, b) -> Tensor:
    """Mean absolute difference; ``b`` may be a tensor or a constant array/scalar.

    The subgradient uses sign(0) = 0.
    """
    a = as_tensor(a)
    if isinstance(b, Tensor):
        bt = b
    else:
        bt = Tensor(np.broadcast_to(np.asarray(b, dtype=a.dtype), a.shape))
    if a.shape != bt.shape:
        raise ShapeError(f"l1_distance: shape mismatch {a.shape} vs {bt.shape}")
    diff = a.data - bt.data
    count = diff.size
    out = np.asarray(np.abs(diff).mean(), dtype=a.dtype)

    def bw(g):
        s = np.sign(diff) * (g / count)
        return s, -s

    return _make(out, (a, bt), bw, "l1")


def first_nonfinite(root: Tensor) -> Optional[Tensor]:
    """First tensor in forward order whose values contain NaN or Inf."""
    for node in topological_order(root):
        if not np.all(np.isfinite(node.data)):
            return node
    return None

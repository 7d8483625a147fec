"""Dense float64 tensor with tape-based reverse-mode differentiation.

Every op records its parents and a backward closure on the output. Calling
``backward()`` on a scalar walks the graph in reverse topological order,
accumulates gradients into leaves that require them, then drops the graph so
intermediate buffers can be collected.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference / frozen modules)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=DTYPE, copy=True) if not isinstance(data, np.ndarray) else data
        if arr.dtype != DTYPE:
            arr = arr.astype(DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.name = name

    # -- construction helpers -------------------------------------------------

    @classmethod
    def _make(cls, data: np.ndarray, parents: tuple["Tensor", ...], backward) -> "Tensor":
        needs = _grad_enabled and any(p.requires_grad for p in parents)
        out = cls(data, requires_grad=needs)
        if needs:
            out._parents = parents
            out._backward = backward
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_not_scalar(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- autodiff -------------------------------------------------------------

    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ValueError(f"backward() needs a scalar output, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=DTYPE)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                # leaf
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        # free the tape
        for node in order:
            if node._backward is not None:
                node._parents = ()
                node._backward = None

    # -- operator sugar -------------------------------------------------------

    def __add__(self, other):
        return add(self, _wrap(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, _wrap(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self) -> "Tensor":
        return swap_last(self)

    def sum(self) -> "Tensor":
        return tsum(self)


def _raise_not_scalar(t: Tensor):
    raise ValueError(f"item() needs a single-element tensor, got shape {t.shape}")


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=DTYPE))


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=DTYPE), requires_grad=requires_grad, name=name)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=DTYPE), requires_grad=requires_grad)


# -- elementwise ------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    sa, sb = a.shape, b.shape
    return Tensor._make(a.data + b.data, (a, b),
                        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    sa, sb = a.shape, b.shape
    return Tensor._make(a.data - b.data, (a, b),
                        lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    return Tensor._make(ad * bd, (a, b),
                        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def scale(a: Tensor, s: float) -> Tensor:
    return Tensor._make(a.data * s, (a,), lambda g: (g * s,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return Tensor._make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


# -- reductions ---------------------------------------------------------------


def tsum(a: Tensor) -> Tensor:
    shape = a.shape
    return Tensor._make(np.array(a.data.sum()), (a,),
                        lambda g: (np.broadcast_to(g, shape).copy(),))


def sum_squares(a: Tensor) -> Tensor:
    ad = a.data
    return Tensor._make(np.array(np.sum(ad * ad)), (a,), lambda g: (2.0 * g * ad,))


def mse(pred: Tensor, target: Tensor) -> Tensor:
    """Mean of squared differences over all elements."""
    if pred.shape != target.shape:
        raise ValueError(f"mse shape mismatch: {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    n = diff.size
    return Tensor._make(np.array(np.sum(diff * diff) / n), (pred, target),
                        lambda g: (2.0 * g * diff / n, -2.0 * g * diff / n))


# -- shape ----------------------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return Tensor._make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes: Iterable[int] | None = None) -> Tensor:
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return Tensor._make(np.ascontiguousarray(a.data.transpose(axes)), (a,),
                        lambda g: (g.transpose(inv),))


def swap_last(a: Tensor) -> Tensor:
    """Transpose the two trailing axes (matrix transpose for batched stacks)."""
    if a.ndim < 2:
        raise ValueError(f"swap_last needs rank >= 2, got shape {a.shape}")
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, axes)


# -- linear algebra ---------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy broadcasting over leading batch axes."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return Tensor._make(ad @ bd, (a, b), backward)


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis, stabilized by subtracting the row max."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - np.sum(g * y, axis=-1, keepdims=True)),)

    return Tensor._make(y, (x,), backward)


# -- convolution ------------------------------------------------------------------


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        if len(v) != 2:
            raise ValueError(f"expected a pair, got {v!r}")
        return int(v[0]), int(v[1])
    return int(v), int(v)


def conv_output_extent(n: int, k: int, s: int, p: int) -> int:
    return (n + 2 * p - k) // s + 1


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None,
           stride=1, padding=0) -> Tensor:
    """2D cross-correlation.

    ``x`` is C x H x W or B x C x H x W; ``kernel`` is K x C x kh x kw.
    """
    squeeze = x.ndim == 3
    if squeeze:
        x = reshape(x, (1,) + x.shape)
    if x.ndim != 4 or kernel.ndim != 4:
        raise ValueError(f"conv2d expects (B,)C,H,W input and K,C,kh,kw kernel; got {x.shape}, {kernel.shape}")
    B, C, H, W = x.shape
    K, Ck, kh, kw = kernel.shape
    if Ck != C:
        raise ValueError(f"conv2d channel mismatch: input {x.shape}, kernel {kernel.shape}")
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    if sh < 1 or sw < 1:
        raise ValueError(f"conv2d stride must be positive, got {(sh, sw)}")
    Ho = conv_output_extent(H, kh, sh, ph)
    Wo = conv_output_extent(W, kw, sw, pw)
    if Ho < 1 or Wo < 1:
        raise ValueError(f"conv2d output extent non-positive: input {H}x{W}, kernel {kh}x{kw}, "
                         f"stride {(sh, sw)}, padding {(ph, pw)} -> {Ho}x{Wo}")

    xd = x.data
    if ph or pw:
        xp = np.zeros((B, C, H + 2 * ph, W + 2 * pw), dtype=DTYPE)
        xp[:, :, ph:ph + H, pw:pw + W] = xd
    else:
        xp = xd
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, : (Ho - 1) * sh + 1: sh, : (Wo - 1) * sw + 1: sw]
    # (B, C, Ho, Wo, kh, kw) -> (B, Ho, Wo, C*kh*kw)
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(B * Ho * Wo, C * kh * kw)
    wmat = kernel.data.reshape(K, C * kh * kw)
    out = cols @ wmat.T
    if bias is not None:
        out = out + bias.data.reshape(1, K)
    out = np.ascontiguousarray(out.reshape(B, Ho, Wo, K).transpose(0, 3, 1, 2))

    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, K)
        gk = (g2.T @ cols).reshape(K, C, kh, kw) if kernel.requires_grad else None
        gx = None
        if x.requires_grad:
            # one contiguous (kh, kw, B, C, Ho, Wo) copy keeps the scatter loop cheap
            gcols = np.ascontiguousarray((g2 @ wmat).reshape(B, Ho, Wo, C, kh, kw).transpose(4, 5, 0, 3, 1, 2))
            gxp = np.zeros((B, C, H + 2 * ph, W + 2 * pw), dtype=DTYPE)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + (Ho - 1) * sh + 1:sh, j:j + (Wo - 1) * sw + 1:sw] += gcols[i, j]
            gx = gxp[:, :, ph:ph + H, pw:pw + W]
        if bias is None:
            return gx, gk
        return gx, gk, g.sum(axis=(0, 2, 3))

    y = Tensor._make(out, parents, backward)
    if squeeze:
        y = reshape(y, y.shape[1:])
    return y


def conv_transpose2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride=1) -> Tensor:
    """Transposed convolution whose kernel extent equals its stride.

    ``x`` is (B,)C x H x W, ``kernel`` is C x K x Mh x Mw. Each input cell
    expands into a non-overlapping Mh x Mw output block, so the output is
    K x H*Mh x W*Mw. This is the adjoint of ``conv2d(., kernel, stride=M)``.
    """
    squeeze = x.ndim == 3
    if squeeze:
        x = reshape(x, (1,) + x.shape)
    if x.ndim != 4 or kernel.ndim != 4:
        raise ValueError(f"conv_transpose2d expects (B,)C,H,W input and C,K,kh,kw kernel; got {x.shape}, {kernel.shape}")
    sh, sw = _pair(stride)
    if sh < 1 or sw < 1:
        raise ValueError(f"conv_transpose2d stride must be >= 1, got {(sh, sw)}")
    B, C, H, W = x.shape
    Ck, K, kh, kw = kernel.shape
    if Ck != C:
        raise ValueError(f"conv_transpose2d channel mismatch: input {x.shape}, kernel {kernel.shape}")
    if (kh, kw) != (sh, sw):
        raise ValueError(f"conv_transpose2d needs kernel extent == stride, got kernel {(kh, kw)}, stride {(sh, sw)}")

    xd, kd = x.data, kernel.data
    xm = xd.transpose(0, 2, 3, 1).reshape(B * H * W, C)
    km = kd.reshape(C, K * kh * kw)
    blocks = (xm @ km).reshape(B, H, W, K, kh, kw)
    out = blocks.transpose(0, 3, 1, 4, 2, 5).reshape(B, K, H * kh, W * kw)
    if bias is not None:
        out = out + bias.data.reshape(1, K, 1, 1)
    out = np.ascontiguousarray(out)

    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def backward(g):
        gb = g.reshape(B, K, H, kh, W, kw).transpose(0, 2, 4, 1, 3, 5).reshape(B * H * W, K * kh * kw)
        gx = (gb @ km.T).reshape(B, H, W, C).transpose(0, 3, 1, 2) if x.requires_grad else None
        gk = (xm.T @ gb).reshape(C, K, kh, kw) if kernel.requires_grad else None
        if bias is None:
            return gx, gk
        return gx, gk, g.sum(axis=(0, 2, 3))

    y = Tensor._make(out, parents, backward)
    if squeeze:
        y = reshape(y, y.shape[1:])
    return y


def upsample_nearest(x: Tensor, factor: int = 2) -> Tensor:
    """Nearest-neighbour upsampling of the two trailing axes."""
    f = int(factor)
    out = np.repeat(np.repeat(x.data, f, axis=-2), f, axis=-1)
    shape = x.shape

    def backward(g):
        gs = g.reshape(shape[:-2] + (shape[-2], f, shape[-1], f))
        return (gs.sum(axis=(-3, -1)),)

    return Tensor._make(out, (x,), backward)


# -- RNG / init -------------------------------------------------------------------


RNG_ALGORITHM = "PCG64"


def make_rng(seed: int) -> np.random.Generator:
    """Seeded generator; PCG64 streams are identical across platforms."""
    return np.random.Generator(np.random.PCG64(int(seed) & 0xFFFFFFFFFFFFFFFF))


def kaiming_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)

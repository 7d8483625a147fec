"""Co-attention between x-axis and y-axis distributional features.

Per channel k, ``dx`` is c x r (rows: positions along x) and ``dy`` is r x c
(columns: positions along y). Two c x c row-stochastic affinities couple the
axes and each side is augmented with attended content from the other::

    W_xy = softmax_rows(dy^T P dx^T / sqrt(r))
    W_yx = softmax_rows(dx Q dy / sqrt(r))
    dx'  = dx + gamma * W_yx dy^T
    dy'  = dy + gamma * (W_xy dx)^T

All functions accept extra leading batch/channel axes; P and Q broadcast.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, add, make_rng, matmul, scale, softmax_rows, swap_last


@dataclass
class CoAttentionParams:
    P: Tensor
    Q: Tensor
    gamma: float = 0.4

    def __post_init__(self):
        if self.P.ndim != 2 or self.P.shape[0] != self.P.shape[1] or self.P.shape != self.Q.shape:
            raise ValueError(f"P and Q must be equal square matrices, got {self.P.shape}, {self.Q.shape}")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError(f"gamma must lie in [0, 1], got {self.gamma}")

    @property
    def d(self) -> int:
        return self.P.shape[1]

    @classmethod
    def init(cls, r: int, gamma: float, seed: int, noise: float = 0.01) -> "CoAttentionParams":
        rng = make_rng(seed)
        P = np.eye(r) + noise * rng.standard_normal((r, r))
        Q = np.eye(r) + noise * rng.standard_normal((r, r))
        return cls(Tensor(P, requires_grad=True), Tensor(Q, requires_grad=True), gamma)


def _check_shapes(dx: Tensor, dy: Tensor, r: int | None = None) -> None:
    if dx.ndim < 2 or dy.ndim < 2 or dx.shape[-2:] != dy.shape[-2:][::-1]:
        raise ValueError(f"dx must have the shape of dy^T, got dx {dx.shape}, dy {dy.shape}")
    if r is not None and dx.shape[-1] != r:
        raise ValueError(f"feature width {dx.shape[-1]} does not match P/Q side {r}")


def affinities(dx: Tensor, dy: Tensor, params: CoAttentionParams) -> tuple[Tensor, Tensor]:
    """Return (W_xy, W_yx), each ... x c x c with rows summing to one."""
    _check_shapes(dx, dy, params.d)
    inv = 1.0 / math.sqrt(params.d)
    dxt = swap_last(dx)
    dyt = swap_last(dy)
    w_xy = softmax_rows(scale(matmul(matmul(dyt, params.P), dxt), inv))
    w_yx = softmax_rows(scale(matmul(matmul(dx, params.Q), dy), inv))
    return w_xy, w_yx


def fuse(dx: Tensor, dy: Tensor, w_xy: Tensor, w_yx: Tensor, gamma: float) -> tuple[Tensor, Tensor]:
    _check_shapes(dx, dy)
    c = dx.shape[-2]
    for w in (w_xy, w_yx):
        if w.shape[-2:] != (c, c):
            raise ValueError(f"affinity must be {c}x{c}, got {w.shape}")
    if gamma == 0.0:
        return dx, dy
    dx2 = add(dx, scale(matmul(w_yx, swap_last(dy)), gamma))
    dy2 = add(dy, scale(swap_last(matmul(w_xy, dx)), gamma))
    return dx2, dy2


def coattention_forward(dx: Tensor, dy: Tensor, params: CoAttentionParams) -> tuple[Tensor, Tensor]:
    """Apply affinities + fuse independently per channel with shared P, Q.

    ``dx``: (..., K, c, r), ``dy``: (..., K, r, c).
    """
    if dx.ndim < 3 or dx.shape[-3] < 1:
        raise ValueError(f"expected at least one channel, got dx {dx.shape}")
    if params.gamma == 0.0:
        _check_shapes(dx, dy, params.d)
        return dx, dy
    w_xy, w_yx = affinities(dx, dy, params)
    return fuse(dx, dy, w_xy, w_yx, params.gamma)

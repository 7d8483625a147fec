"""Landmark <-> heatmap conversion and quantization-error accounting.

Grid index ``i`` on an ``L``-point axis stands for the image coordinate
``i * F / L`` (the start of its cell). Quantization floors, recovery
multiplies back, so ``recover(quantize(p))`` loses the fractional part of
``p * L / F``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Literal

import numpy as np

Axis = Literal["x", "y"]


@dataclass(frozen=True)
class HeatmapSpec:
    F: float
    L: int
    sigma: float = 2.5

    def __post_init__(self):
        if not self.F >= 1:
            raise ValueError(f"F must be >= 1, got {self.F}")
        if int(self.L) != self.L or self.L < 2:
            raise ValueError(f"L must be an integer >= 2, got {self.L}")
        if not self.sigma > 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")

    @property
    def ratio(self) -> float:
        """L / F, the only scale that enters quantization."""
        return self.L / self.F


@dataclass
class Heatmap1D:
    spec: HeatmapSpec
    axis: Axis
    values: np.ndarray


@dataclass
class Heatmap2D:
    spec: HeatmapSpec
    values: np.ndarray  # values[y, x]


@dataclass
class LandmarkSet:
    coords: np.ndarray  # (N, 2) columns p (x), q (y), pixel units

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64).reshape(-1, 2)
        if len(self.coords) < 1:
            raise ValueError("LandmarkSet needs at least one landmark")

    @property
    def N(self) -> int:
        return len(self.coords)

    def check_bounds(self, F: float) -> None:
        c = self.coords
        if np.any(c < 0) or np.any(c >= F) or not np.all(np.isfinite(c)):
            raise ValueError(f"landmarks out of [0, {F}) bounds")


def _check_coord(v: float, F: float, what: str = "coordinate") -> None:
    if not (0 <= v < F):
        raise ValueError(f"{what} {v} outside [0, {F})")


def _peak_normalize(v: np.ndarray) -> np.ndarray:
    m = v.max()
    return v / m if m > 0 else v


def encode2d(center: tuple[float, float], spec: HeatmapSpec) -> Heatmap2D:
    p, q = center
    _check_coord(p, spec.F, "p")
    _check_coord(q, spec.F, "q")
    cx, cy = p * spec.ratio, q * spec.ratio
    grid = np.arange(spec.L, dtype=np.float64)
    # full 2D exponent, not an outer product, so separability against
    # encode1d is a real check
    d2 = (grid[None, :] - cx) ** 2 + (grid[:, None] - cy) ** 2
    vals = np.exp(-d2 / (2 * spec.sigma ** 2))
    return Heatmap2D(spec, _peak_normalize(vals))


def encode1d(coord: float, spec: HeatmapSpec, axis: Axis = "x") -> Heatmap1D:
    _check_coord(coord, spec.F)
    c = coord * spec.ratio
    grid = np.arange(spec.L, dtype=np.float64)
    vals = np.exp(-((grid - c) ** 2) / (2 * spec.sigma ** 2))
    return Heatmap1D(spec, axis, _peak_normalize(vals))


def encode_targets(coords: np.ndarray, spec: HeatmapSpec) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized 1D targets for a (..., N, 2) coordinate array.

    Returns x and y target stacks of shape (..., N, L).
    """
    coords = np.asarray(coords, dtype=np.float64)
    grid = np.arange(spec.L, dtype=np.float64)
    c = coords * spec.ratio
    out = np.exp(-((grid - c[..., None]) ** 2) / (2 * spec.sigma ** 2))
    out = out / out.max(axis=-1, keepdims=True)
    return out[..., 0, :], out[..., 1, :]


def marginalize(h: Heatmap2D, normalize: bool = True) -> tuple[Heatmap1D, Heatmap1D]:
    hx = h.values.sum(axis=0)
    hy = h.values.sum(axis=1)
    if normalize:
        hx, hy = _peak_normalize(hx), _peak_normalize(hy)
    return Heatmap1D(h.spec, "x", hx), Heatmap1D(h.spec, "y", hy)


def quantize(p: float, q: float, spec: HeatmapSpec) -> tuple[int, int]:
    _check_coord(p, spec.F, "p")
    _check_coord(q, spec.F, "q")
    return math.floor(p * spec.L / spec.F), math.floor(q * spec.L / spec.F)


def recover(x: int, y: int, spec: HeatmapSpec) -> tuple[float, float]:
    for v, name in ((x, "x"), (y, "y")):
        if not (0 <= v < spec.L):
            raise ValueError(f"grid index {name}={v} outside [0, {spec.L})")
    return x * spec.F / spec.L, y * spec.F / spec.L


def quantization_error(p: float, q: float, spec: HeatmapSpec) -> float:
    pr, qr = recover(*quantize(p, q, spec), spec)
    return math.hypot(p - pr, q - qr)


def quantization_error_batch(pq: np.ndarray, spec: HeatmapSpec) -> np.ndarray:
    """Vectorized ``quantization_error`` over an (M, 2) array of in-bounds points."""
    pq = np.asarray(pq, dtype=np.float64)
    if np.any(pq < 0) or np.any(pq >= spec.F):
        raise ValueError(f"points outside [0, {spec.F})")
    rec = np.floor(pq * spec.L / spec.F) * spec.F / spec.L
    return np.hypot(*(pq - rec).T)


def decode_argmax(h: Heatmap1D | np.ndarray, F: float | None = None, L: int | None = None) -> float:
    """Peak index scaled by F / L; ``np.argmax`` already breaks ties low."""
    if isinstance(h, Heatmap1D):
        values, F, L = h.values, h.spec.F, h.spec.L
    else:
        values = np.asarray(h)
        if F is None:
            raise ValueError("F is required when decoding a raw array")
        L = len(values) if L is None else L
    if values.size == 0:
        raise ValueError("cannot decode an empty heatmap")
    return int(np.argmax(values)) * F / L


def decode_batch(hx: np.ndarray, hy: np.ndarray, F: float) -> np.ndarray:
    """Argmax-decode stacks (..., N, L) of x/y heatmaps into (..., N, 2) coordinates."""
    L = hx.shape[-1]
    return np.stack([np.argmax(hx, axis=-1), np.argmax(hy, axis=-1)], axis=-1) * (F / L)


def output_size(N: int, L: int, kind: str) -> int:
    if N < 1 or L < 1:
        raise ValueError("N and L must be >= 1")
    if kind.lower() == "1d":
        return 2 * N * L
    if kind.lower() == "2d":
        return N * L * L
    raise ValueError(f"kind must be '1d' or '2d', got {kind!r}")


def dump_heatmap(h: Heatmap1D, path: str | Path) -> None:
    lines = [f"{h.spec.L} {h.spec.sigma!r} {h.axis}"]
    lines += [f"{v:.17g}" for v in h.values]
    Path(path).write_text("\n".join(lines) + "\n")


def load_heatmap(path: str | Path, F: float) -> Heatmap1D:
    lines = Path(path).read_text().split("\n")
    head = lines[0].split()
    if len(head) != 3 or head[2] not in ("x", "y"):
        raise ValueError(f"bad heatmap header {lines[0]!r}")
    L, sigma = int(head[0]), float(head[1])
    vals = np.array([float(v) for v in lines[1:1 + L]])
    if len(vals) != L:
        raise ValueError(f"expected {L} values, found {len(vals)}")
    return Heatmap1D(HeatmapSpec(F, L, sigma), head[2], vals)
